"""Policy search inside a learned model.

The planner is cross-entropy-method MPC: sample action sequences from a
diagonal Gaussian, roll them out in the model (never the oracle), refit the
Gaussian to the elites, and return the final mean sequence. The zero-shot
harness replans every executed step, applies the first action in the oracle
environment, and reports the score next to the same planner driven by the
oracle dynamics as its model (the upper-bound reference arm).

An oracle-call counter on the environment lets tests prove that planning in
the learned model touches the oracle derivative exactly zero times.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrationError
from .odeint import IntegratorConfig, integrate_controlled


@dataclass
class PlannerConfig:
    horizon: int = 25          # control steps
    population: int = 64
    elite_frac: float = 0.125
    iterations: int = 4
    smoothing: float = 0.3     # low-pass coefficient on the CEM mean
    init_std_frac: float = 0.5  # initial std as a fraction of half the range
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        n_elite = max(1, int(round(self.elite_frac * self.population)))
        if not (1 <= n_elite <= self.population):
            raise ValueError("elite count must lie in [1, population]")

    @property
    def n_elite(self):
        return max(1, int(round(self.elite_frac * self.population)))

    def cfg_hash(self):
        from .util import config_hash
        return config_hash(self.__dict__)


def _rollout_returns(model, s0, action_seqs, reward_fn, dt, icfg):
    """Model return of each candidate sequence; failed candidates get -inf.

    ``action_seqs``: (N, H, d_a). Rewards are accumulated as
    reward_fn(next_state, action) summed over the horizon.
    """
    n, h, d_a = action_seqs.shape
    states = np.repeat(s0[None, :], n, axis=0)
    returns = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    for k in range(h):
        a = action_seqs[:, k, :]
        try:
            traj, _ = integrate_controlled(model, states, a[None], dt, icfg)
            nxt = traj[-1]
        except IntegrationError:
            # batch failed as a whole: finish candidates one by one
            nxt = np.array(states)
            for i in np.where(alive)[0]:
                try:
                    ti, _ = integrate_controlled(model, states[i], a[i][None],
                                                 dt, icfg)
                    nxt[i] = ti[-1]
                except IntegrationError:
                    alive[i] = False
        bad = ~np.all(np.isfinite(nxt), axis=-1)
        if np.any(bad):
            nxt[bad] = states[bad]  # park failed rows; they are already dead
            alive &= ~bad
        states = nxt
        returns[alive] += reward_fn(states[alive], a[alive])
    returns[~alive] = -np.inf
    return returns


def cem_plan(model, s0, reward_fn, cfg, action_low, action_high, dt,
             icfg=None, init_mean=None, rng=None):
    """Cross-entropy-method plan of ``cfg.horizon`` control steps.

    Returns ``(actions (H, d_a), predicted_return, info)`` where info holds
    the per-iteration elite returns. Deterministic given the seed (or the
    supplied rng). ``init_mean`` warm-starts the sampling mean.
    """
    icfg = icfg or IntegratorConfig(h_init=dt / 10)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    low = np.asarray(action_low, dtype=np.float64)
    high = np.asarray(action_high, dtype=np.float64)
    d_a = low.shape[0]
    s0 = np.asarray(s0, dtype=np.float64)

    mean = np.zeros((cfg.horizon, d_a)) if init_mean is None \
        else np.array(init_mean, dtype=np.float64)
    std = np.broadcast_to(cfg.init_std_frac * (high - low) / 2.0,
                          mean.shape).copy()
    best_seq = None
    best_return = -np.inf
    elite_history = []

    for _ in range(cfg.iterations):
        samples = rng.normal(mean, std, size=(cfg.population,) + mean.shape)
        samples = np.clip(samples, low, high)
        if best_seq is not None:
            samples[0] = best_seq  # elite retention
        returns = _rollout_returns(model, s0, samples, reward_fn, dt, icfg)
        order = np.argsort(returns)[::-1]
        elites = samples[order[: cfg.n_elite]]
        if returns[order[0]] >= best_return:
            best_return = float(returns[order[0]])
            best_seq = samples[order[0]].copy()
        elite_history.append(best_return)
        new_mean = elites.mean(axis=0)
        new_std = elites.std(axis=0) + 1e-6
        mean = cfg.smoothing * mean + (1.0 - cfg.smoothing) * new_mean
        std = cfg.smoothing * std + (1.0 - cfg.smoothing) * new_std

    final_returns = _rollout_returns(model, s0, mean[None], reward_fn, dt, icfg)
    if final_returns[0] >= best_return:
        best_return = float(final_returns[0])
        best_seq = mean.copy()
    return best_seq, best_return, {"elite_returns": elite_history}


# ---------------------------------------------------------------------------
# zero-shot evaluation


@dataclass
class EpisodeResult:
    total_return: float
    length: int
    rewards: list


@dataclass
class ZeroShotReport:
    env: str
    model_ckpt: str
    planner_cfg_hash: str
    mean_return: float
    oracle_planner_return: float
    episodes: list
    oracle_episodes: list
    oracle_calls_during_planning: int
    config_hash: str = ""

    def to_json_dict(self):
        return {
            "env": self.env,
            "model_ckpt": self.model_ckpt,
            "planner_cfg_hash": self.planner_cfg_hash,
            "mean_return": self.mean_return,
            "oracle_planner_return": self.oracle_planner_return,
            "episodes": [
                {"return": e.total_return, "length": e.length,
                 "rewards": [float(r) for r in e.rewards]}
                for e in self.episodes],
            "oracle_episodes": [
                {"return": e.total_return, "length": e.length,
                 "rewards": [float(r) for r in e.rewards]}
                for e in self.oracle_episodes],
            "oracle_calls_during_planning": self.oracle_calls_during_planning,
            "config_hash": self.config_hash,
        }

    def to_json(self):
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


def run_mpc_episode(model, env, reward_fn, cfg, episode_length, rng,
                    s0=None, icfg=None, replan_every=1, count_planning_calls=False):
    """MPC loop: replan in ``model``, execute in the oracle env.

    Returns ``(EpisodeResult, planning_oracle_calls)`` where the call count
    is how often the oracle derivative ran while planning (zero whenever
    ``model`` is not the oracle).
    """
    from .envs import step_oracle

    icfg = icfg or IntegratorConfig(h_init=env.dt / 10)
    if s0 is None:
        s = env.sample_initial(rng, 1)[0]
    else:
        s = np.asarray(s0, dtype=np.float64).copy()
    rewards = []
    warm = None
    plan = None
    planning_calls = 0
    for step in range(episode_length):
        k = step % replan_every
        if k == 0:
            before = env.deriv_calls
            plan, _, _ = cem_plan(model, s, reward_fn, cfg, env.action_low,
                                  env.action_high, env.dt, icfg,
                                  init_mean=warm, rng=rng)
            planning_calls += env.deriv_calls - before
            # warm start for the next replan: drop the executed prefix
            warm = np.vstack([plan[replan_every:],
                              np.repeat(plan[-1:], min(replan_every, len(plan)),
                                        axis=0)])[: len(plan)]
        a = plan[min(k, len(plan) - 1)]
        s = step_oracle(env, s, a)
        rewards.append(float(env.reward(s, a)))
    total = float(np.sum(rewards))
    return EpisodeResult(total, episode_length, rewards), planning_calls


def zero_shot_eval(model, env, reward_fn, cfg, n_episodes=3,
                   episode_length=100, seed=0, s0=None, icfg=None,
                   replan_every=1, model_ckpt="model"):
    """Score the learned-model planner against the oracle-planner arm.

    Both arms run the identical MPC loop with the same seeds; the only
    difference is the dynamics the planner imagines with. The report's
    ``oracle_calls_during_planning`` counts oracle derivative evaluations
    while the learned-model arm was planning, and must be zero.
    """
    episodes, oracle_episodes = [], []
    planning_calls = 0
    for ep in range(n_episodes):
        rng_model = np.random.default_rng(seed + 1000 * ep)
        rng_oracle = np.random.default_rng(seed + 1000 * ep)
        start = env.sample_initial(rng_model, 1)[0] if s0 is None else s0
        rng_oracle.bit_generator.state = rng_model.bit_generator.state

        res, calls = run_mpc_episode(model, env, reward_fn, cfg,
                                     episode_length, rng_model, s0=start,
                                     icfg=icfg, replan_every=replan_every)
        episodes.append(res)
        planning_calls += calls

        res_o, _ = run_mpc_episode(env.env_derivative, env, reward_fn, cfg,
                                   episode_length, rng_oracle, s0=start,
                                   icfg=icfg, replan_every=replan_every)
        oracle_episodes.append(res_o)

    return ZeroShotReport(
        env=env.name,
        model_ckpt=model_ckpt,
        planner_cfg_hash=cfg.cfg_hash(),
        mean_return=float(np.mean([e.total_return for e in episodes])),
        oracle_planner_return=float(np.mean([e.total_return
                                             for e in oracle_episodes])),
        episodes=episodes,
        oracle_episodes=oracle_episodes,
        oracle_calls_during_planning=planning_calls,
    )
