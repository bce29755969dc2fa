"""Dataset generation from the oracle environments.

Two constructions mirror the two test-set styles: random excitation
(uniform per step or Poisson-switched holds) and policy data from the
CEM planner driving the oracle toward the environment's task reward.
"""
from __future__ import annotations

import numpy as np

from .datasets import TrajectoryDataset, TrajectorySegment
from .envs import ActionSamplerSpec, generate_trajectory, sample_actions, \
    step_oracle


def generate_random_dataset(env, n_traj, duration, sampler=None, seed=0):
    """Trajectories under random excitation, batched across seeds."""
    sampler = sampler or ActionSamplerSpec()
    rng = np.random.default_rng(seed)
    segments = []
    if n_traj > 0:
        s0 = env.sample_initial(rng, n_traj)                   # (B, d_s)
        actions = np.stack([sample_actions(sampler, env, duration, rng)
                            for _ in range(n_traj)], axis=1)   # (n, B, d_a)
        states = generate_trajectory(env, s0, actions)         # (n+1, B, d_s)
        segments = [
            TrajectorySegment(states[:, i], actions[:, i], source="random")
            for i in range(n_traj)
        ]
    return TrajectoryDataset(env_name=env.name, d_q=env.d_q, d_v=env.d_v,
                             d_a=env.d_a, dt=env.dt, segments=segments)


def generate_policy_dataset(env, n_traj, duration, planner_cfg=None, seed=0,
                            replan_every=8, exploration_std=0.0):
    """Trajectories gathered by CEM-MPC acting in the oracle (the planner's
    model is the oracle itself), optionally with Gaussian action
    exploration noise."""
    from .control import cem_plan
    from .odeint import IntegratorConfig
    from .control import PlannerConfig

    planner_cfg = planner_cfg or PlannerConfig(horizon=20, population=48,
                                               iterations=3)
    rng = np.random.default_rng(seed)
    n_steps = int(round(duration / env.dt))
    icfg = IntegratorConfig(h_init=env.dt / 10)
    segments = []
    for _ in range(n_traj):
        s = env.sample_initial(rng, 1)[0]
        states = [s.copy()]
        actions = []
        warm = None
        plan = None
        for step in range(n_steps):
            if step % replan_every == 0:
                plan, _, _ = cem_plan(env.env_derivative, s, env.reward,
                                      planner_cfg, env.action_low,
                                      env.action_high, env.dt, icfg,
                                      init_mean=warm, rng=rng)
                warm = np.vstack([plan[replan_every:],
                                  np.repeat(plan[-1:], replan_every,
                                            axis=0)])[: len(plan)]
            a = plan[min(step % replan_every, len(plan) - 1)].copy()
            if exploration_std > 0:
                a += rng.normal(0.0, exploration_std, size=a.shape)
                a = np.clip(a, env.action_low, env.action_high)
            s = step_oracle(env, s, a)
            states.append(s.copy())
            actions.append(a)
        segments.append(TrajectorySegment(np.array(states), np.array(actions),
                                          source="policy"))
    return TrajectoryDataset(env_name=env.name, d_q=env.d_q, d_v=env.d_v,
                             d_a=env.d_a, dt=env.dt, segments=segments)
