"""Rollout-MSE benchmarking and Lyapunov-exponent estimation.

A "model" here is any derivative function ``f(s, a) -> ds/dt`` (vectorized
over a batch axis): a learned dynamics closure and the oracle environment
derivative are interchangeable. Benchmark rollouts integrate the model with
the adaptive solver from a fragment's first state under the recorded
actions; no ground-truth warm-up steps are consumed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .datasets import WARMIN_STEPS, sample_fragments
from .errors import IntegrationError
from .odeint import IntegratorConfig, integrate_controlled


@dataclass
class BenchmarkReport:
    """Per-horizon prediction error of one model on one dataset."""

    env: str
    model: str
    horizons: list
    mse: list
    mse_normalized: list
    n_segments: list
    n_failed: list
    per_step_mse: list = field(default_factory=list)   # one array per horizon run
    config_hash: str = ""

    def to_json_dict(self):
        """Flat JSON document; see schemas/benchmark_report.schema.json."""
        doc = {
            "env": self.env,
            "model": self.model,
            "horizon": [int(h) for h in self.horizons],
            "mse": [float(v) for v in self.mse],
            "mse_normalized": [float(v) for v in self.mse_normalized],
            "n_segments": [int(v) for v in self.n_segments],
            "n_failed": [int(v) for v in self.n_failed],
        }
        if self.config_hash:
            doc["config_hash"] = self.config_hash
        return doc

    def to_json(self):
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


def _rollout_batch(model, s0, actions, dt, cfg):
    """Integrate a batch; on failure fall back to per-segment solves so one
    bad segment doesn't take the batch down. Returns (preds, ok_mask)."""
    n = s0.shape[0]
    try:
        preds, _ = integrate_controlled(model, s0, actions, dt, cfg)
        return preds, np.ones(n, dtype=bool)
    except IntegrationError:
        pass
    h = actions.shape[0]
    preds = np.zeros((h + 1, n, s0.shape[1]))
    ok = np.zeros(n, dtype=bool)
    for i in range(n):
        try:
            traj, _ = integrate_controlled(model, s0[i], actions[:, i], dt, cfg)
        except IntegrationError:
            continue
        preds[:, i] = traj
        ok[i] = True
    return preds, ok


def rollout_mse(model, dataset, horizons, n_eval=64, cfg=None, seed=0,
                warmin=WARMIN_STEPS, model_id="model"):
    """Mean squared multi-step prediction error at one or more horizons.

    Fragments of length ``max(horizons)`` are sampled once; shorter horizons
    are exact prefixes of the same rollouts (integration restarts at every
    control boundary, so a truncated rollout is bit-identical to a short
    one). The normalized variant divides squared errors by the dataset's
    per-dimension state variance.

    Segments whose integration fails are excluded and counted.
    """
    if np.isscalar(horizons):
        horizons = [int(horizons)]
    horizons = sorted(int(h) for h in horizons)
    h_max = horizons[-1]
    cfg = cfg or IntegratorConfig(h_init=dataset.dt / 10)
    rng = np.random.default_rng(seed)

    states, actions = sample_fragments(dataset, h_max, n_eval, rng, warmin)
    s0 = states[:, 0]
    acts = np.swapaxes(actions, 0, 1)  # (H, n_eval, d_a)
    preds, ok = _rollout_batch(model, s0, acts, dataset.dt, cfg)

    truth = np.swapaxes(states, 0, 1)  # (H+1, n_eval, d_s)
    sq = (preds[1:] - truth[1:]) ** 2  # (H, n_eval, d_s)
    std2 = dataset.state_std() ** 2
    n_ok = int(ok.sum())
    if n_ok == 0:
        raise IntegrationError("every benchmark segment failed to integrate")

    per_step = sq[:, ok, :].mean(axis=(1, 2))               # (H,)
    per_step_norm = (sq[:, ok, :] / std2).mean(axis=(1, 2))

    report = BenchmarkReport(env=dataset.env_name, model=model_id,
                             horizons=[], mse=[], mse_normalized=[],
                             n_segments=[], n_failed=[])
    for h in horizons:
        report.horizons.append(h)
        report.mse.append(float(per_step[:h].mean()))
        report.mse_normalized.append(float(per_step_norm[:h].mean()))
        report.n_segments.append(n_ok)
        report.n_failed.append(int(n_eval - n_ok))
        report.per_step_mse.append(per_step[:h].copy())
    return report


# ---------------------------------------------------------------------------
# Lyapunov characteristic exponent


@dataclass
class LceResult:
    lce: float
    std_error: float
    n_trajectories: int
    n_dropped: int
    per_trajectory: np.ndarray


def estimate_lce(step_fn, s0_sampler, delta=1e-5, t_steps=1000, n_traj=2000,
                 dt=0.05, seed=0):
    """Two-trajectory Lyapunov exponent with per-control-step renormalization.

    Each sampled state gets a twin displaced by ``delta`` along a random
    unit direction; both are advanced one control step at a time by
    ``step_fn(states)`` (vectorized over rows), accumulating
    ``ln(|separation| / delta)`` and rescaling the separation back to
    ``delta`` after every step. The estimate is the mean over trajectories
    of the accumulated log divided by the rollout duration.

    Trajectories that go non-finite are dropped and counted.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    rng = np.random.default_rng(seed)
    base = np.asarray(s0_sampler(rng, n_traj), dtype=np.float64)
    d = base.shape[1]
    direction = rng.normal(size=(n_traj, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    twin = base + delta * direction

    states = np.concatenate([base, twin], axis=0)
    logsum = np.zeros(n_traj)
    alive = np.ones(n_traj, dtype=bool)

    for _ in range(t_steps):
        states = np.asarray(step_fn(states), dtype=np.float64)
        a, b = states[:n_traj], states[n_traj:]
        diff = b - a
        dist = np.linalg.norm(diff, axis=1)
        finite = np.isfinite(dist) & np.all(np.isfinite(a), axis=1) & (dist > 0)
        newly_dead = alive & ~finite
        if np.any(newly_dead):
            # park dead rows at their base value so shared integration
            # stays finite; they no longer contribute
            idx = np.where(newly_dead)[0]
            states[idx] = np.where(np.isfinite(states[idx]), states[idx], 0.0)
            states[n_traj + idx] = states[idx]
            alive &= finite
        live = np.where(alive)[0]
        logsum[live] += np.log(dist[live] / delta)
        states[n_traj + live] = a[live] + diff[live] * (delta / dist[live])[:, None]

    per_traj = logsum[alive] / (t_steps * dt)
    if per_traj.size == 0:
        raise IntegrationError("all LCE trajectories diverged")
    lce = float(per_traj.mean())
    se = float(per_traj.std(ddof=1) / np.sqrt(per_traj.size)) \
        if per_traj.size > 1 else 0.0
    return LceResult(lce=lce, std_error=se, n_trajectories=int(per_traj.size),
                     n_dropped=int(n_traj - per_traj.size),
                     per_trajectory=per_traj)


def oracle_lce_step(env, substeps=None):
    """One-control-step advance of the oracle under zero action."""
    from .envs import ORACLE_SUBSTEPS, step_oracle
    substeps = substeps or ORACLE_SUBSTEPS

    def step(states):
        a = np.zeros((states.shape[0], env.d_a))
        return step_oracle(env, states, a, substeps)

    return step


def model_lce_step(model, d_a, dt, cfg=None):
    """One-control-step advance of a learned model under zero action."""
    cfg = cfg or IntegratorConfig(h_init=dt / 10)

    def step(states):
        a = np.zeros((1, states.shape[0], d_a))
        traj, _ = integrate_controlled(model, states, a, dt, cfg)
        return traj[-1]

    return step


#: Reference exponent of the bundled acrobot oracle at the documented
#: constants, computed with estimate_lce(delta=1e-5, t_steps=1000,
#: n_traj=2000, dt=0.05, seed=0) before any model training. Regenerate with
#: demos/05_lyapunov_acrobot.py if the environment constants change.
ACROBOT_ORACLE_LCE = None  # filled in below once computed; see tests
