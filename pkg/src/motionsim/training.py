"""Segment-matching training of the dynamics model.

The loss for a batch of trajectory fragments integrates the model from each
fragment's first state under the recorded actions and penalizes the squared
deviation from the recorded states at every control boundary. Gradients
flow either by replaying the recorded solver stages in reverse (default) or
by the adjoint method; both are selectable per run and agree to solver
tolerance.

Multi-stage training first fits the structured predictor alone, then
freezes it and fits correctors one at a time on the residual error. Frozen
parameter groups are excluded from the optimizer entirely, so their tensors
stay bit-identical across the stages that freeze them.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .benchmark import rollout_mse
from .datasets import add_observation_noise, sample_fragments, \
    train_validation_split
from .dynamics import dynamics_vjp, full_derivative, parameters_to_dict, \
    replace_parameters
from .errors import TrainingFault
from .nn import adam_init, adam_step, tree_add, tree_from_vector, \
    tree_leaves, tree_to_vector
from .odeint import DOPRI5, IntegratorConfig, adjoint_backward, \
    backprop_through_steps, integrate_controlled

PREDICTOR_GROUPS = ("pos_enc.", "state_enc.", "act_enc.")

GRAD_PATHS = ("backprop_steps", "adjoint")


@dataclass
class TrainConfig:
    segment_length: int = 8
    batch_size: int = 64
    steps_per_stage: list = field(default_factory=lambda: [2000])
    grad_path: str = "backprop_steps"
    lr: float = 1e-3
    lr_decay: float = 0.1           # final-lr multiplier, exponential per stage
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    noise_sigma: float = 0.0
    rtol: float = 1e-6
    atol: float = 1e-6
    h_init_frac: float = 0.5        # initial solver step as a fraction of dt
    grad_clip: float = 10.0
    curriculum: bool = True
    curriculum_phases: list = None  # [(fraction, seg_len, batch), ...]
    warmin: int = 100
    validation_every: int = 500
    validation_segments: int = 64
    validation_horizons: list = field(default_factory=lambda: [16, 100])
    validation_fraction: float = 0.1
    keep_best: bool = True          # end each stage at its best-validation params
    checkpoint_every: int = 0      # 0 disables periodic checkpoints
    checkpoint_path: str = ""

    def __post_init__(self):
        if self.segment_length < 1:
            raise ValueError("segment_length must be >= 1")
        if self.grad_path not in GRAD_PATHS:
            raise ValueError(f"grad_path must be one of {GRAD_PATHS}")

    def integrator(self, dt):
        return IntegratorConfig(rtol=self.rtol, atol=self.atol,
                                h_init=dt * self.h_init_frac)

    def stage1_phases(self):
        """(fraction, seg_len, batch) triples for the predictor stage.

        Defaults to length doubling from ``segment_length`` up to 32 in
        equal thirds.
        """
        if not self.curriculum:
            return [(1.0, self.segment_length, self.batch_size)]
        if self.curriculum_phases:
            return [tuple(p) for p in self.curriculum_phases]
        L = self.segment_length
        return [(1 / 3, L, self.batch_size),
                (1 / 3, min(2 * L, max(L, 32)), self.batch_size),
                (1 / 3, min(4 * L, max(L, 32)), self.batch_size)]


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)          # per optimizer step
    stage_bounds: list = field(default_factory=list)    # step index where each stage starts
    validations: list = field(default_factory=list)     # dicts: step, horizon -> normalized mse
    wall_time: float = 0.0
    config_hash: str = ""

    def best_validation(self, horizon):
        vals = [v["mse_normalized"][str(horizon)] for v in self.validations
                if str(horizon) in v["mse_normalized"]]
        return min(vals) if vals else np.inf


# ---------------------------------------------------------------------------
# loss


def segment_loss(params, states, actions, dt, grad_path="backprop_steps",
                 cfg=None, frozen=(), need_grads=True):
    """MSE of the integrated rollout against recorded boundary states.

    ``states``: (B, n+1, d_s) or (n+1, d_s); ``actions``: (B, n, d_a) or
    (n, d_a). Returns ``(loss, grad_tree)``; the gradient mirrors the
    parameter structure, with frozen group prefixes zeroed. Pass
    ``need_grads=False`` to skip the backward sweep.
    """
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    single = states.ndim == 2
    if single:
        states = states[None]
        actions = actions[None]
    B, n_plus1, d_s = states.shape
    n = n_plus1 - 1
    if n < 1:
        raise ValueError("segments need at least one control step")
    cfg = cfg or IntegratorConfig(h_init=dt / 10)

    f = lambda s, a: full_derivative(s, a, params)
    acts = np.swapaxes(actions, 0, 1)  # (n, B, d_a)
    try:
        preds, interval_records = integrate_controlled(
            f, states[:, 0], acts, dt, cfg, record=need_grads)
    except Exception as e:
        raise TrainingFault(f"segment integration failed: {e}") from e

    truth = np.swapaxes(states, 0, 1)        # (n+1, B, d_s)
    diffs = preds[1:] - truth[1:]            # (n, B, d_s)
    loss = float(np.mean(diffs ** 2))
    if not need_grads:
        return loss, None

    dL = 2.0 * diffs / diffs.size            # cotangents at each boundary

    def vjp_tree(y, a, u):
        gp, gs, _ = dynamics_vjp(y, a, params, u)
        return gp, gs

    grad_tree = None
    if grad_path == "backprop_steps":
        ubar = np.zeros_like(preds[0])
        for k in range(n - 1, -1, -1):
            ubar = ubar + dL[k]
            g, ubar = backprop_through_steps(interval_records[k], vjp_tree,
                                             ubar, DOPRI5)
            if g is not None:
                grad_tree = g if grad_tree is None else tree_add(grad_tree, g)
    elif grad_path == "adjoint":
        template = _grad_template(params)

        def vjp_flat(y, a, u):
            gp, gs = vjp_tree(y, a, u)
            return tree_to_vector(gp), gs

        theta_vec = None
        ubar = np.zeros_like(preds[0])
        for k in range(n - 1, -1, -1):
            ubar = ubar + dL[k]
            gvec, ubar = adjoint_backward(f, vjp_flat, interval_records[k],
                                          ubar, cfg)
            theta_vec = gvec if theta_vec is None else theta_vec + gvec
        grad_tree = tree_from_vector(template, theta_vec)
    else:
        raise ValueError(f"unknown grad_path {grad_path!r}")

    if frozen:
        for name, arr in grad_tree.named_parameters():
            if any(name.startswith(p) for p in frozen):
                arr[:] = 0.0
    return loss, grad_tree


def _grad_template(params):
    gp, _, _ = dynamics_vjp(np.zeros(params.d_s), np.zeros(params.d_a),
                            params, np.zeros(params.d_s))
    return gp


def _clip_gradients(grads_dict, max_norm):
    if max_norm <= 0:
        return grads_dict
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads_dict.values()))
    if total > max_norm:
        scale = max_norm / total
        return {k: g * scale for k, g in grads_dict.items()}
    return grads_dict


# ---------------------------------------------------------------------------
# stage runner


@dataclass
class _Stage:
    n_steps: int
    active_correctors: int
    trainable: tuple  # group prefixes


def _phase_schedule(cfg, stage_idx, n_steps):
    """Per-step (seg_len, batch) schedule; curriculum applies to stage 1."""
    if stage_idx > 0:
        return [(cfg.segment_length, cfg.batch_size)] * n_steps
    out = []
    phases = cfg.stage1_phases()
    total_frac = sum(p[0] for p in phases)
    for frac, seg_len, batch in phases:
        out.extend([(int(seg_len), int(batch))]
                   * int(round(n_steps * frac / total_frac)))
    while len(out) < n_steps:
        out.append(out[-1] if out else (cfg.segment_length, cfg.batch_size))
    return out[:n_steps]


def _run_stages(cfg, dataset, params, stages, log_path=None):
    """Shared optimizer loop for multistage and end-to-end training."""
    rng = np.random.default_rng(cfg.seed)
    if cfg.noise_sigma > 0:
        dataset = add_observation_noise(dataset, cfg.noise_sigma,
                                        seed=cfg.seed + 7919)
    train_ds, val_ds = train_validation_split(dataset, cfg.validation_fraction)
    icfg = cfg.integrator(dataset.dt)
    log = TrainLog()
    t_start = time.perf_counter()
    log_fh = open(log_path, "w") if log_path else None
    step_global = 0

    try:
        for stage_idx, stage in enumerate(stages):
            log.stage_bounds.append(step_global)
            params = replace(params, active_correctors=stage.active_correctors)
            full = parameters_to_dict(params)
            trainable_keys = [k for k in full
                              if any(k.startswith(p) for p in stage.trainable)]
            opt_params = {k: full[k] for k in trainable_keys}
            opt = adam_init(opt_params, lr=cfg.lr, beta1=cfg.beta1,
                            beta2=cfg.beta2, eps=cfg.eps_adam)
            frozen = tuple(p for p in _all_groups(params)
                           if p not in stage.trainable)
            schedule = _phase_schedule(cfg, stage_idx, stage.n_steps)
            stage_best = (np.inf, None)

            for step in range(stage.n_steps):
                seg_len, batch = schedule[step]
                if cfg.lr_decay != 1.0 and stage.n_steps > 1:
                    opt.lr = cfg.lr * cfg.lr_decay ** (step / (stage.n_steps - 1))
                states, actions = sample_fragments(
                    train_ds, seg_len, batch, rng, cfg.warmin)
                loss, grads = segment_loss(
                    params, states, actions, dataset.dt,
                    grad_path=cfg.grad_path, cfg=icfg, frozen=frozen)
                gdict = dict(grads.named_parameters())
                gsub = _clip_gradients(
                    {k: gdict[k] for k in trainable_keys}, cfg.grad_clip)
                opt, opt_params = adam_step(opt, opt_params, gsub)
                params = replace_parameters(params, opt_params)

                log.losses.append(loss)
                if log_fh:
                    print(json.dumps({"step": step_global, "stage": stage_idx,
                                      "loss": loss}), file=log_fh)
                if cfg.validation_every and \
                        (step_global + 1) % cfg.validation_every == 0:
                    score = _validate(params, val_ds, cfg, icfg, step_global,
                                      log, log_fh)
                    if score is not None and score < stage_best[0]:
                        stage_best = (score, dict(opt_params))
                if cfg.checkpoint_every and cfg.checkpoint_path and \
                        (step_global + 1) % cfg.checkpoint_every == 0:
                    from .checkpoint import save_dynamics
                    save_dynamics(cfg.checkpoint_path, params)
                step_global += 1

            if cfg.validation_every:
                score = _validate(params, val_ds, cfg, icfg, step_global,
                                  log, log_fh)
                if score is not None and score < stage_best[0]:
                    stage_best = (score, dict(opt_params))
            if cfg.keep_best and stage_best[1] is not None:
                # rewind the stage's trainable groups to their best
                # validation point; frozen groups were never touched
                opt_params = stage_best[1]
                params = replace_parameters(params, opt_params)
    finally:
        if log_fh:
            log_fh.close()
    log.wall_time = time.perf_counter() - t_start
    return params, log


def _validate(params, val_ds, cfg, icfg, step_global, log, log_fh):
    """Record validation rollout MSE; returns the largest-horizon
    normalized MSE as the model-selection score (None on failure)."""
    model = lambda s, a: full_derivative(s, a, params)
    try:
        report = rollout_mse(model, val_ds, cfg.validation_horizons,
                             n_eval=cfg.validation_segments, cfg=icfg,
                             seed=cfg.seed + 13, warmin=cfg.warmin)
    except Exception:
        return None
    entry = {
        "step": step_global,
        "mse": {str(h): m for h, m in zip(report.horizons, report.mse)},
        "mse_normalized": {str(h): m for h, m in
                           zip(report.horizons, report.mse_normalized)},
    }
    log.validations.append(entry)
    if log_fh:
        print(json.dumps({"validation": entry}), file=log_fh)
    return entry["mse_normalized"][str(report.horizons[-1])]


def _all_groups(params):
    return PREDICTOR_GROUPS + tuple(f"corr{i}." for i in
                                    range(len(params.correctors)))


def train_multistage(cfg, dataset, params0, log_path=None):
    """Stage 1 trains the predictor alone; stage k >= 2 activates corrector
    k-1, freezes everything earlier, and trains only that corrector."""
    budgets = list(cfg.steps_per_stage)
    if len(budgets) > 1 + len(params0.correctors):
        raise ValueError(
            f"{len(budgets)} stages need {len(budgets) - 1} correctors, "
            f"model has {len(params0.correctors)}")
    stages = [_Stage(budgets[0], 0, PREDICTOR_GROUPS)]
    for k, steps in enumerate(budgets[1:]):
        stages.append(_Stage(steps, k + 1, (f"corr{k}.",)))
    params, log = _run_stages(cfg, dataset, params0, stages, log_path)
    return params, log


def train_end_to_end(cfg, dataset, params0, log_path=None):
    """All parameter groups trainable from step 0 with every corrector
    active; the stage budgets are pooled into one run."""
    total = int(sum(cfg.steps_per_stage))
    n_corr = len(params0.correctors)
    stages = [_Stage(total, n_corr, _all_groups(params0))]
    params, log = _run_stages(cfg, dataset, params0, stages, log_path)
    return params, log


# ---------------------------------------------------------------------------
# few-shot fine-tuning loop


@dataclass
class FewShotConfig:
    virtual_steps: int = 20000
    collect_every: int = 5000       # virtual steps between real-data collections
    collect_steps: int = 1000       # real env steps per collection (0 disables)
    update_every: int = 100         # virtual steps between model updates
    updates_per_cycle: int = 2      # optimizer steps per update
    episode_length: int = 100
    batch_size: int = 32
    segment_length: int = 8
    lr: float = 3e-4
    grad_clip: float = 10.0
    rtol: float = 1e-6
    atol: float = 1e-6
    replan_every: int = 4
    seed: int = 0


@dataclass
class FewShotLog:
    virtual_steps: int = 0
    oracle_steps: int = 0
    collections: list = field(default_factory=list)   # virtual step of each collection
    update_losses: list = field(default_factory=list)


def few_shot_loop(fcfg, env, planner_cfg, reward_fn, params0, replay_dataset):
    """Alternate planner-driven virtual interaction with periodic real-data
    collection at the configured virtual:real ratio.

    Virtual episodes run entirely inside the learned model, resetting from
    states sampled out of the replay buffer. Every ``update_every`` virtual
    steps the model takes ``updates_per_cycle`` optimizer steps on fragments
    from the (real) replay buffer; every ``collect_every`` virtual steps the
    planner acts in the oracle environment for ``collect_steps`` steps and
    the resulting trajectories join the buffer. With ``collect_steps = 0``
    the loop degenerates to zero-shot: the oracle is never stepped.
    """
    from dataclasses import replace as dc_replace

    from .control import cem_plan
    from .datasets import TrajectorySegment
    from .envs import step_oracle

    rng = np.random.default_rng(fcfg.seed)
    params = params0
    replay = dc_replace(replay_dataset, segments=list(replay_dataset.segments))
    icfg = IntegratorConfig(rtol=fcfg.rtol, atol=fcfg.atol,
                            h_init=env.dt / 10)
    log = FewShotLog()

    all_groups = _all_groups(params)
    opt_params = parameters_to_dict(params)
    opt = adam_init(opt_params, lr=fcfg.lr)

    def model(s, a):
        return full_derivative(s, a, params)

    def reset_state():
        seg = replay.segments[rng.integers(len(replay.segments))]
        return seg.states[rng.integers(seg.states.shape[0])].copy()

    def model_update():
        nonlocal params, opt, opt_params
        for _ in range(fcfg.updates_per_cycle):
            states, actions = sample_fragments(
                replay, fcfg.segment_length, fcfg.batch_size, rng, warmin=0)
            loss, grads = segment_loss(params, states, actions, env.dt,
                                       cfg=icfg)
            gdict = _clip_gradients(dict(grads.named_parameters()),
                                    fcfg.grad_clip)
            opt, opt_params = adam_step(opt, opt_params, gdict)
            params = replace_parameters(params, opt_params)
            log.update_losses.append(loss)

    def collect_real():
        s = env.sample_initial(rng, 1)[0]
        states = [s.copy()]
        actions = []
        warm = None
        for step in range(fcfg.collect_steps):
            if step % fcfg.replan_every == 0:
                plan, _, _ = cem_plan(model, s, reward_fn, planner_cfg,
                                      env.action_low, env.action_high,
                                      env.dt, icfg, init_mean=warm, rng=rng)
                warm = np.vstack([plan[fcfg.replan_every:],
                                  np.repeat(plan[-1:], fcfg.replan_every,
                                            axis=0)])[: len(plan)]
            a = plan[min(step % fcfg.replan_every, len(plan) - 1)]
            s = step_oracle(env, s, a)
            states.append(s.copy())
            actions.append(a)
            log.oracle_steps += 1
            if len(actions) == fcfg.episode_length or step == fcfg.collect_steps - 1:
                replay.segments.append(TrajectorySegment(
                    np.array(states), np.array(actions), source="policy"))
                states = [s.copy()]
                actions = []

    virtual_s = reset_state()
    virtual_age = 0
    warm_virtual = None
    while log.virtual_steps < fcfg.virtual_steps:
        if virtual_age == fcfg.episode_length:
            virtual_s = reset_state()
            virtual_age = 0
            warm_virtual = None
        if log.virtual_steps % fcfg.replan_every == 0 or warm_virtual is None:
            plan, _, _ = cem_plan(model, virtual_s, reward_fn, planner_cfg,
                                  env.action_low, env.action_high, env.dt,
                                  icfg, init_mean=warm_virtual, rng=rng)
            warm_virtual = np.vstack([plan[fcfg.replan_every:],
                                      np.repeat(plan[-1:], fcfg.replan_every,
                                                axis=0)])[: len(plan)]
            phase = 0
        a = plan[min(phase, len(plan) - 1)]
        phase += 1
        try:
            traj, _ = integrate_controlled(model, virtual_s, a[None],
                                           env.dt, icfg)
            virtual_s = traj[-1]
        except Exception:
            virtual_s = reset_state()
            virtual_age = 0
            warm_virtual = None
            continue
        log.virtual_steps += 1
        virtual_age += 1

        if log.virtual_steps % fcfg.update_every == 0:
            model_update()
        if fcfg.collect_steps > 0 and \
                log.virtual_steps % fcfg.collect_every == 0:
            collect_real()
            log.collections.append(log.virtual_steps)

    return params, log
