"""Segment loss, gradient paths, staging, freezing, reproducibility."""
import dataclasses
import hashlib

import numpy as np
import pytest

from motionsim.datagen import generate_random_dataset
from motionsim.datasets import TrajectoryDataset, TrajectorySegment
from motionsim.dynamics import (
    full_derivative,
    init_dynamics_params,
    parameters_to_dict,
    replace_parameters,
)
from motionsim.envs import make_pendulum
from motionsim.nn import tree_leaves
from motionsim.odeint import IntegratorConfig, rk4_integrate
from motionsim.training import (
    FewShotConfig,
    TrainConfig,
    few_shot_loop,
    segment_loss,
    train_end_to_end,
    train_multistage,
)


def tiny_params(seed, n_correctors=1, randomize=True):
    rng = np.random.default_rng(seed)
    p = init_dynamics_params(rng, 1, 1, 1, hidden=6, blocks=1, act_hidden=4,
                             act_blocks=0, n_correctors=n_correctors,
                             corr_hidden=6, corr_blocks=1)
    if randomize:
        pd = parameters_to_dict(p)
        for k in pd:
            if k.startswith("corr") and "w_out" in k:
                pd[k] = rng.normal(size=pd[k].shape) * 0.2
        p = replace_parameters(p, pd)
    return p


def rollout_with(params, s0, actions, dt, substeps=20):
    f = lambda s, a: full_derivative(s, a, params)
    states = [np.asarray(s0, dtype=np.float64)]
    for k in range(actions.shape[0]):
        a = actions[k]
        traj = rk4_integrate(f, states[-1], lambda t: a, dt / substeps, substeps)
        states.append(traj[-1])
    return np.stack(states)


def self_consistent_segment(params, seed, n=4):
    """A segment generated by the model itself (its own dynamics as oracle)."""
    rng = np.random.default_rng(seed)
    s0 = rng.normal(size=2) * 0.3
    actions = rng.normal(size=(n, 1)) * 0.5
    states = rollout_with(params, s0, actions, 0.05)
    return states, actions


class TestSegmentLoss:
    def test_self_generated_data_gives_solver_floor_loss(self):
        p = tiny_params(0)
        p = dataclasses.replace(p, active_correctors=1)
        states, actions = self_consistent_segment(p, 1)
        cfg = IntegratorConfig(rtol=1e-9, atol=1e-9, h_init=0.005)
        loss, _ = segment_loss(p, states, actions, 0.05, cfg=cfg,
                               need_grads=False)
        assert loss < 1e-8

    def test_fully_frozen_grads_are_zero(self):
        p = tiny_params(2)
        p = dataclasses.replace(p, active_correctors=1)
        states, actions = self_consistent_segment(p, 3, n=1)
        states = states + 0.1  # force a nonzero loss
        frozen = ("pos_enc.", "state_enc.", "act_enc.", "corr0.")
        loss, grads = segment_loss(p, states, actions, 0.05, frozen=frozen)
        assert loss > 0
        assert all(np.allclose(leaf, 0.0) for leaf in tree_leaves(grads))

    @pytest.mark.parametrize("path", ["backprop_steps", "adjoint"])
    def test_fd_agreement_on_total_loss(self, path):
        p = tiny_params(4)
        p = dataclasses.replace(p, active_correctors=1)
        rng = np.random.default_rng(5)
        states = rng.normal(size=(2, 4, 2)) * 0.5
        actions = rng.normal(size=(2, 3, 1)) * 0.5
        cfg = IntegratorConfig(rtol=1e-9, atol=1e-9, h_init=0.005)
        loss, grads = segment_loss(p, states, actions, 0.05, grad_path=path,
                                   cfg=cfg)
        gd = parameters_to_dict(grads)
        full = parameters_to_dict(p)
        eps = 1e-6
        for name in ["pos_enc.w_in", "state_enc.w_out", "act_enc.w0",
                     "corr0.w_out"]:
            base = full[name]
            idx = tuple(rng.integers(0, d) for d in base.shape)
            bp, bm = base.copy(), base.copy()
            bp[idx] += eps
            bm[idx] -= eps
            lp, _ = segment_loss(replace_parameters(p, {name: bp}), states,
                                 actions, 0.05, cfg=cfg, need_grads=False)
            lm, _ = segment_loss(replace_parameters(p, {name: bm}), states,
                                 actions, 0.05, cfg=cfg, need_grads=False)
            fd = (lp - lm) / (2 * eps)
            assert gd[name][idx] == pytest.approx(fd, rel=1e-3, abs=1e-9), name

    def test_gradient_paths_agree(self):
        p = tiny_params(6)
        p = dataclasses.replace(p, active_correctors=1)
        rng = np.random.default_rng(7)
        states = rng.normal(size=(3, 5, 2)) * 0.4
        actions = rng.normal(size=(3, 4, 1)) * 0.5
        cfg = IntegratorConfig(rtol=1e-9, atol=1e-9, h_init=0.005)
        l1, g1 = segment_loss(p, states, actions, 0.05, "backprop_steps", cfg)
        l2, g2 = segment_loss(p, states, actions, 0.05, "adjoint", cfg)
        assert l1 == pytest.approx(l2, rel=1e-12)
        d1, d2 = parameters_to_dict(g1), parameters_to_dict(g2)
        for k in d1:
            scale = np.abs(d1[k]).max() + 1e-10
            assert np.abs(d1[k] - d2[k]).max() / scale < 1e-3, k


@pytest.fixture(scope="module")
def small_dataset():
    env = make_pendulum()
    return env, generate_random_dataset(env, 30, 8.0, seed=11)


def quick_cfg(**kw):
    base = dict(segment_length=2, batch_size=16, steps_per_stage=[30],
                lr=1e-3, seed=0, rtol=1e-4, atol=1e-4, curriculum=False,
                warmin=20, validation_every=0, validation_segments=8,
                validation_horizons=[4], validation_fraction=0.1,
                keep_best=False)
    base.update(kw)
    return TrainConfig(**base)


def group_hash(params, prefix):
    h = hashlib.sha256()
    for name, arr in params.named_parameters():
        if name.startswith(prefix):
            h.update(arr.tobytes())
    return h.hexdigest()


class TestMultistage:
    def test_single_stage_is_plain_predictor_training(self, small_dataset):
        env, ds = small_dataset
        p0 = tiny_params(8, randomize=False)
        cfg = quick_cfg(steps_per_stage=[10])
        p, log = train_multistage(cfg, ds, p0)
        assert len(log.losses) == 10
        assert p.active_correctors == 0
        # correctors were never trained
        assert group_hash(p, "corr0.") == group_hash(p0, "corr0.")

    def test_stage2_freezes_predictor_bit_exactly(self, small_dataset):
        env, ds = small_dataset
        p0 = tiny_params(9, randomize=False)
        cfg = quick_cfg(steps_per_stage=[8, 8])
        p, log = train_multistage(cfg, ds, p0)
        assert p.active_correctors == 1
        # stage 2 trained only the corrector; predictor froze at its
        # stage-1 values, which differ from the init
        p_stage1, _ = train_multistage(quick_cfg(steps_per_stage=[8]), ds, p0)
        for prefix in ("pos_enc.", "state_enc.", "act_enc."):
            assert group_hash(p, prefix) == group_hash(p_stage1, prefix)
            assert group_hash(p, prefix) != group_hash(p0, prefix)
        assert group_hash(p, "corr0.") != group_hash(p0, "corr0.")

    def test_stage2_starts_at_stage1_loss(self, small_dataset):
        # fresh corrector output projections are zero, so the first stage-2
        # loss equals the stage-1 loss on the same batch bit-for-bit
        env, ds = small_dataset
        p1, _ = train_multistage(quick_cfg(steps_per_stage=[5]), ds,
                                 tiny_params(10, randomize=False))
        rng = np.random.default_rng(0)
        from motionsim.datasets import sample_fragments
        states, actions = sample_fragments(ds, 3, 8, rng, warmin=20)
        l_pred, _ = segment_loss(p1, states, actions, env.dt, need_grads=False)
        p2 = dataclasses.replace(p1, active_correctors=1)
        l_corr, _ = segment_loss(p2, states, actions, env.dt, need_grads=False)
        assert l_pred == l_corr

    def test_too_many_stages_rejected(self, small_dataset):
        env, ds = small_dataset
        with pytest.raises(ValueError):
            train_multistage(quick_cfg(steps_per_stage=[2, 2, 2]), ds,
                             tiny_params(11))  # only one corrector


class TestEndToEnd:
    def test_zero_budget_returns_init(self, small_dataset):
        env, ds = small_dataset
        p0 = tiny_params(12)
        p, log = train_end_to_end(quick_cfg(steps_per_stage=[0]), ds, p0)
        assert log.losses == []
        for (n1, a1), (n2, a2) in zip(p.named_parameters(),
                                      p0.named_parameters()):
            assert np.array_equal(a1, a2)

    def test_all_correctors_active(self, small_dataset):
        env, ds = small_dataset
        p, _ = train_end_to_end(quick_cfg(steps_per_stage=[3]), ds,
                                tiny_params(13))
        assert p.active_correctors == 1

    def test_loss_decreases_on_pendulum(self, small_dataset):
        env, ds = small_dataset
        cfg = quick_cfg(steps_per_stage=[120], batch_size=32, lr=3e-3,
                        lr_decay=1.0)
        p, log = train_end_to_end(cfg, ds, tiny_params(14, randomize=False))
        first = np.mean(log.losses[:10])
        last = np.mean(log.losses[-10:])
        assert last < 0.5 * first

    def test_deterministic_given_seed(self, small_dataset):
        env, ds = small_dataset
        cfg = quick_cfg(steps_per_stage=[6])
        p1, log1 = train_end_to_end(cfg, ds, tiny_params(15))
        p2, log2 = train_end_to_end(cfg, ds, tiny_params(15))
        assert log1.losses == log2.losses
        for (_, a1), (_, a2) in zip(p1.named_parameters(),
                                    p2.named_parameters()):
            assert np.array_equal(a1, a2)


class TestFewShot:
    def _setup(self, collect_steps):
        from motionsim.control import PlannerConfig

        env = make_pendulum()
        ds = generate_random_dataset(env, 6, 6.0, seed=21)
        p0 = tiny_params(22, randomize=False)
        fcfg = FewShotConfig(virtual_steps=150, collect_every=50,
                             collect_steps=collect_steps, update_every=25,
                             updates_per_cycle=1, episode_length=30,
                             batch_size=8, segment_length=2, replan_every=10,
                             rtol=1e-4, atol=1e-4, seed=0)
        pcfg = PlannerConfig(horizon=5, population=8, iterations=1, seed=0)
        return env, ds, p0, fcfg, pcfg

    def test_ratio_bookkeeping(self):
        env, ds, p0, fcfg, pcfg = self._setup(collect_steps=10)
        params, log = few_shot_loop(fcfg, env, pcfg, env.reward, p0, ds)
        assert log.virtual_steps == 150
        assert log.oracle_steps == 3 * 10  # one collection per 50 virtual
        assert log.collections == [50, 100, 150]
        assert len(log.update_losses) == 150 // 25

    def test_collection_disabled_never_touches_oracle(self):
        env, ds, p0, fcfg, pcfg = self._setup(collect_steps=0)
        before = env.deriv_calls
        params, log = few_shot_loop(fcfg, env, pcfg, env.reward, p0, ds)
        assert log.oracle_steps == 0
        assert env.deriv_calls == before
