"""Rollout-MSE benchmark and Lyapunov-exponent estimator."""
import json

import numpy as np
import pytest

from motionsim.benchmark import LceResult, estimate_lce, model_lce_step, \
    oracle_lce_step, rollout_mse
from motionsim.datagen import generate_random_dataset
from motionsim.datasets import TrajectoryDataset, TrajectorySegment
from motionsim.envs import make_env, make_pendulum
from motionsim.odeint import IntegratorConfig


@pytest.fixture(scope="module")
def pendulum_data():
    env = make_pendulum()
    ds = generate_random_dataset(env, 40, 10.0, seed=0)
    return env, ds


class TestRolloutMse:
    def test_oracle_self_prediction_is_solver_floor(self, pendulum_data):
        env, ds = pendulum_data
        cfg = IntegratorConfig(rtol=1e-8, atol=1e-8, h_init=env.dt / 10)
        report = rollout_mse(env.env_derivative, ds, 100, n_eval=16, cfg=cfg,
                             seed=1)
        assert report.mse[0] < 1e-8
        assert report.n_failed[0] == 0

    def test_frozen_model_matches_closed_form(self, pendulum_data):
        env, ds = pendulum_data
        # a model that predicts ds/dt = 0 keeps the initial state forever;
        # its MSE has the closed form mean((truth - s0)^2), computed here
        # independently of the benchmark path
        frozen = lambda s, a: np.zeros_like(s)
        H, n_eval, seed = 16, 24, 7
        report = rollout_mse(frozen, ds, H, n_eval=n_eval, seed=seed)

        from motionsim.datasets import sample_fragments
        rng = np.random.default_rng(seed)
        states, actions = sample_fragments(ds, H, n_eval, rng)
        expected = np.mean((states[:, 1:] - states[:, :1]) ** 2)
        assert report.mse[0] == pytest.approx(expected, rel=1e-12)

    def test_all_spec_horizons_in_one_report(self, pendulum_data):
        env, ds = pendulum_data
        report = rollout_mse(env.env_derivative, ds, [3, 16, 100], n_eval=8,
                             seed=2)
        assert report.horizons == [3, 16, 100]
        assert len(report.mse) == 3

    def test_prefix_consistency_with_per_step_means(self, pendulum_data):
        env, ds = pendulum_data
        frozen = lambda s, a: np.zeros_like(s)
        report = rollout_mse(frozen, ds, [3, 16], n_eval=12, seed=3)
        for h, mse, per_step in zip(report.horizons, report.mse,
                                    report.per_step_mse):
            assert len(per_step) == h
            assert mse == pytest.approx(float(np.mean(per_step)), rel=1e-12)

    def test_json_document_validates_against_schema(self, pendulum_data):
        import jsonschema
        from importlib import resources

        env, ds = pendulum_data
        report = rollout_mse(env.env_derivative, ds, [3, 16], n_eval=4, seed=4)
        report.config_hash = "0123456789abcdef"
        with resources.files("motionsim.schemas") \
                .joinpath("benchmark_report.schema.json").open() as fh:
            schema = json.load(fh)
        jsonschema.validate(report.to_json_dict(), schema)

    def test_failed_segments_flagged_and_excluded(self):
        # a model that blows up on half the fragments
        rng = np.random.default_rng(0)
        segs = []
        for i in range(6):
            states = np.full((160, 2), 1.0 if i % 2 else -1.0) \
                + rng.normal(size=(160, 2)) * 0.01
            segs.append(TrajectorySegment(states, np.zeros((159, 1))))
        ds = TrajectoryDataset("pendulum", 1, 1, 1, 0.05, segs)

        def spiky(s, a):
            out = np.zeros_like(s)
            # finite-time blowup only for states started positive
            out[..., :] = np.where(s[..., :1] > 0, (s + 1.0) ** 2 * 50.0, 0.0)
            return out

        report = rollout_mse(spiky, ds, 8, n_eval=12, seed=0, warmin=100)
        assert report.n_failed[0] > 0
        assert report.n_segments[0] + report.n_failed[0] == 12
        assert np.isfinite(report.mse[0])


class TestLce:
    def test_linear_decay_exponent(self):
        # ds/dt = -s contracts at exactly rate 1
        dt = 0.05

        def step(states):
            return states * np.exp(-dt)

        sampler = lambda rng, n: rng.normal(size=(n, 3))
        res = estimate_lce(step, sampler, delta=1e-5, t_steps=200, n_traj=64,
                           dt=dt, seed=0)
        assert res.lce == pytest.approx(-1.0, abs=0.01)
        assert res.n_dropped == 0

    def test_oracle_step_matches_linear_system(self):
        env = make_pendulum(damping=0.0, gravity=0.0)
        # with no gravity/damping the pendulum is a double integrator:
        # separations grow linearly, so the exponent tends to ~0 from above
        step = oracle_lce_step(env)
        res = estimate_lce(step, env.sample_initial, delta=1e-5, t_steps=100,
                           n_traj=32, dt=env.dt, seed=1)
        assert abs(res.lce) < 0.5

    def test_doubling_trajectories_stays_within_se(self):
        dt = 0.05
        rot = 0.97 * np.array([[np.cos(0.3), -np.sin(0.3)],
                               [np.sin(0.3), np.cos(0.3)]])

        def step(states):
            noise_free = states @ rot.T
            return noise_free + 0.05 * np.tanh(noise_free) ** 2

        sampler = lambda rng, n: rng.normal(size=(n, 2))
        r1 = estimate_lce(step, sampler, t_steps=150, n_traj=200, dt=dt, seed=3)
        r2 = estimate_lce(step, sampler, t_steps=150, n_traj=400, dt=dt, seed=3)
        assert abs(r1.lce - r2.lce) <= 3 * max(r1.std_error, 1e-6)

    def test_acrobot_oracle_is_chaotic(self):
        env = make_env("acrobot")
        step = oracle_lce_step(env, substeps=10)
        res = estimate_lce(step, env.sample_initial, delta=1e-5, t_steps=150,
                           n_traj=48, dt=env.dt, seed=2)
        assert res.lce > 0.3  # chaotic: nearby trajectories diverge

    def test_nonfinite_trajectories_dropped(self):
        def step(states):
            out = states * 1.01
            mask = states[:, 0] > 5.0
            out[mask] = np.nan
            return out

        sampler = lambda rng, n: np.linspace(1, 10, n)[:, None] * np.ones((n, 2))
        res = estimate_lce(step, sampler, t_steps=50, n_traj=16, dt=0.05,
                           seed=0)
        assert res.n_dropped > 0
        assert np.isfinite(res.lce)
