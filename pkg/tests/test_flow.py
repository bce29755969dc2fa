"""Coupling-flow density model and the familiarity reward penalty."""
import numpy as np
import pytest

from motionsim.flow import (
    CouplingLayer,
    FlowParams,
    PenaltyConfig,
    default_penalty_config,
    density_penalty,
    fit_flow,
    flow_forward,
    flow_log_density,
    init_flow,
    load_flow,
    penalized_reward,
    save_flow,
)

LOG_2PI = np.log(2 * np.pi)


class TestLogDensity:
    def test_identity_flow_standard_normal_at_origin(self):
        rng = np.random.default_rng(0)
        flow = init_flow(rng, 3, n_layers=4)
        assert flow_log_density(flow, np.zeros(3)) == \
            pytest.approx(-1.5 * LOG_2PI, abs=1e-12)

    def test_pure_scaling_change_of_variables(self):
        # s = 2x via the standardization transform: log P(s) = logN(s/2) - d ln 2
        rng = np.random.default_rng(1)
        d = 2
        flow = init_flow(rng, d, n_layers=2, mu=np.zeros(d),
                         sigma=np.full(d, 2.0))
        s = np.array([0.8, -1.4])
        expected = -0.5 * d * LOG_2PI - 0.5 * np.sum((s / 2) ** 2) - d * np.log(2)
        assert flow_log_density(flow, s) == pytest.approx(expected, abs=1e-12)

    def test_coupling_layer_with_constant_scale(self):
        # push a constant through the scale net bias; the transformed half
        # is scaled by e^{w}, so log-density picks up -sum(keep * w)
        rng = np.random.default_rng(2)
        flow = init_flow(rng, 2, n_layers=1)
        layer = flow.layers[0]
        c = 0.4
        layer.scale_net.biases[-1][:] = c
        w = flow.scale_cap * np.tanh(c / flow.scale_cap)
        s = np.array([0.5, -0.7])
        m = layer.mask
        x = m * s + (1 - m) * (s * np.exp(-w))
        expected = -LOG_2PI - 0.5 * np.sum(x ** 2) - np.sum((1 - m) * w)
        assert flow_log_density(flow, s) == pytest.approx(expected, abs=1e-12)

    def test_batched_evaluation(self):
        rng = np.random.default_rng(3)
        flow = init_flow(rng, 4, n_layers=4)
        ss = rng.normal(size=(10, 4))
        batch = flow_log_density(flow, ss)
        for i in range(10):
            assert batch[i] == pytest.approx(flow_log_density(flow, ss[i]),
                                             abs=1e-12)


class TestInvertibility:
    def rand_flow(self, seed, d=4):
        rng = np.random.default_rng(seed)
        flow = init_flow(rng, d, n_layers=6)
        # give the nets nonzero output layers so the flow is not identity
        for layer in flow.layers:
            for net in (layer.scale_net, layer.shift_net):
                net.weights[-1][:] = rng.normal(size=net.weights[-1].shape) * 0.3
        return flow, rng

    def test_forward_inverse_round_trip(self):
        flow, rng = self.rand_flow(4)
        ss = rng.normal(size=(1000, 4)) * 2.0
        from motionsim.flow import _inverse_pass
        x, _, _, _ = _inverse_pass(flow, ss)
        back = flow_forward(flow, x)
        assert np.abs(back - ss).max() < 1e-8

    def test_forward_and_inverse_logdets_cancel(self):
        # the 2-D Jacobian determinant of the forward map, estimated by
        # finite differences, must invert the inverse pass log-det
        flow, rng = self.rand_flow(5, d=2)
        from motionsim.flow import _inverse_pass
        s = rng.normal(size=2)
        x, logdet_inv, _, _ = _inverse_pass(flow, s[None])
        eps = 1e-6
        J = np.zeros((2, 2))
        for j in range(2):
            xp, xm = x[0].copy(), x[0].copy()
            xp[j] += eps
            xm[j] -= eps
            J[:, j] = (flow_forward(flow, xp) - flow_forward(flow, xm)) / (2 * eps)
        logdet_fwd = np.log(abs(np.linalg.det(J)))
        assert logdet_fwd + logdet_inv[0] == pytest.approx(0.0, abs=1e-6)

    def test_checkpoint_round_trip(self, tmp_path):
        flow, rng = self.rand_flow(6)
        path = tmp_path / "flow.msnn"
        save_flow(path, flow)
        back = load_flow(path)
        ss = rng.normal(size=(20, 4))
        assert np.array_equal(flow_log_density(flow, ss),
                              flow_log_density(back, ss))


class TestFitFlow:
    def test_standard_normal_holdout_entropy(self):
        rng = np.random.default_rng(7)
        d = 3
        states = rng.normal(size=(5000, d))
        flow, log = fit_flow(states, n_layers=4, iters=300, seed=0)
        hold = rng.normal(size=(2000, d))
        mean_logp = float(np.mean(flow_log_density(flow, hold)))
        expected = -0.5 * d * LOG_2PI - 0.5 * d  # differential entropy
        assert abs(mean_logp - expected) < 0.1

    def test_same_seed_identical_fit(self):
        rng = np.random.default_rng(8)
        states = rng.normal(size=(1500, 2))
        f1, _ = fit_flow(states, iters=50, seed=3)
        f2, _ = fit_flow(states, iters=50, seed=3)
        ss = rng.normal(size=(10, 2))
        assert np.array_equal(flow_log_density(f1, ss),
                              flow_log_density(f2, ss))

    def test_in_distribution_beats_shifted(self):
        rng = np.random.default_rng(9)
        states = rng.normal(size=(4000, 2))
        flow, _ = fit_flow(states, iters=200, seed=1)
        inside = rng.normal(size=(500, 2))
        outside = inside + 5.0  # shifted by 5 sigma
        assert np.mean(flow_log_density(flow, inside)) > \
            np.mean(flow_log_density(flow, outside)) + 1.0

    def test_requires_enough_states(self):
        with pytest.raises(ValueError):
            fit_flow(np.zeros((100, 2)))

    def test_normalization_integral_of_trained_2d_flow(self):
        # quadrature oracle: the fitted density must integrate to ~1
        rng = np.random.default_rng(10)
        mix = np.concatenate([
            rng.normal(loc=(-1.5, 0.0), scale=0.6, size=(2500, 2)),
            rng.normal(loc=(1.5, 0.8), scale=0.8, size=(2500, 2)),
        ])
        flow, _ = fit_flow(mix, n_layers=6, iters=400, seed=2)
        grid = np.linspace(-8, 8, 241)
        xx, yy = np.meshgrid(grid, grid, indexing="ij")
        pts = np.stack([xx.ravel(), yy.ravel()], axis=-1)
        dens = np.exp(flow_log_density(flow, pts)).reshape(xx.shape)
        integral = np.trapezoid(np.trapezoid(dens, grid, axis=1), grid)
        assert 0.97 <= integral <= 1.03


class TestPenalty:
    def test_inflection_gives_exactly_minus_half(self):
        pcfg = PenaltyConfig(tau=-3.0, alpha=2.0)
        assert density_penalty(-3.0, pcfg) == pytest.approx(-0.5, abs=1e-15)

    def test_high_density_limit_zero(self):
        pcfg = PenaltyConfig(tau=0.0, alpha=1.0)
        assert density_penalty(1e4, pcfg) == pytest.approx(0.0, abs=1e-12)

    def test_low_density_limit_minus_one(self):
        pcfg = PenaltyConfig(tau=0.0, alpha=1.0)
        assert density_penalty(-1e4, pcfg) == pytest.approx(-1.0, abs=1e-12)

    def test_bounds_and_monotonicity(self):
        pcfg = PenaltyConfig(tau=-1.0, alpha=0.7)
        xs = np.linspace(-20, 20, 401)  # strict in float64 on this range
        pen = density_penalty(xs, pcfg)
        assert np.all(pen > -1.0) and np.all(pen < 0.0)
        assert np.all(np.diff(pen) >= 0.0)
        # far outside, the sigmoid saturates to the closed bounds
        assert density_penalty(1e4, pcfg) <= 0.0
        assert density_penalty(-1e4, pcfg) >= -1.0

    def test_penalized_reward_composes(self):
        rng = np.random.default_rng(11)
        flow = init_flow(rng, 2, n_layers=2)
        pcfg = PenaltyConfig(tau=flow_log_density(flow, np.zeros(2)),
                             alpha=1.0)
        r = penalized_reward(1.0, np.zeros(2), flow, pcfg)
        assert r == pytest.approx(0.5, abs=1e-12)

    def test_alpha_must_be_positive(self):
        with pytest.raises(ValueError):
            PenaltyConfig(tau=0.0, alpha=0.0)

    def test_default_config_heuristics(self):
        rng = np.random.default_rng(12)
        flow = init_flow(rng, 2, n_layers=2)
        states = rng.normal(size=(500, 2))
        pcfg = default_penalty_config(flow, states)
        logp = flow_log_density(flow, states)
        assert pcfg.tau == pytest.approx(np.percentile(logp, 10.0))
        assert pcfg.alpha > 0
