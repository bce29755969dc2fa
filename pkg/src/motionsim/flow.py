"""Invertible state-density model used for the familiarity reward penalty.

The flow is a stack of affine coupling layers over standardized states with
a standard-Gaussian base. Evaluating a density runs the inverse map
(data -> latent) and accumulates the exact log-determinant; the
standardization transform is absorbed into that log-det, so
``flow_log_density`` is a proper density in raw state units.

Scale outputs are bounded with a tanh so every layer stays comfortably
invertible during training.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DensityFault, DimensionError, TrainingFault
from .nn import MlpParams, adam_init, adam_step, init_mlp, mlp_forward, \
    mlp_vjp, tree_map

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class CouplingLayer:
    scale_net: MlpParams
    shift_net: MlpParams
    mask: np.ndarray  # 1.0 entries pass through and condition the others


@dataclass
class FlowParams:
    layers: list
    mu: np.ndarray      # standardization, not trained
    sigma: np.ndarray
    scale_cap: float = 3.0

    @property
    def dim(self):
        return self.mu.shape[0]


def _alternating_masks(dim, n_layers):
    base = np.zeros(dim)
    base[: (dim + 1) // 2] = 1.0
    masks = []
    for i in range(n_layers):
        masks.append(base.copy() if i % 2 == 0 else 1.0 - base)
    return masks


def init_flow(rng, dim, n_layers=6, hidden=32, n_hidden=1, scale_cap=3.0,
              mu=None, sigma=None):
    """Fresh coupling flow; zero-initialized net outputs make it start as
    the identity map (plus standardization)."""
    if dim < 2:
        raise DimensionError("coupling flow needs state dimension >= 2")
    layers = []
    for mask in _alternating_masks(dim, n_layers):
        layers.append(CouplingLayer(
            scale_net=init_mlp(rng, dim, hidden, n_hidden, dim, "tanh",
                               zero_output=True),
            shift_net=init_mlp(rng, dim, hidden, n_hidden, dim, "tanh",
                               zero_output=True),
            mask=mask,
        ))
    mu = np.zeros(dim) if mu is None else np.asarray(mu, dtype=np.float64)
    sigma = np.ones(dim) if sigma is None else np.asarray(sigma, dtype=np.float64)
    return FlowParams(layers=layers, mu=mu, sigma=sigma, scale_cap=scale_cap)


def _bounded_scale(raw, cap):
    return cap * np.tanh(raw / cap)


def _inverse_pass(flow, s):
    """Data -> latent with per-layer caches for the backward sweep.

    Returns (x, logdet, caches); logdet is per-sample and includes the
    standardization term.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != flow.dim:
        raise DimensionError(f"state width {s.shape[-1]} != flow dim {flow.dim}")
    single = s.ndim == 1
    u = (s[None] if single else s).copy()
    u = (u - flow.mu) / flow.sigma
    logdet = np.full(u.shape[0], -float(np.sum(np.log(flow.sigma))))
    caches = []
    for layer in flow.layers:
        m = layer.mask
        c = u * m
        raw = mlp_forward(layer.scale_net, c)
        w = _bounded_scale(raw, flow.scale_cap)
        t = mlp_forward(layer.shift_net, c)
        exp_neg = np.exp(-w)
        u_new = m * u + (1.0 - m) * ((u - t) * exp_neg)
        logdet = logdet - np.sum((1.0 - m) * w, axis=-1)
        caches.append((c, raw, w, t, exp_neg, u, u_new))
        u = u_new
    return u, logdet, caches, single


def flow_log_density(flow, s):
    """log P(s) via the inverse pass: base log-density plus log|det J|."""
    x, logdet, _, single = _inverse_pass(flow, s)
    logp = -0.5 * flow.dim * LOG_2PI - 0.5 * np.sum(x * x, axis=-1) + logdet
    if not np.all(np.isfinite(logp)):
        raise DensityFault("non-finite log-density")
    return float(logp[0]) if single else logp


def flow_forward(flow, x):
    """Latent -> data (the sampling direction); exact inverse of the
    density pass."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    u = x[None] if single else x
    for layer in reversed(flow.layers):
        m = layer.mask
        c = u * m  # passthrough part is unchanged by the layer
        raw = mlp_forward(layer.scale_net, c)
        w = _bounded_scale(raw, flow.scale_cap)
        t = mlp_forward(layer.shift_net, c)
        u = m * u + (1.0 - m) * (u * np.exp(w) + t)
    s = u * flow.sigma + flow.mu
    return s[0] if single else s


def _mean_logp_and_grads(flow, s):
    """Mean log-density over a batch plus gradients for every coupling net."""
    x, logdet, caches, _ = _inverse_pass(flow, s)
    B = x.shape[0]
    logp = -0.5 * flow.dim * LOG_2PI - 0.5 * np.sum(x * x, axis=-1) + logdet
    mean_logp = float(np.mean(logp))

    ubar = -x / B  # d(mean logp)/dx
    grads = []
    for layer, cache in zip(reversed(flow.layers), reversed(caches)):
        c, raw, w, t, exp_neg, u_prev, u_new = cache
        m = layer.mask
        keep = 1.0 - m
        y = keep * u_new  # transformed entries
        # logdet contributes -sum(keep * w)/B directly
        wbar = keep * (-ubar * y - 1.0 / B)
        tbar = keep * (-ubar * exp_neg)
        rawbar = wbar * (1.0 - (w / flow.scale_cap) ** 2)
        gscale, c_bar1 = mlp_vjp(layer.scale_net, c, rawbar)
        gshift, c_bar2 = mlp_vjp(layer.shift_net, c, tbar)
        u_prev_bar = m * ubar + keep * (ubar * exp_neg) \
            + (c_bar1 + c_bar2) * m
        grads.append(CouplingLayer(gscale, gshift, layer.mask))
        ubar = u_prev_bar
    grads.reverse()
    return mean_logp, grads


@dataclass
class FlowFitLog:
    train_logp: list = field(default_factory=list)
    holdout_logp: list = field(default_factory=list)


def fit_flow(states, n_layers=6, hidden=32, n_hidden=1, iters=800,
             batch_size=256, lr=1e-3, seed=0, holdout_fraction=0.1,
             scale_cap=3.0):
    """Maximum-likelihood fit of a coupling flow on raw states.

    States are standardized internally (the transform is absorbed into the
    flow's log-det). Returns ``(FlowParams, FlowFitLog)``.
    """
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2:
        raise DimensionError("states must be (n, d)")
    if states.shape[0] < 1000:
        raise ValueError("fit_flow needs at least 1000 states")
    rng = np.random.default_rng(seed)
    n = states.shape[0]
    perm = rng.permutation(n)
    n_hold = max(1, int(n * holdout_fraction))
    hold = states[perm[:n_hold]]
    train = states[perm[n_hold:]]

    mu = train.mean(axis=0)
    sigma = np.maximum(train.std(axis=0), 1e-8)
    flow = init_flow(rng, states.shape[1], n_layers, hidden, n_hidden,
                     scale_cap, mu=mu, sigma=sigma)

    # masks are structural, so only the coupling nets enter the optimizer
    nets = [(l.scale_net, l.shift_net) for l in flow.layers]
    opt = adam_init(nets, lr=lr)
    log = FlowFitLog()
    for it in range(iters):
        idx = rng.integers(0, train.shape[0], size=min(batch_size, train.shape[0]))
        mean_logp, grads = _mean_logp_and_grads(flow, train[idx])
        if not np.isfinite(mean_logp):
            raise TrainingFault(f"flow fit diverged at iteration {it}")
        gnets = tree_map(lambda g: -g,
                         [(g.scale_net, g.shift_net) for g in grads])
        opt, nets = adam_step(opt, nets, gnets)
        flow = FlowParams(
            [CouplingLayer(sn, tn, l.mask)
             for (sn, tn), l in zip(nets, flow.layers)],
            flow.mu, flow.sigma, flow.scale_cap)
        log.train_logp.append(mean_logp)
        if (it + 1) % 100 == 0 or it == iters - 1:
            log.holdout_logp.append(float(np.mean(flow_log_density(flow, hold))))
    return flow, log


# ---------------------------------------------------------------------------
# reward penalty


@dataclass
class PenaltyConfig:
    """Sigmoid familiarity penalty: inflection in log-density units and a
    positive sharpness scale."""

    tau: float
    alpha: float

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


def _sigmoid(x):
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def density_penalty(log_p, pcfg):
    """sigmoid((log P - tau) / alpha) - 1, always in (-1, 0)."""
    return _sigmoid((np.asarray(log_p, dtype=np.float64) - pcfg.tau)
                    / pcfg.alpha) - 1.0


def penalized_reward(r_orig, s, flow, pcfg):
    """Original reward shifted by the familiarity penalty of the state."""
    return np.asarray(r_orig, dtype=np.float64) \
        + density_penalty(flow_log_density(flow, s), pcfg)


def default_penalty_config(flow, states):
    """Heuristic inflection/scale: 10th percentile and standard deviation
    of the training-set log-density."""
    logp = flow_log_density(flow, states)
    alpha = float(np.std(logp))
    return PenaltyConfig(tau=float(np.percentile(logp, 10.0)),
                         alpha=max(alpha, 1e-6))


# ---------------------------------------------------------------------------
# serialization (MSNN tensor records)


def save_flow(path, flow, extra_meta=None):
    from .checkpoint import write_tensors
    tensors = {}
    for i, layer in enumerate(flow.layers):
        for name, arr in layer.scale_net.named_arrays(f"flow{i}.scale."):
            tensors[name] = arr
        for name, arr in layer.shift_net.named_arrays(f"flow{i}.shift."):
            tensors[name] = arr
        tensors[f"flow{i}.mask"] = layer.mask
    tensors["meta.mu"] = flow.mu
    tensors["meta.sigma"] = flow.sigma
    tensors["meta.scale_cap"] = np.array([flow.scale_cap])
    tensors["meta.n_layers"] = np.array([float(len(flow.layers))])
    if extra_meta:
        for key, value in extra_meta.items():
            tensors[f"meta.{key}"] = np.asarray(value, dtype=np.float64)
    write_tensors(path, tensors)


def load_flow(path):
    from .checkpoint import read_tensors, _collect_mlp
    tensors = read_tensors(path)
    n_layers = int(tensors["meta.n_layers"][0])
    layers = []
    for i in range(n_layers):
        layers.append(CouplingLayer(
            scale_net=_collect_mlp(tensors, f"flow{i}.scale.", "tanh"),
            shift_net=_collect_mlp(tensors, f"flow{i}.shift.", "tanh"),
            mask=tensors[f"flow{i}.mask"],
        ))
    return FlowParams(layers=layers, mu=tensors["meta.mu"],
                      sigma=tensors["meta.sigma"],
                      scale_cap=float(tensors["meta.scale_cap"][0]))
