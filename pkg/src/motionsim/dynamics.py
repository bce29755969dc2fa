"""Structured continuous-time dynamics model.

The state derivative is assembled from three encoder networks plus an
ordered stack of corrector networks:

    ds/dt = ( qdot,  M(q) [b(s) + tau(a)] + sum_i eps_i(s, a) )

where ``M = L L^T`` is built from a learned lower-triangular factor, so the
acceleration map carries a symmetric positive semidefinite matrix by
construction. The position-derivative block is copied from the velocity
half of the state; it is structural, never learned.

All operations accept a single state ``(d,)`` or a batch ``(B, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError
from .nn import (
    MlpParams,
    ResNetParams,
    init_mlp,
    init_resnet,
    mlp_forward,
    mlp_vjp,
    resnet_forward,
    resnet_vjp,
    tree_map,
    zeros_like_tree,
)

Array = np.ndarray


@dataclass
class StateVec:
    """Physical state split into position and velocity blocks."""

    q: Array
    qdot: Array

    def as_vector(self):
        return np.concatenate([self.q, self.qdot], axis=-1)

    @staticmethod
    def from_vector(vec, d_q):
        vec = np.asarray(vec, dtype=np.float64)
        return StateVec(q=vec[..., :d_q], qdot=vec[..., d_q:])


@dataclass
class DynamicsParams:
    """All learnable parameters of the dynamics model.

    ``active_correctors`` selects how many of the corrector networks
    contribute; the rest are carried but inert (multi-stage training turns
    them on one at a time).
    """

    d_q: int
    d_v: int
    d_a: int
    pos_enc: ResNetParams    # q -> lower-triangular factor of M, d_v(d_v+1)/2 outputs
    state_enc: ResNetParams  # (q, qdot) -> d_v
    act_enc: MlpParams       # a -> d_v
    correctors: list         # each ResNetParams, (q, qdot, a) -> d_v
    active_correctors: int = 0

    @property
    def d_s(self):
        return self.d_q + self.d_v

    def named_parameters(self):
        """Canonical (name, array) pairs: pos_enc.*, state_enc.*, act_enc.*,
        corr{i}.*."""
        yield from self.pos_enc.named_arrays("pos_enc.")
        yield from self.state_enc.named_arrays("state_enc.")
        yield from self.act_enc.named_arrays("act_enc.")
        for i, corr in enumerate(self.correctors):
            yield from corr.named_arrays(f"corr{i}.")


def init_dynamics_params(rng, d_q, d_v, d_a, hidden=64, blocks=2,
                         act_hidden=32, act_blocks=1, n_correctors=1,
                         corr_hidden=64, corr_blocks=2,
                         activation="tanh", corr_activation="relu"):
    """Fresh model. Corrector output projections start at zero so a new
    corrector is exactly the zero function."""
    if d_q != d_v:
        # the position-derivative block is a verbatim copy of qdot, which
        # only types when the two blocks have equal width
        raise DimensionError(f"d_q ({d_q}) must equal d_v ({d_v})")
    n_tri = d_v * (d_v + 1) // 2
    return DynamicsParams(
        d_q=d_q, d_v=d_v, d_a=d_a,
        pos_enc=init_resnet(rng, d_q, hidden, blocks, n_tri, activation),
        state_enc=init_resnet(rng, d_q + d_v, hidden, blocks, d_v, activation),
        act_enc=init_mlp(rng, d_a, act_hidden, act_blocks, d_v, activation),
        correctors=[
            init_resnet(rng, d_q + d_v + d_a, corr_hidden, corr_blocks, d_v,
                        corr_activation, zero_output=True)
            for _ in range(n_correctors)
        ],
        active_correctors=0,
    )


def parameter_count(params, groups=None):
    """Total number of scalars, optionally restricted to name prefixes."""
    total = 0
    for name, arr in params.named_parameters():
        if groups is None or any(name.startswith(g) for g in groups):
            total += arr.size
    return total


def parameters_to_dict(params):
    return dict(params.named_parameters())


def replace_parameters(params, updates):
    """New DynamicsParams with arrays replaced by name; untouched arrays are
    shared with the original."""
    taken = set()

    def rebuild_net(net, prefix):
        def swap(name, arr):
            full = prefix + name
            if full in updates:
                taken.add(full)
                return updates[full]
            return arr

        if isinstance(net, MlpParams):
            ws = [swap(f"w{i}", w) for i, w in enumerate(net.weights)]
            bs = [swap(f"b{i}", b) for i, b in enumerate(net.biases)]
            return MlpParams(ws, bs, net.activation)
        blocks = []
        for j, blk in enumerate(net.blocks):
            blocks.append(type(blk)(
                w1=swap(f"block{j}.w1", blk.w1), b1=swap(f"block{j}.b1", blk.b1),
                w2=swap(f"block{j}.w2", blk.w2), b2=swap(f"block{j}.b2", blk.b2)))
        return ResNetParams(
            w_in=swap("w_in", net.w_in), b_in=swap("b_in", net.b_in),
            blocks=blocks, w_out=swap("w_out", net.w_out),
            b_out=swap("b_out", net.b_out), activation=net.activation)

    new = replace(
        params,
        pos_enc=rebuild_net(params.pos_enc, "pos_enc."),
        state_enc=rebuild_net(params.state_enc, "state_enc."),
        act_enc=rebuild_net(params.act_enc, "act_enc."),
        correctors=[rebuild_net(c, f"corr{i}.")
                    for i, c in enumerate(params.correctors)],
    )
    missing = set(updates) - taken
    if missing:
        raise KeyError(f"unknown parameter names: {sorted(missing)}")
    return new


# ---------------------------------------------------------------------------
# mass-inverse assembly


def triangular_dim(n_tri):
    """Side length n with n(n+1)/2 == n_tri, or raise."""
    n = int((np.sqrt(8 * n_tri + 1) - 1) / 2)
    if n * (n + 1) // 2 != n_tri:
        raise DimensionError(f"{n_tri} is not a triangular number")
    return n


def assemble_mass_inverse(l_flat):
    """Fill a lower-triangular L row by row from ``l_flat`` and return
    ``M = L L^T``.

    The upper triangle of the product is mirrored from the lower one, so the
    result is symmetric bit-exactly. Batched over leading axes.
    """
    l_flat = np.asarray(l_flat, dtype=np.float64)
    n = triangular_dim(l_flat.shape[-1])
    rows, cols = np.tril_indices(n)
    L = np.zeros(l_flat.shape[:-1] + (n, n))
    L[..., rows, cols] = l_flat
    P = L @ np.swapaxes(L, -1, -2)
    M = np.tril(P) + np.swapaxes(np.tril(P, -1), -1, -2)
    return M


def mass_inverse_vjp(l_flat, cotangent_M):
    """Gradient of <U, assemble_mass_inverse(l_flat)> w.r.t. ``l_flat``."""
    l_flat = np.asarray(l_flat, dtype=np.float64)
    U = np.asarray(cotangent_M, dtype=np.float64)
    n = triangular_dim(l_flat.shape[-1])
    rows, cols = np.tril_indices(n)
    L = np.zeros(l_flat.shape[:-1] + (n, n))
    L[..., rows, cols] = l_flat
    # mirror step routes upper-triangle cotangent into the lower product
    G = np.tril(U) + np.tril(np.swapaxes(U, -1, -2), -1)
    grad_L = (G + np.swapaxes(G, -1, -2)) @ L
    return grad_L[..., rows, cols]


# ---------------------------------------------------------------------------
# derivatives


def _split_state(s, params):
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != params.d_s:
        raise DimensionError(
            f"state width {s.shape[-1]} != d_q + d_v = {params.d_s}")
    return s[..., :params.d_q], s[..., params.d_q:]


def predictor_derivative(s, a, params):
    """Rigid-body style derivative ``(qdot, M(q)[b(s) + tau(a)])``."""
    q, qdot = _split_state(s, params)
    a = np.asarray(a, dtype=np.float64)
    M = assemble_mass_inverse(resnet_forward(params.pos_enc, q))
    bt = resnet_forward(params.state_enc, s) + mlp_forward(params.act_enc, a)
    acc = (M @ bt[..., :, None])[..., 0]
    return np.concatenate([qdot, acc], axis=-1)


def full_derivative(s, a, params):
    """Predictor plus the first ``active_correctors`` corrector outputs,
    added to the acceleration block only."""
    out = predictor_derivative(s, a, params)
    if params.active_correctors == 0:
        return out
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    sa = np.concatenate([s, a], axis=-1)
    acc = out[..., params.d_q:]
    for corr in params.correctors[:params.active_correctors]:
        acc = acc + resnet_forward(corr, sa)
    return np.concatenate([out[..., :params.d_q], acc], axis=-1)


def dynamics_vjp(s, a, params, cotangent):
    """Reverse-mode pass through :func:`full_derivative`.

    Returns ``(grad_params, grad_s, grad_a)``; ``grad_params`` mirrors the
    DynamicsParams structure (inactive correctors get zero gradients).
    Batched inputs sum parameter gradients over the batch.
    """
    q, qdot = _split_state(s, params)
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    u = np.asarray(cotangent, dtype=np.float64)
    if u.shape != s.shape:
        raise DimensionError(
            f"cotangent shape {u.shape} != state shape {s.shape}")
    u_q = u[..., :params.d_q]
    u_v = u[..., params.d_q:]

    # forward pieces needed by the product rule
    l_flat = resnet_forward(params.pos_enc, q)
    M = assemble_mass_inverse(l_flat)
    bt = resnet_forward(params.state_enc, s) + mlp_forward(params.act_enc, a)

    grad_s = np.zeros_like(s)
    grad_s[..., params.d_q:] += u_q  # structural identity: d(qdot block)/d qdot

    # acc = M @ bt
    grad_M = u_v[..., :, None] * bt[..., None, :]
    grad_bt = (M @ u_v[..., :, None])[..., 0]  # M is symmetric

    grad_pos, gq = resnet_vjp(params.pos_enc, q, mass_inverse_vjp(l_flat, grad_M))
    grad_s[..., :params.d_q] += gq
    grad_state, gs = resnet_vjp(params.state_enc, s, grad_bt)
    grad_s += gs
    grad_act, grad_a = mlp_vjp(params.act_enc, a, grad_bt)

    grad_corrs = []
    sa = None
    for i, corr in enumerate(params.correctors):
        if i < params.active_correctors:
            if sa is None:
                sa = np.concatenate([s, a], axis=-1)
            gc, gsa = resnet_vjp(corr, sa, u_v)
            grad_corrs.append(gc)
            grad_s += gsa[..., :params.d_s]
            grad_a = grad_a + gsa[..., params.d_s:]
        else:
            grad_corrs.append(zeros_like_tree(corr))

    grad_params = DynamicsParams(
        d_q=params.d_q, d_v=params.d_v, d_a=params.d_a,
        pos_enc=grad_pos, state_enc=grad_state, act_enc=grad_act,
        correctors=grad_corrs, active_correctors=params.active_correctors)
    return grad_params, grad_s, grad_a
