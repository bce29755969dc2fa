"""Dense feed-forward networks with hand-written reverse-mode passes.

Everything here is float64 numpy. Networks come in two fixed shapes, a plain
MLP and a residual network; both expose a forward pass and an exact
vector-Jacobian product (``net_vjp``). Inputs may be a single vector ``(n,)``
or a batch ``(B, n)``; parameter gradients are summed over the batch.

Parameter containers are plain dataclasses. Generic tree helpers
(``tree_map``, ``tree_leaves``, ...) treat ``np.ndarray`` as the leaf type
and recurse through lists, dicts, and dataclasses, which is what the Adam
optimizer and the ODE gradient paths operate on.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, TrainingFault

Array = np.ndarray

ACTIVATIONS = ("tanh", "relu", "identity")


def _apply_act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _act_grad_from_output(name, y):
    # derivative of the activation expressed through its output value
    if name == "tanh":
        return 1.0 - y * y
    if name == "relu":
        return (y > 0.0).astype(np.float64)
    if name == "identity":
        return np.ones_like(y)
    raise ValueError(f"unknown activation {name!r}")


def _as_batch(x):
    """Return (2-D view of x, had_batch_dim)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], False
    if x.ndim == 2:
        return x, True
    raise DimensionError(f"expected 1-D or 2-D input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class MlpParams:
    """Affine layers with the activation applied after every layer except
    the last."""

    weights: list  # each (d_out, d_in)
    biases: list   # each (d_out,)
    activation: str = "tanh"

    @property
    def d_in(self):
        return self.weights[0].shape[1]

    @property
    def d_out(self):
        return self.weights[-1].shape[0]

    def named_arrays(self, prefix=""):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}w{i}", w
            yield f"{prefix}b{i}", b


@dataclass
class ResBlockParams:
    w1: Array
    b1: Array
    w2: Array
    b2: Array

    def named_arrays(self, prefix=""):
        yield f"{prefix}w1", self.w1
        yield f"{prefix}b1", self.b1
        yield f"{prefix}w2", self.w2
        yield f"{prefix}b2", self.b2


@dataclass
class ResNetParams:
    """Input projection + activation, N_B residual blocks, output projection.

    Each block computes ``h + W2 act(W1 h + b1) + b2`` at constant width.
    """

    w_in: Array
    b_in: Array
    blocks: list
    w_out: Array
    b_out: Array
    activation: str = "tanh"

    @property
    def d_in(self):
        return self.w_in.shape[1]

    @property
    def d_out(self):
        return self.w_out.shape[0]

    @property
    def d_hidden(self):
        return self.w_in.shape[0]

    def named_arrays(self, prefix=""):
        yield f"{prefix}w_in", self.w_in
        yield f"{prefix}b_in", self.b_in
        for j, blk in enumerate(self.blocks):
            yield from blk.named_arrays(f"{prefix}block{j}.")
        yield f"{prefix}w_out", self.w_out
        yield f"{prefix}b_out", self.b_out


def _uniform_fan_in(rng, d_out, d_in):
    bound = np.sqrt(1.0 / d_in)
    return rng.uniform(-bound, bound, size=(d_out, d_in))


def init_mlp(rng, d_in, d_hidden, n_hidden, d_out, activation="tanh",
             zero_output=False):
    """Fresh MLP: d_in -> d_hidden (x n_hidden blocks) -> d_out.

    ``n_hidden = 0`` still gives two affine layers (in and out projection).
    ``zero_output`` zeroes the final layer so the net is the zero function.
    """
    sizes = [d_in] + [d_hidden] * (n_hidden + 1) + [d_out]
    weights = [_uniform_fan_in(rng, o, i) for i, o in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(o) for o in sizes[1:]]
    if zero_output:
        weights[-1] = np.zeros_like(weights[-1])
    return MlpParams(weights, biases, activation)


def init_resnet(rng, d_in, d_hidden, n_blocks, d_out, activation="tanh",
                zero_output=False):
    """Fresh residual network with ``n_blocks >= 1`` constant-width blocks."""
    if n_blocks < 1:
        raise ValueError("residual network needs at least one block")
    blocks = [
        ResBlockParams(
            w1=_uniform_fan_in(rng, d_hidden, d_hidden),
            b1=np.zeros(d_hidden),
            w2=_uniform_fan_in(rng, d_hidden, d_hidden),
            b2=np.zeros(d_hidden),
        )
        for _ in range(n_blocks)
    ]
    w_out = _uniform_fan_in(rng, d_out, d_hidden)
    if zero_output:
        w_out = np.zeros_like(w_out)
    return ResNetParams(
        w_in=_uniform_fan_in(rng, d_hidden, d_in),
        b_in=np.zeros(d_hidden),
        blocks=blocks,
        w_out=w_out,
        b_out=np.zeros(d_out),
        activation=activation,
    )


# ---------------------------------------------------------------------------
# forward passes


def _affine(x, w, b, where):
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(
            f"{where}: weight expects input width {w.shape[1]}, got {x.shape[-1]}")
    return x @ w.T + b


def mlp_forward(params, x):
    """Evaluate the MLP; accepts (n,) or (B, n) input."""
    h, batched = _as_batch(x)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = _affine(h, w, b, f"mlp layer {i}")
        if i != last:
            h = _apply_act(params.activation, h)
    return h if batched else h[0]


def _mlp_forward_cache(params, x):
    """Forward pass keeping the input of every affine layer."""
    inputs = []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        h = _affine(h, w, b, f"mlp layer {i}")
        if i != last:
            h = _apply_act(params.activation, h)
    return h, inputs


def resnet_forward(params, x):
    """Evaluate the residual network; accepts (n,) or (B, n) input."""
    h, batched = _as_batch(x)
    h = _apply_act(params.activation, _affine(h, params.w_in, params.b_in, "resnet input"))
    for j, blk in enumerate(params.blocks):
        u = _apply_act(params.activation, _affine(h, blk.w1, blk.b1, f"resnet block {j}.1"))
        h = h + _affine(u, blk.w2, blk.b2, f"resnet block {j}.2")
    y = _affine(h, params.w_out, params.b_out, "resnet output")
    return y if batched else y[0]


def _resnet_forward_cache(params, x):
    h0 = _apply_act(params.activation, _affine(x, params.w_in, params.b_in, "resnet input"))
    hs = [h0]   # block inputs
    us = []     # block inner activations
    h = h0
    for j, blk in enumerate(params.blocks):
        u = _apply_act(params.activation, _affine(h, blk.w1, blk.b1, f"resnet block {j}.1"))
        us.append(u)
        h = h + _affine(u, blk.w2, blk.b2, f"resnet block {j}.2")
        hs.append(h)
    y = _affine(h, params.w_out, params.b_out, "resnet output")
    return y, (h0, hs, us)


# ---------------------------------------------------------------------------
# vector-Jacobian products


def mlp_vjp(params, x, cotangent):
    """u^T dy/dtheta and u^T dy/dx for the MLP.

    Returns ``(grad_params, grad_x)`` where grad_params mirrors ``params``.
    Batched inputs sum parameter gradients over the batch.
    """
    x2, batched = _as_batch(x)
    u, ubatched = _as_batch(cotangent)
    if batched != ubatched or (batched and x2.shape[0] != u.shape[0]):
        raise DimensionError("input and cotangent batch shapes differ")
    y, inputs = _mlp_forward_cache(params, x2)
    if u.shape[-1] != y.shape[-1]:
        raise DimensionError(
            f"cotangent width {u.shape[-1]} != output width {y.shape[-1]}")
    grad_w = [None] * len(params.weights)
    grad_b = [None] * len(params.biases)
    last = len(params.weights) - 1
    for i in range(last, -1, -1):
        if i != last:
            # inputs[i+1] is act(z_i), the output of this layer's activation
            u = u * _act_grad_from_output(params.activation, inputs[i + 1])
        grad_w[i] = u.T @ inputs[i]
        grad_b[i] = u.sum(axis=0)
        u = u @ params.weights[i]
    grads = MlpParams(grad_w, grad_b, params.activation)
    return grads, (u if batched else u[0])


def resnet_vjp(params, x, cotangent):
    """u^T dy/dtheta and u^T dy/dx for the residual network."""
    x2, batched = _as_batch(x)
    u, ubatched = _as_batch(cotangent)
    if batched != ubatched or (batched and x2.shape[0] != u.shape[0]):
        raise DimensionError("input and cotangent batch shapes differ")
    y, (h0, hs, us) = _resnet_forward_cache(params, x2)
    if u.shape[-1] != y.shape[-1]:
        raise DimensionError(
            f"cotangent width {u.shape[-1]} != output width {y.shape[-1]}")

    grad_w_out = u.T @ hs[-1]
    grad_b_out = u.sum(axis=0)
    hbar = u @ params.w_out

    grad_blocks = [None] * len(params.blocks)
    for j in range(len(params.blocks) - 1, -1, -1):
        blk = params.blocks[j]
        # h_{j+1} = h_j + W2 u_j + b2, with u_j = act(W1 h_j + b1)
        grad_w2 = hbar.T @ us[j]
        grad_b2 = hbar.sum(axis=0)
        ubar = (hbar @ blk.w2) * _act_grad_from_output(params.activation, us[j])
        grad_w1 = ubar.T @ hs[j]
        grad_b1 = ubar.sum(axis=0)
        grad_blocks[j] = ResBlockParams(grad_w1, grad_b1, grad_w2, grad_b2)
        hbar = hbar + ubar @ blk.w1

    h0bar = hbar * _act_grad_from_output(params.activation, h0)
    grad_w_in = h0bar.T @ x2
    grad_b_in = h0bar.sum(axis=0)
    grad_x = h0bar @ params.w_in

    grads = ResNetParams(grad_w_in, grad_b_in, grad_blocks,
                         grad_w_out, grad_b_out, params.activation)
    return grads, (grad_x if batched else grad_x[0])


def net_forward(params, x):
    if isinstance(params, MlpParams):
        return mlp_forward(params, x)
    if isinstance(params, ResNetParams):
        return resnet_forward(params, x)
    raise TypeError(f"not a network parameter container: {type(params)!r}")


def net_vjp(params, x, cotangent):
    """Exact reverse-mode VJP dispatching on the parameter container."""
    if isinstance(params, MlpParams):
        return mlp_vjp(params, x, cotangent)
    if isinstance(params, ResNetParams):
        return resnet_vjp(params, x, cotangent)
    raise TypeError(f"not a network parameter container: {type(params)!r}")


# ---------------------------------------------------------------------------
# parameter trees


def tree_map(fn, tree, *rest):
    """Apply ``fn`` leafwise over matching trees of arrays.

    Trees are nested lists/tuples/dicts/dataclasses; non-array scalar fields
    (activation tags, counters) are taken from the first tree unchanged.
    """
    if isinstance(tree, np.ndarray):
        return fn(tree, *rest)
    if isinstance(tree, (list, tuple)):
        mapped = [tree_map(fn, t, *(r[i] for r in rest)) for i, t in enumerate(tree)]
        return type(tree)(mapped)
    if isinstance(tree, dict):
        return {k: tree_map(fn, v, *(r[k] for r in rest)) for k, v in tree.items()}
    if dataclasses.is_dataclass(tree):
        kwargs = {}
        for f in dataclasses.fields(tree):
            v = getattr(tree, f.name)
            if isinstance(v, (np.ndarray, list, tuple, dict)) or dataclasses.is_dataclass(v):
                kwargs[f.name] = tree_map(fn, v, *(getattr(r, f.name) for r in rest))
            else:
                kwargs[f.name] = v
        return type(tree)(**kwargs)
    return tree


def tree_leaves(tree):
    """Flat list of the array leaves of a tree."""
    out = []

    def visit(node):
        if isinstance(node, np.ndarray):
            out.append(node)
        elif isinstance(node, (list, tuple)):
            for v in node:
                visit(v)
        elif isinstance(node, dict):
            for k in node:
                visit(node[k])
        elif dataclasses.is_dataclass(node):
            for f in dataclasses.fields(node):
                visit(getattr(node, f.name))

    visit(tree)
    return out


def tree_add(a, b):
    return tree_map(lambda x, y: x + y, a, b)


def zeros_like_tree(tree):
    return tree_map(np.zeros_like, tree)


def tree_to_vector(tree):
    """Concatenate all leaves into one flat float64 vector."""
    leaves = tree_leaves(tree)
    if not leaves:
        return np.zeros(0)
    return np.concatenate([np.ravel(v) for v in leaves])


def tree_from_vector(template, vec):
    """Inverse of :func:`tree_to_vector` for the given structure."""
    pos = 0

    def take(leaf):
        nonlocal pos
        n = leaf.size
        out = np.asarray(vec[pos:pos + n]).reshape(leaf.shape)
        pos += n
        return out

    result = tree_map(take, template)
    if pos != np.size(vec):
        raise DimensionError(
            f"vector has {np.size(vec)} entries, tree needs {pos}")
    return result


def tree_size(tree):
    return sum(v.size for v in tree_leaves(tree))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment trees plus the step counter and hyperparameters."""

    m: object
    v: object
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    return AdamState(m=zeros_like_tree(params), v=zeros_like_tree(params),
                     t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state, params, grads):
    """One bias-corrected Adam update. Returns ``(new_state, new_params)``.

    Non-finite gradients are rejected rather than written into the moments.
    """
    for g in tree_leaves(grads):
        if not np.all(np.isfinite(g)):
            raise TrainingFault("non-finite gradient passed to adam_step")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t

    new_m = tree_map(lambda m, g: b1 * m + (1.0 - b1) * g, state.m, grads)
    new_v = tree_map(lambda v, g: b2 * v + (1.0 - b2) * g * g, state.v, grads)
    new_params = tree_map(
        lambda p, m, v: p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps),
        params, new_m, new_v)
    new_state = AdamState(m=new_m, v=new_v, t=t, lr=state.lr,
                          beta1=b1, beta2=b2, eps=state.eps)
    return new_state, new_params
