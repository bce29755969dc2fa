"""Continuous-time integration and the two gradient paths.

The forward solver is the classical Dormand-Prince 5(4) embedded pair with
PI step-size control; a fixed-step RK4 is kept alongside as the reference
solver for oracles and convergence checks.

Gradients through a solve come in two flavors:

* ``backprop_through_steps`` replays the recorded Runge-Kutta stages in
  reverse. It is exact for the discretized map that was actually computed.
* ``adjoint_backward`` re-integrates the augmented system (state, adjoint,
  parameter gradient) backward in time, which is the integral formulation
  of the same gradient; its error is set by the solver tolerances.

Solvers accept a vector field ``f(s, a)`` and a control signal
``action_fn(t)``. Both state and batch-of-states inputs work, with a shared
error norm across the batch in the adaptive solver.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrationError
from .nn import tree_add, tree_map

Array = np.ndarray


@dataclass
class IntegratorConfig:
    rtol: float = 1e-6
    atol: float = 1e-6
    h_init: float = 0.005
    h_min: float = 1e-10
    h_max: float = np.inf
    max_steps: int = 100_000
    safety: float = 0.9
    # PI controller exponents for a 4th-order error estimate
    alpha: float = 0.7 / 5.0
    beta: float = 0.4 / 5.0

    def __post_init__(self):
        if not (0 < self.h_min <= self.h_init):
            raise ValueError("need 0 < h_min <= h_init")
        if self.h_init > self.h_max:
            raise ValueError("need h_init <= h_max")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class ButcherTableau:
    a: list          # stage coefficient rows, row i has i entries
    b: np.ndarray    # propagation weights
    c: np.ndarray    # stage nodes
    b_err: np.ndarray | None = None  # weights of the embedded error estimate


DOPRI5 = ButcherTableau(
    a=[
        [],
        [1 / 5],
        [3 / 40, 9 / 40],
        [44 / 45, -56 / 15, 32 / 9],
        [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
        [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
        [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
    ],
    b=np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0]),
    c=np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0]),
    b_err=np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920,
                    -17253 / 339200, 22 / 525, -1 / 40]),
)

RK4 = ButcherTableau(
    a=[[], [0.5], [0.0, 0.5], [0.0, 0.0, 1.0]],
    b=np.array([1 / 6, 1 / 3, 1 / 3, 1 / 6]),
    c=np.array([0.0, 0.5, 0.5, 1.0]),
)

EULER = ButcherTableau(a=[[]], b=np.array([1.0]), c=np.array([0.0]))


@dataclass
class StepRecord:
    """One accepted step: start time/state, size, stage slopes, end state.

    The action is sampled at the step start and assumed constant across the
    step, which holds because integration is restarted at every control-grid
    boundary.
    """

    t: float
    h: float
    y0: Array
    action: Array
    stages: list
    y1: Array


def _rk_stages(f, t, y, h, action, tableau):
    ks = []
    for i, row in enumerate(tableau.a):
        yi = y
        for j, aij in enumerate(row):
            if aij != 0.0:
                yi = yi + (h * aij) * ks[j]
        ks.append(np.asarray(f(yi, action), dtype=np.float64))
    return ks


def _combine(y, h, ks, weights):
    out = y
    for w, k in zip(weights, ks):
        if w != 0.0:
            out = out + (h * w) * k
    return out


def _error_norm(err, y0, y1, rtol, atol):
    scale = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def dopri5_integrate(f, s0, action_fn, t0, t1, cfg=None, record=True,
                     h0=None, stats=None):
    """Adaptive Dormand-Prince 5(4) solve of ds/dt = f(s, action_fn(t)).

    Returns ``(s1, records)`` where records lists every accepted step.
    Raises :class:`IntegrationError` on step underflow, step-budget
    exhaustion, or a non-finite state, carrying the last good (t, state).

    ``h0`` overrides the configured initial step (used to carry the step
    size across control-interval restarts). ``stats``, when given a dict,
    accumulates ``accepted``/``rejected``/``nfev``/``last_h`` in place.
    """
    cfg = cfg or IntegratorConfig()
    if t1 <= t0:
        raise ValueError("need t1 > t0")
    y = np.asarray(s0, dtype=np.float64).copy()
    t = t0
    h = min(h0 if h0 is not None else cfg.h_init, cfg.h_max, t1 - t0)
    h = max(h, cfg.h_min)
    records = []
    err_prev = 1.0
    n_steps = 0

    while t < t1 - 1e-14 * max(1.0, abs(t1)):
        if n_steps >= cfg.max_steps:
            raise IntegrationError(
                f"exceeded max_steps={cfg.max_steps} at t={t:.6g}", t=t, state=y)
        h = min(h, t1 - t)
        a = np.asarray(action_fn(t), dtype=np.float64)
        ks = _rk_stages(f, t, y, h, a, DOPRI5)
        y1 = _combine(y, h, ks, DOPRI5.b)
        err_vec = _combine(np.zeros_like(y), h, ks, DOPRI5.b_err)
        if not np.all(np.isfinite(y1)):
            raise IntegrationError(
                f"non-finite state at t={t:.6g}", t=t, state=y)
        err = _error_norm(err_vec, y, y1, cfg.rtol, cfg.atol)
        n_steps += 1
        if stats is not None:
            stats["nfev"] = stats.get("nfev", 0) + 7

        if err <= 1.0:
            if record:
                records.append(StepRecord(t=t, h=h, y0=y, action=a,
                                          stages=ks, y1=y1))
            if stats is not None:
                stats["accepted"] = stats.get("accepted", 0) + 1
                stats["last_h"] = h
            t = t + h
            y = y1
            # PI controller; err floors avoid division blowups on exact steps
            grow = cfg.safety * max(err, 1e-10) ** -cfg.alpha \
                * max(err_prev, 1e-10) ** cfg.beta
            h = h * min(10.0, max(0.2, grow))
            err_prev = max(err, 1e-10)
        else:
            if stats is not None:
                stats["rejected"] = stats.get("rejected", 0) + 1
            h = h * max(0.2, cfg.safety * err ** -cfg.alpha)
        if h < cfg.h_min:
            raise IntegrationError(
                f"step size underflow ({h:.3g} < h_min) at t={t:.6g}",
                t=t, state=y)
        h = min(h, cfg.h_max)

    return y, records


def rk_fixed_integrate(f, s0, action_fn, t0, t1, n_steps, tableau=RK4,
                       record=False):
    """Fixed-step explicit RK solve with the given tableau.

    Returns ``(s1, records)``; records are produced only when asked.
    """
    if n_steps < 1:
        raise ValueError("need n_steps >= 1")
    y = np.asarray(s0, dtype=np.float64).copy()
    h = (t1 - t0) / n_steps
    records = []
    for i in range(n_steps):
        t = t0 + i * h
        a = np.asarray(action_fn(t), dtype=np.float64)
        ks = _rk_stages(f, t, y, h, a, tableau)
        y1 = _combine(y, h, ks, tableau.b)
        if not np.all(np.isfinite(y1)):
            raise IntegrationError(
                f"non-finite state at t={t:.6g}", t=t, state=y)
        if record:
            records.append(StepRecord(t=t, h=h, y0=y, action=a,
                                      stages=ks, y1=y1))
        y = y1
    return y, records


def rk4_integrate(f, s0, action_fn, dt, n_steps):
    """Classical RK4 trajectory: returns states at every step boundary,
    shape ``(n_steps + 1, ...)``."""
    if dt <= 0:
        raise ValueError("need dt > 0")
    y = np.asarray(s0, dtype=np.float64).copy()
    out = [y]
    for i in range(n_steps):
        t = i * dt
        a = np.asarray(action_fn(t), dtype=np.float64)
        ks = _rk_stages(f, t, y, dt, a, RK4)
        y = _combine(y, dt, ks, RK4.b)
        if not np.all(np.isfinite(y)):
            raise IntegrationError(
                f"non-finite state at step {i}", t=t, state=out[-1])
        out.append(y)
    return np.stack(out, axis=0)


def integrate_controlled(f, s0, actions, dt, cfg=None, record=False,
                         stats=None):
    """Roll out ``n`` control steps under a zero-order-hold action sequence.

    The adaptive solver is restarted at every control boundary so no step
    straddles an action switch; the accepted step size is carried over as
    the next interval's initial step. ``actions`` has shape ``(n, d_a)``, or
    ``(n, B, d_a)`` for a state batch ``(B, d)``.

    Returns ``(states, interval_records)`` with states stacked at the n+1
    control boundaries and one record list per interval (empty lists unless
    ``record``).
    """
    cfg = cfg or IntegratorConfig()
    y = np.asarray(s0, dtype=np.float64)
    states = [y]
    interval_records = []
    h_carry = None
    local_stats = stats if stats is not None else {}
    for k in range(len(actions)):
        a_k = np.asarray(actions[k], dtype=np.float64)
        try:
            y, recs = dopri5_integrate(
                f, y, lambda t: a_k, k * dt, (k + 1) * dt, cfg,
                record=record, h0=h_carry, stats=local_stats)
        except IntegrationError as e:
            raise IntegrationError(
                f"control step {k}: {e}", t=e.t, state=e.state) from e
        if "last_h" in local_stats:
            h_carry = min(local_stats["last_h"], dt)
        states.append(y)
        interval_records.append(recs)
    return np.stack(states, axis=0), interval_records


# ---------------------------------------------------------------------------
# gradient paths


def backprop_through_steps(records, vjp_f, dL_ds1, tableau=DOPRI5):
    """Reverse-mode sweep through recorded RK steps.

    ``vjp_f(y, action, u) -> (grad_theta, grad_y)`` is the vector-Jacobian
    product of the vector field; ``grad_theta`` may be any parameter tree.
    Returns ``(grad_theta_total, grad_s0)``. Exact for the discretized map
    the records describe.
    """
    ubar = np.asarray(dL_ds1, dtype=np.float64).copy()
    grad_theta = None
    n_stages = len(tableau.b)
    for rec in reversed(records):
        if len(rec.stages) != n_stages:
            raise ValueError(
                f"record has {len(rec.stages)} stages, tableau expects {n_stages}")
        h = rec.h
        kbars = [(h * bi) * ubar if bi != 0.0 else np.zeros_like(ubar)
                 for bi in tableau.b]
        y0bar = ubar.copy()
        for i in range(n_stages - 1, -1, -1):
            # stages that feed neither the output nor a later stage carry
            # no signal, except that the very first vjp also sizes grad_theta
            if grad_theta is not None and not np.any(kbars[i]):
                continue
            # reconstruct the stage input from the recorded slopes
            yi = rec.y0
            for j, aij in enumerate(tableau.a[i]):
                if aij != 0.0:
                    yi = yi + (h * aij) * rec.stages[j]
            gtheta, gy = vjp_f(yi, rec.action, kbars[i])
            grad_theta = gtheta if grad_theta is None else tree_add(grad_theta, gtheta)
            y0bar += gy
            for j, aij in enumerate(tableau.a[i]):
                if aij != 0.0:
                    kbars[j] += (h * aij) * gy
        ubar = y0bar
    return grad_theta, ubar


def adjoint_backward(f, vjp_f, records, dL_ds1, cfg=None):
    """Adjoint-method gradients via backward integration.

    Integrates the augmented system (state, adjoint, parameter-gradient
    accumulator) from the end of the recorded span back to its start,
    seeding the adjoint with ``dL_ds1``. ``vjp_f`` must return the parameter
    gradient as a flat vector: ``vjp_f(y, action, u) -> (theta_vec, grad_y)``.

    Returns ``(grad_theta_vec, grad_s0)``.
    """
    if not records:
        raise ValueError("adjoint_backward needs a non-empty record list")
    cfg = cfg or IntegratorConfig()
    t0 = records[0].t
    t1 = records[-1].t + records[-1].h
    z1 = records[-1].y1
    action = records[-1].action  # constant across the span by construction
    if not np.array_equal(action, records[0].action):
        raise ValueError("records span an action switch; integrate the "
                         "control intervals separately")
    alpha1 = np.asarray(dL_ds1, dtype=np.float64)

    theta_probe, _ = vjp_f(z1, action, alpha1)
    n_theta = theta_probe.size
    nz = z1.size
    shape = z1.shape

    def aug_field(y, _a):
        z = y[:nz].reshape(shape)
        alpha = y[nz:2 * nz].reshape(shape)
        gtheta, gz = vjp_f(z, action, alpha)
        # backward time: s = t1 - t, so signs flip on the state flow
        return np.concatenate([
            -np.asarray(f(z, action), dtype=np.float64).ravel(),
            np.asarray(gz).ravel(),
            np.asarray(gtheta).ravel(),
        ])

    y_aug = np.concatenate([z1.ravel(), alpha1.ravel(), np.zeros(n_theta)])
    span = t1 - t0
    aug_cfg = IntegratorConfig(
        rtol=cfg.rtol, atol=cfg.atol, h_init=min(cfg.h_init, span),
        h_min=cfg.h_min, h_max=cfg.h_max, max_steps=cfg.max_steps)
    y_end, _ = dopri5_integrate(aug_field, y_aug, lambda t: 0.0, 0.0, span,
                                aug_cfg, record=False)
    grad_s0 = y_end[nz:2 * nz].reshape(shape)
    grad_theta = y_end[2 * nz:]
    return grad_theta, grad_s0
