"""Analytic ground-truth environments.

Each environment is a closed-form rigid-body system that serves both as the
training-data generator and as the evaluation oracle. Derivative functions
are vectorized over a leading batch axis, and every constant is a fixed,
documented number: the constants define the oracle.

Bundled systems (state layout is always ``(q..., qdot...)``):

* ``pendulum``      single link, gravity, viscous damping, torque-actuated
* ``cartpole``      force on the cart, unactuated pole
* ``reacher2``      planar 2-link arm, both joints torqued, no gravity
* ``acrobot``       2 links under gravity, only the elbow torqued; chaotic
                    at zero action
* ``wallpendulum``  pendulum plus a stiff one-sided spring-damper wall,
                    giving non-smooth contact-like dynamics
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .odeint import rk4_integrate

Array = np.ndarray

GRAVITY = 9.81


@dataclass
class EnvSpec:
    """An environment: dimensions, bounds, dynamics, and samplers."""

    name: str
    d_q: int
    d_v: int
    d_a: int
    dt: float
    action_low: Array
    action_high: Array
    derivative: callable          # (s, a) -> ds, vectorized over batches
    sample_initial: callable      # (rng, n) -> (n, d_q + d_v)
    reward: callable = None       # (s, a) -> per-step reward, vectorized
    energy: callable = None       # (s) -> mechanical energy, vectorized
    constants: dict = field(default_factory=dict)

    @property
    def d_s(self):
        return self.d_q + self.d_v

    def __post_init__(self):
        self.deriv_calls = 0

    def env_derivative(self, s, a):
        """Exact analytic ds/dt; counts calls so harnesses can audit
        oracle usage."""
        self.deriv_calls += 1
        return self.derivative(np.asarray(s, dtype=np.float64),
                               np.asarray(a, dtype=np.float64))


def _check_dims(s, a, d_s, d_a, name):
    if s.shape[-1] != d_s:
        raise ValueError(f"{name}: state width {s.shape[-1]} != {d_s}")
    if a.shape[-1] != d_a:
        raise ValueError(f"{name}: action width {a.shape[-1]} != {d_a}")


# ---------------------------------------------------------------------------
# pendulum


def make_pendulum(mass=1.0, length=1.0, gravity=GRAVITY, damping=1.5,
                  torque_max=6.0, dt=0.05):
    """Torque-actuated pendulum; theta = 0 hangs down, theta = pi is upright."""
    inertia = mass * length ** 2

    def deriv(s, a):
        _check_dims(s, a, 2, 1, "pendulum")
        th, om = s[..., 0], s[..., 1]
        acc = (a[..., 0] - damping * om
               - mass * gravity * length * np.sin(th)) / inertia
        return np.stack([om, acc], axis=-1)

    def sample_initial(rng, n):
        th = rng.uniform(-np.pi, np.pi, size=n)
        om = rng.uniform(-2.0, 2.0, size=n)
        return np.stack([th, om], axis=-1)

    def reward(s, a):
        # swing-up shaping: 0 hanging down, 1 upright, minus a control tax
        return (1.0 - np.cos(s[..., 0])) / 2.0 - 1e-3 * a[..., 0] ** 2

    def energy(s):
        th, om = s[..., 0], s[..., 1]
        return 0.5 * inertia * om ** 2 - mass * gravity * length * np.cos(th)

    return EnvSpec(
        name="pendulum", d_q=1, d_v=1, d_a=1, dt=dt,
        action_low=np.array([-torque_max]), action_high=np.array([torque_max]),
        derivative=deriv, sample_initial=sample_initial,
        reward=reward, energy=energy,
        constants=dict(mass=mass, length=length, gravity=gravity,
                       damping=damping, torque_max=torque_max))


# ---------------------------------------------------------------------------
# cartpole


def make_cartpole(cart_mass=1.0, pole_mass=0.1, pole_length=1.0,
                  gravity=GRAVITY, damping=0.05, force_max=10.0, dt=0.05):
    """Cart with an unactuated uniform-rod pole; theta = 0 hangs down.

    State is (x, theta, xdot, thetadot); the only input is the horizontal
    force on the cart.
    """
    lc = pole_length / 2
    j_pole = pole_mass * pole_length ** 2 / 3  # rod inertia about the pivot
    total = cart_mass + pole_mass
    ml = pole_mass * lc

    def deriv(s, a):
        _check_dims(s, a, 4, 1, "cartpole")
        th, xd, thd = s[..., 1], s[..., 2], s[..., 3]
        sin, cos = np.sin(th), np.cos(th)
        # mass matrix [[total, ml cos], [ml cos, j_pole]] against the
        # force vector; viscous damping acts on both coordinates
        r1 = a[..., 0] - damping * xd + ml * thd ** 2 * sin
        r2 = -damping * thd - ml * gravity * sin
        det = total * j_pole - (ml * cos) ** 2
        x_acc = (j_pole * r1 - ml * cos * r2) / det
        th_acc = (total * r2 - ml * cos * r1) / det
        return np.stack([xd, thd, x_acc, th_acc], axis=-1)

    def sample_initial(rng, n):
        x = rng.uniform(-1.0, 1.0, size=n)
        th = rng.uniform(-np.pi, np.pi, size=n)
        xd = rng.uniform(-1.0, 1.0, size=n)
        thd = rng.uniform(-2.0, 2.0, size=n)
        return np.stack([x, th, xd, thd], axis=-1)

    def reward(s, a):
        # balance shaping: pole up and cart centered
        return (1.0 - np.cos(s[..., 1])) / 2.0 - 0.05 * s[..., 0] ** 2 \
            - 1e-4 * a[..., 0] ** 2

    def energy(s):
        th, xd, thd = s[..., 1], s[..., 2], s[..., 3]
        kinetic = 0.5 * total * xd ** 2 + ml * np.cos(th) * xd * thd \
            + 0.5 * j_pole * thd ** 2
        return kinetic - ml * gravity * np.cos(th)

    return EnvSpec(
        name="cartpole", d_q=2, d_v=2, d_a=1, dt=dt,
        action_low=np.array([-force_max]), action_high=np.array([force_max]),
        derivative=deriv, sample_initial=sample_initial, reward=reward,
        energy=energy,
        constants=dict(cart_mass=cart_mass, pole_mass=pole_mass,
                       pole_length=pole_length, gravity=gravity,
                       damping=damping, force_max=force_max))


# ---------------------------------------------------------------------------
# two-link helpers (reacher2 and acrobot share the manipulator equations)


def _two_link_accel(s, tau1, tau2, m1, m2, l1, lc1, lc2, i1, i2, gravity,
                    damping):
    """Joint accelerations of a planar 2-link chain, angles measured from
    the downward vertical, elbow angle relative."""
    th1, th2 = s[..., 0], s[..., 1]
    w1, w2 = s[..., 2], s[..., 3]
    c2, s2 = np.cos(th2), np.sin(th2)

    d11 = m1 * lc1 ** 2 + m2 * (l1 ** 2 + lc2 ** 2 + 2 * l1 * lc2 * c2) + i1 + i2
    d12 = m2 * (lc2 ** 2 + l1 * lc2 * c2) + i2
    d22 = m2 * lc2 ** 2 + i2

    hterm = -m2 * l1 * lc2 * s2
    c1 = hterm * w2 ** 2 + 2 * hterm * w1 * w2
    c2v = -hterm * w1 ** 2

    g1 = (m1 * lc1 + m2 * l1) * gravity * np.sin(th1) \
        + m2 * lc2 * gravity * np.sin(th1 + th2)
    g2 = m2 * lc2 * gravity * np.sin(th1 + th2)

    r1 = tau1 - c1 - g1 - damping * w1
    r2 = tau2 - c2v - g2 - damping * w2

    det = d11 * d22 - d12 * d12
    a1 = (d22 * r1 - d12 * r2) / det
    a2 = (d11 * r2 - d12 * r1) / det
    return a1, a2


def _two_link_energy(s, m1, m2, l1, lc1, lc2, i1, i2, gravity):
    th1, th2 = s[..., 0], s[..., 1]
    w1, w2 = s[..., 2], s[..., 3]
    c2 = np.cos(th2)
    d11 = m1 * lc1 ** 2 + m2 * (l1 ** 2 + lc2 ** 2 + 2 * l1 * lc2 * c2) + i1 + i2
    d12 = m2 * (lc2 ** 2 + l1 * lc2 * c2) + i2
    d22 = m2 * lc2 ** 2 + i2
    kinetic = 0.5 * d11 * w1 ** 2 + d12 * w1 * w2 + 0.5 * d22 * w2 ** 2
    potential = -(m1 * lc1 + m2 * l1) * gravity * np.cos(th1) \
        - m2 * lc2 * gravity * np.cos(th1 + th2)
    return kinetic + potential


def make_reacher2(m1=1.0, m2=1.0, l1=0.5, l2=0.5, damping=0.5,
                  torque_max=2.0, dt=0.05, target=(0.6, 0.4)):
    """Planar 2-link arm, both joints torqued, gravity-free."""
    lc1, lc2 = l1 / 2, l2 / 2
    i1 = m1 * l1 ** 2 / 12
    i2 = m2 * l2 ** 2 / 12
    target = np.asarray(target, dtype=np.float64)

    def deriv(s, a):
        _check_dims(s, a, 4, 2, "reacher2")
        a1, a2 = _two_link_accel(s, a[..., 0], a[..., 1], m1, m2, l1, lc1,
                                 lc2, i1, i2, 0.0, damping)
        return np.stack([s[..., 2], s[..., 3], a1, a2], axis=-1)

    def sample_initial(rng, n):
        th = rng.uniform(-np.pi, np.pi, size=(n, 2))
        w = rng.uniform(-1.0, 1.0, size=(n, 2))
        return np.concatenate([th, w], axis=-1)

    def tip(s):
        th1 = s[..., 0]
        th12 = s[..., 0] + s[..., 1]
        x = l1 * np.sin(th1) + l2 * np.sin(th12)
        y = -l1 * np.cos(th1) - l2 * np.cos(th12)
        return np.stack([x, y], axis=-1)

    def reward(s, a):
        d = np.linalg.norm(tip(s) - target, axis=-1)
        return -d - 1e-3 * np.sum(a ** 2, axis=-1)

    def energy(s):
        return _two_link_energy(s, m1, m2, l1, lc1, lc2, i1, i2, 0.0)

    spec = EnvSpec(
        name="reacher2", d_q=2, d_v=2, d_a=2, dt=dt,
        action_low=np.array([-torque_max, -torque_max]),
        action_high=np.array([torque_max, torque_max]),
        derivative=deriv, sample_initial=sample_initial,
        reward=reward, energy=energy,
        constants=dict(m1=m1, m2=m2, l1=l1, l2=l2, damping=damping,
                       torque_max=torque_max, target=tuple(target)))
    spec.tip = tip
    return spec


def make_acrobot(m1=1.0, m2=1.0, l1=1.0, l2=1.0, gravity=GRAVITY,
                 damping=0.02, torque_max=0.5, dt=0.01):
    """Underactuated 2-link chain: gravity on, torque only at the elbow.

    Chaotic at zero action for generic initial conditions. The fast control
    grid and light damping keep a 1000-step divergence measurement inside
    the same 10 s regime the training trajectories cover, with coordinate
    excursions a raw-coordinate network can represent.
    """
    lc1, lc2 = l1 / 2, l2 / 2
    i1 = m1 * l1 ** 2 / 12
    i2 = m2 * l2 ** 2 / 12

    def deriv(s, a):
        _check_dims(s, a, 4, 1, "acrobot")
        zero = np.zeros_like(a[..., 0])
        a1, a2 = _two_link_accel(s, zero, a[..., 0], m1, m2, l1, lc1, lc2,
                                 i1, i2, gravity, damping)
        return np.stack([s[..., 2], s[..., 3], a1, a2], axis=-1)

    def sample_initial(rng, n):
        th = rng.uniform(-np.pi, np.pi, size=(n, 2))
        w = rng.uniform(-2.0, 2.0, size=(n, 2))
        return np.concatenate([th, w], axis=-1)

    def reward(s, a):
        # swing-up shaping via normalized tip height
        tip_h = -l1 * np.cos(s[..., 0]) - l2 * np.cos(s[..., 0] + s[..., 1])
        return (tip_h + l1 + l2) / (2 * (l1 + l2)) - 1e-3 * a[..., 0] ** 2

    def energy(s):
        return _two_link_energy(s, m1, m2, l1, lc1, lc2, i1, i2, gravity)

    return EnvSpec(
        name="acrobot", d_q=2, d_v=2, d_a=1, dt=dt,
        action_low=np.array([-torque_max]), action_high=np.array([torque_max]),
        derivative=deriv, sample_initial=sample_initial,
        reward=reward, energy=energy,
        constants=dict(m1=m1, m2=m2, l1=l1, l2=l2, gravity=gravity,
                       damping=damping, torque_max=torque_max))


# ---------------------------------------------------------------------------
# wall pendulum


#: Documented compliance bound: trajectories never penetrate the wall
#: deeper than this (radians), given the default stiffness and the energy
#: reachable under the default torque bound.
WALL_PENETRATION_BOUND = 0.4


def make_wallpendulum(mass=1.0, length=1.0, gravity=GRAVITY, damping=1.5,
                      torque_max=6.0, wall_angle=np.pi / 2,
                      wall_stiffness=800.0, wall_damping=5.0, dt=0.05):
    """Pendulum with a stiff one-sided spring-damper wall at ``wall_angle``.

    Contact makes the vector field non-smooth at the wall, which is the
    regime the corrector stage is meant to absorb.
    """
    inertia = mass * length ** 2

    def wall_torque(th, om):
        pen = th - wall_angle
        active = pen > 0.0
        return np.where(active, -wall_stiffness * pen - wall_damping * om, 0.0)

    def deriv(s, a):
        _check_dims(s, a, 2, 1, "wallpendulum")
        th, om = s[..., 0], s[..., 1]
        torque = a[..., 0] - damping * om \
            - mass * gravity * length * np.sin(th) + wall_torque(th, om)
        return np.stack([om, torque / inertia], axis=-1)

    def sample_initial(rng, n):
        th = rng.uniform(-np.pi, wall_angle, size=n)
        om = rng.uniform(-2.0, 2.0, size=n)
        return np.stack([th, om], axis=-1)

    def reward(s, a):
        return (1.0 - np.cos(s[..., 0])) / 2.0 - 1e-3 * a[..., 0] ** 2

    def energy(s):
        th, om = s[..., 0], s[..., 1]
        pen = np.maximum(th - wall_angle, 0.0)
        return 0.5 * inertia * om ** 2 - mass * gravity * length * np.cos(th) \
            + 0.5 * wall_stiffness * pen ** 2

    return EnvSpec(
        name="wallpendulum", d_q=1, d_v=1, d_a=1, dt=dt,
        action_low=np.array([-torque_max]), action_high=np.array([torque_max]),
        derivative=deriv, sample_initial=sample_initial,
        reward=reward, energy=energy,
        constants=dict(mass=mass, length=length, gravity=gravity,
                       damping=damping, torque_max=torque_max,
                       wall_angle=wall_angle, wall_stiffness=wall_stiffness,
                       wall_damping=wall_damping,
                       penetration_bound=WALL_PENETRATION_BOUND))


_FACTORIES = {
    "pendulum": make_pendulum,
    "cartpole": make_cartpole,
    "reacher2": make_reacher2,
    "acrobot": make_acrobot,
    "wallpendulum": make_wallpendulum,
}


def env_names():
    return sorted(_FACTORIES)


def make_env(name, **overrides):
    """Environment by name; raises on unknown names."""
    try:
        factory = _FACTORIES[name]
    except KeyError:
        raise ValueError(
            f"unknown environment {name!r}; available: {env_names()}") from None
    return factory(**overrides)


# ---------------------------------------------------------------------------
# action sampling


@dataclass
class ActionSamplerSpec:
    """How random excitation actions are drawn.

    ``uniform_per_step`` draws an i.i.d. uniform action every control step.
    ``poisson_hold`` holds a uniform draw for an Exp(rate)-distributed
    duration (rounded up to the control grid), i.e. a Poisson switching
    process.
    """

    mode: str = "poisson_hold"
    rate: float = 2.0  # switches per second, poisson_hold only

    def __post_init__(self):
        if self.mode not in ("uniform_per_step", "poisson_hold"):
            raise ValueError(f"unknown action sampler mode {self.mode!r}")
        if self.mode == "poisson_hold" and self.rate <= 0:
            raise ValueError("poisson_hold needs rate > 0")


def sample_actions(spec, env, duration, rng):
    """Draw an action sequence covering ``duration`` seconds on the
    control grid. Deterministic given the rng state."""
    dt = env.dt
    if duration < dt:
        raise ValueError("duration must cover at least one control step")
    n = int(round(duration / dt))
    low, high = env.action_low, env.action_high
    if spec.mode == "uniform_per_step":
        return rng.uniform(low, high, size=(n, env.d_a))
    out = np.empty((n, env.d_a))
    i = 0
    while i < n:
        hold = max(1, int(np.ceil(rng.exponential(1.0 / spec.rate) / dt)))
        out[i:i + hold] = rng.uniform(low, high, size=env.d_a)
        i += hold
    return out


# ---------------------------------------------------------------------------
# ground-truth rollouts

#: RK4 substeps per control interval used for oracle integration.
ORACLE_SUBSTEPS = 20


def step_oracle(env, s, a, substeps=ORACLE_SUBSTEPS):
    """Advance the oracle one control interval under a held action."""
    a = np.asarray(a, dtype=np.float64)
    traj = rk4_integrate(env.env_derivative, s, lambda t: a,
                         env.dt / substeps, substeps)
    return traj[-1]


def generate_trajectory(env, s0, actions, substeps=ORACLE_SUBSTEPS):
    """Ground-truth rollout recording states at control boundaries.

    ``s0``: (d_s,) or (B, d_s); ``actions``: (n, d_a) or (n, B, d_a).
    Returns states of shape (n+1, d_s) or (n+1, B, d_s).
    """
    s = np.asarray(s0, dtype=np.float64)
    states = [s]
    for k in range(len(actions)):
        s = step_oracle(env, s, actions[k], substeps)
        states.append(s)
    return np.stack(states, axis=0)
