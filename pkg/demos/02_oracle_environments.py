"""Tour of the analytic environments.

Checks the physical sanity properties that make these systems usable as
oracles: equilibria, energy conservation without damping, dissipation with
it, and the wall-pendulum contact staying within its compliance bound.
"""
import numpy as np

from motionsim.envs import env_names, make_env, generate_trajectory, \
    sample_actions, ActionSamplerSpec
from motionsim.odeint import rk4_integrate


def main():
    rng = np.random.default_rng(0)

    print("bundled environments:")
    for name in env_names():
        env = make_env(name)
        print(f"  {name:13s} d_q={env.d_q} d_a={env.d_a} dt={env.dt} "
              f"bounds=[{env.action_low[0]:+.1f}, {env.action_high[0]:+.1f}]")

    print("\npendulum equilibria (derivative at rest):")
    env = make_env("pendulum")
    for label, s in [("hanging", np.array([0.0, 0.0])),
                     ("inverted", np.array([np.pi, 0.0]))]:
        ds = env.env_derivative(s, np.array([0.0]))
        print(f"  {label:9s} |ds/dt| = {np.abs(ds).max():.2e}")

    print("\nacrobot energy drift over 10 s (undamped, zero action):")
    acro = make_env("acrobot", damping=0.0)
    s0 = acro.sample_initial(rng, 1)[0]
    traj = rk4_integrate(acro.env_derivative, s0, lambda t: np.zeros(1),
                         1e-3, 10_000)
    e = acro.energy(traj)
    print(f"  relative drift {np.abs(e - e[0]).max() / abs(e[0]):.2e}")

    print("\npendulum energy under damping (zero action):")
    traj = rk4_integrate(env.env_derivative, np.array([2.0, 0.0]),
                         lambda t: np.zeros(1), 1e-3, 5_000)
    e = env.energy(traj)
    print(f"  E(0) = {e[0]:+.3f} -> E(5s) = {e[-1]:+.3f} (monotone: "
          f"{bool(np.all(np.diff(e) <= 1e-10))})")

    print("\nwall pendulum: 200-step random rollouts, 16 seeds")
    wall = make_env("wallpendulum")
    s0 = wall.sample_initial(rng, 16)
    acts = rng.uniform(wall.action_low, wall.action_high, size=(200, 16, 1))
    states = generate_trajectory(wall, s0, acts)
    pen = np.max(states[..., 0] - wall.constants["wall_angle"])
    print(f"  max wall penetration {pen:.3f} rad "
          f"(documented bound {wall.constants['penetration_bound']})")

    print("\nPoisson-switched excitation (rate 2/s, 30 s):")
    acts = sample_actions(ActionSamplerSpec("poisson_hold", rate=2.0), env,
                          30.0, rng)
    switches = int(np.sum(np.any(acts[1:] != acts[:-1], axis=1)))
    print(f"  {switches} switches in {len(acts)} control steps")


if __name__ == "__main__":
    main()
