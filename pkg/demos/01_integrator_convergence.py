"""Convergence orders of the two solvers on an analytic problem.

Runs both integrators at a ladder of fixed step sizes on the decay equation
ds/dt = -4s and fits the log-log error slope: the Dormand-Prince weights
give order 5, classical RK4 gives order 4. Also sweeps the adaptive
tolerance to show final error tracking rtol.
"""
import numpy as np

from motionsim.odeint import (
    DOPRI5,
    RK4,
    IntegratorConfig,
    dopri5_integrate,
    rk_fixed_integrate,
)

RATE = 4.0
T1 = 1.5
EXACT = np.exp(-RATE * T1)

decay = lambda s, a: -RATE * s


def fixed_step_errors(tableau, hs):
    errs = []
    for h in hs:
        n = int(round(T1 / h))
        y, _ = rk_fixed_integrate(decay, np.array([1.0]), lambda t: 0.0,
                                  0.0, T1, n, tableau=tableau)
        errs.append(abs(y[0] - EXACT))
    return np.array(errs)


def fit_slope(hs, errs):
    # ignore points at the float64 rounding floor
    keep = errs > 1e-13
    return np.polyfit(np.log10(hs[keep]), np.log10(errs[keep]), 1)[0]


def main():
    hs = np.geomspace(1e-1, 1e-3, 7)

    e5 = fixed_step_errors(DOPRI5, hs)
    e4 = fixed_step_errors(RK4, hs)
    print("step size      dopri5 error     rk4 error")
    for h, a, b in zip(hs, e5, e4):
        print(f"{h:9.5f}   {a:13.3e}   {b:11.3e}")
    print(f"\nfitted log-log slopes: dopri5 {fit_slope(hs, e5):.2f} "
          f"(order 5), rk4 {fit_slope(hs, e4):.2f} (order 4)")

    print("\nadaptive tolerance sweep (rtol = atol):")
    for rtol in [1e-4, 1e-6, 1e-8, 1e-10]:
        cfg = IntegratorConfig(rtol=rtol, atol=rtol, h_init=0.05)
        stats = {}
        y, _ = dopri5_integrate(decay, np.array([1.0]), lambda t: 0.0,
                                0.0, T1, cfg, record=False, stats=stats)
        print(f"  rtol {rtol:7.0e}: error {abs(y[0] - EXACT):9.2e}, "
              f"{stats['accepted']} accepted / {stats.get('rejected', 0)} "
              f"rejected steps, {stats['nfev']} f-evals")


if __name__ == "__main__":
    main()
