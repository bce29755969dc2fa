"""Learn the pendulum from trajectories of the oracle.

Small-budget end of the full pipeline: generate random-excitation data,
fit the structured model (mass-inverse factor x encoded forces), and
compare a long rollout against the ground truth. Takes a few minutes;
increase the budgets for a stronger model.
"""
import numpy as np

import motionsim as ms
from motionsim.benchmark import rollout_mse
from motionsim.datagen import generate_random_dataset
from motionsim.dynamics import full_derivative
from motionsim.envs import make_env
from motionsim.odeint import IntegratorConfig, integrate_controlled
from motionsim.training import TrainConfig, train_multistage


def main():
    env = make_env("pendulum")
    print("generating 200 random trajectories x 10 s ...")
    dataset = generate_random_dataset(env, 200, 10.0, seed=0)

    rng = np.random.default_rng(0)
    params0 = ms.init_dynamics_params(rng, env.d_q, env.d_v, env.d_a,
                                      hidden=64, blocks=2, act_hidden=32,
                                      act_blocks=1, n_correctors=0)
    cfg = TrainConfig(
        steps_per_stage=[1500], lr=2e-3, lr_decay=0.02, seed=0,
        rtol=1e-4, atol=1e-4,
        curriculum_phases=[(0.5, 1, 256), (0.25, 4, 96), (0.25, 8, 64)],
        validation_every=500, validation_segments=32)
    print("training (predictor only, 1500 steps) ...")
    params, log = train_multistage(cfg, dataset, params0)
    print(f"done in {log.wall_time:.0f} s; final batch loss "
          f"{log.losses[-1]:.5f}")

    model = lambda s, a: full_derivative(s, a, params)
    ecfg = IntegratorConfig(rtol=1e-6, atol=1e-6, h_init=env.dt / 10)
    report = rollout_mse(model, dataset, [3, 16, 100], n_eval=48, cfg=ecfg,
                         seed=123)
    print("\nrollout MSE (normalized by state std):")
    for h, m in zip(report.horizons, report.mse_normalized):
        print(f"  horizon {h:3d}: {m:.5f}")

    # side-by-side trajectory
    seg = dataset.segments[-1]
    acts = seg.actions[100:150][:, None, :]
    truth = seg.states[100:151]
    pred, _ = integrate_controlled(model, seg.states[100], acts[:, 0],
                                   env.dt, ecfg)
    print("\n50-step rollout comparison (theta):")
    for k in [0, 10, 20, 30, 40, 50]:
        print(f"  step {k:2d}: truth {truth[k, 0]:+7.3f}  "
              f"model {pred[k, 0]:+7.3f}")


if __name__ == "__main__":
    main()
