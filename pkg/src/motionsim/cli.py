"""Command-line entry point.

Subcommands: gen-data, train, benchmark, plan, lce, fit-flow, few-shot.
Configuration comes from an optional JSON document (``--config``,
schema-validated with unknown keys rejected) plus flag overrides; flags
win. Every run is reproducible from config + seed, and every output file
embeds the resolved config hash.

Exit codes: 0 ok, 2 config error, 3 data-format error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import sys
from importlib import resources

import numpy as np

from .errors import ConfigError, DensityFault, FormatError, \
    IntegrationError, MotionSimError, TrainingFault
from .util import config_hash


def _load_schema(name):
    with resources.files("motionsim.schemas").joinpath(name).open() as fh:
        return json.load(fh)


def load_run_config(path=None, overrides=None):
    """Read + schema-validate a run config, then apply flag overrides."""
    import jsonschema

    cfg = {}
    if path:
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
    if overrides:
        cfg = _merge(cfg, overrides)
    schema = _load_schema("run_config.schema.json")
    try:
        jsonschema.validate(cfg, schema)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"config rejected: {e.message} "
                          f"(at {'/'.join(str(p) for p in e.absolute_path)})") \
            from None
    return cfg


def _merge(base, extra):
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        elif value is not None:
            out[key] = value
    return out


def _emit(doc, out_path):
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _integrator_cfg(cfg, dt):
    from .odeint import IntegratorConfig

    section = cfg.get("integrator", {})
    return IntegratorConfig(rtol=section.get("rtol", 1e-6),
                            atol=section.get("atol", 1e-6),
                            h_init=dt / 10,
                            max_steps=section.get("max_steps", 100_000))


def _planner_cfg(cfg, seed):
    from .control import PlannerConfig

    p = cfg.get("planner", {})
    return PlannerConfig(
        horizon=p.get("horizon", 25), population=p.get("population", 64),
        elite_frac=p.get("elite_frac", 0.125),
        iterations=p.get("iterations", 4), smoothing=p.get("smoothing", 0.3),
        init_std_frac=p.get("init_std_frac", 0.5), seed=seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    from .datagen import generate_policy_dataset, generate_random_dataset
    from .datasets import write_dataset
    from .envs import ActionSamplerSpec, make_env

    cfg = load_run_config(args.config, {
        "seed": args.seed, "env": {"name": args.env}})
    seed = cfg.get("seed", 0)
    env = make_env(cfg["env"]["name"], **cfg["env"].get("overrides", {}))
    chash = config_hash({**cfg, "cmd": "gen-data", "mode": args.mode,
                         "n_traj": args.n_traj, "duration": args.duration,
                         "sampler": args.sampler, "rate": args.rate})

    if args.mode == "random":
        sampler = ActionSamplerSpec(mode=args.sampler, rate=args.rate)
        ds = generate_random_dataset(env, args.n_traj, args.duration,
                                     sampler, seed)
    else:
        ds = generate_policy_dataset(env, args.n_traj, args.duration,
                                     _planner_cfg(cfg, seed), seed)
    write_dataset(args.out, ds, meta={"config_hash": chash})
    total_steps = sum(seg.n_steps for seg in ds.segments)
    print(json.dumps({
        "out": args.out, "env": env.name, "mode": args.mode,
        "trajectories": len(ds.segments), "steps": total_steps,
        "env_constants_hash": config_hash(env.constants),
        "config_hash": chash}))
    return 0


def _build_params(cfg, env, seed):
    from .dynamics import init_dynamics_params

    m = cfg.get("model", {})
    rng = np.random.default_rng(seed)
    return init_dynamics_params(
        rng, env.d_q, env.d_v, env.d_a,
        hidden=m.get("hidden", 64), blocks=m.get("blocks", 2),
        act_hidden=m.get("act_hidden", 32), act_blocks=m.get("act_blocks", 1),
        n_correctors=m.get("n_correctors", 1),
        corr_hidden=m.get("corr_hidden", 64),
        corr_blocks=m.get("corr_blocks", 2))


def cmd_train(args):
    from .checkpoint import load_dynamics, save_dynamics
    from .datasets import read_dataset
    from .envs import make_env
    from .training import TrainConfig, train_end_to_end, train_multistage

    cfg = load_run_config(args.config, {"seed": args.seed,
                                        "dataset": args.dataset})
    if "dataset" not in cfg:
        raise ConfigError("train needs a dataset (flag --dataset or config)")
    seed = cfg.get("seed", 0)
    ds = read_dataset(cfg["dataset"])
    t = cfg.get("train", {})
    tcfg = TrainConfig(
        segment_length=t.get("segment_length", 8),
        batch_size=t.get("batch_size", 64),
        steps_per_stage=t.get("steps_per_stage", [2000]),
        grad_path=t.get("grad_path", "backprop_steps"),
        lr=t.get("lr", 1e-3), seed=seed,
        noise_sigma=t.get("noise_sigma", 0.0),
        rtol=t.get("rtol", 1e-6), atol=t.get("atol", 1e-6),
        grad_clip=t.get("grad_clip", 10.0),
        curriculum=t.get("curriculum", True),
        warmin=t.get("warmin", 100),
        validation_every=t.get("validation_every", 500),
        validation_segments=t.get("validation_segments", 64),
        validation_horizons=t.get("validation_horizons", [16, 100]),
        validation_fraction=t.get("validation_fraction", 0.1),
        checkpoint_every=t.get("checkpoint_every", 1000),
        checkpoint_path=args.out)
    chash = config_hash({**cfg, "cmd": "train"})

    if args.resume:
        params0, _ = load_dynamics(args.resume)
    else:
        env = make_env(ds.env_name)
        params0 = _build_params(cfg, env, seed)

    mode = t.get("mode", "multistage")
    trainer = train_multistage if mode == "multistage" else train_end_to_end
    params, log = trainer(tcfg, ds, params0, log_path=args.log)
    save_dynamics(args.out, params, extra_meta={
        "config_hash_bytes": np.frombuffer(chash.encode(), dtype=np.uint8)})
    summary = {
        "out": args.out, "mode": mode, "steps": len(log.losses),
        "final_loss": log.losses[-1] if log.losses else None,
        "wall_time_s": round(log.wall_time, 2),
        "config_hash": chash,
    }
    for h in tcfg.validation_horizons:
        best = log.best_validation(h)
        if np.isfinite(best):
            summary[f"best_val_mse_norm_h{h}"] = best
    print(json.dumps(summary))
    return 0


def cmd_benchmark(args):
    from .benchmark import rollout_mse
    from .checkpoint import load_dynamics
    from .datasets import read_dataset
    from .dynamics import full_derivative
    from .envs import make_env

    cfg = load_run_config(args.config, {"seed": args.seed,
                                        "dataset": args.dataset})
    seed = cfg.get("seed", 0)
    ds = read_dataset(cfg["dataset"])
    icfg = _integrator_cfg(cfg, ds.dt)
    horizons = [int(h) for h in args.horizons.split(",")]

    if args.ckpt == "oracle":
        env = make_env(ds.env_name)
        model = env.env_derivative
        model_id = f"oracle:{ds.env_name}"
    else:
        params, _ = load_dynamics(args.ckpt)
        model = lambda s, a: full_derivative(s, a, params)
        model_id = args.ckpt
    report = rollout_mse(model, ds, horizons, n_eval=args.n_eval, cfg=icfg,
                         seed=seed, warmin=args.warmin, model_id=model_id)
    report.config_hash = config_hash({**cfg, "cmd": "benchmark",
                                      "horizons": horizons})
    _emit(report.to_json_dict(), args.out)
    return 0


def cmd_plan(args):
    from .checkpoint import load_dynamics
    from .control import zero_shot_eval
    from .dynamics import full_derivative
    from .envs import make_env

    cfg = load_run_config(args.config, {"seed": args.seed,
                                        "env": {"name": args.env}})
    seed = cfg.get("seed", 0)
    env = make_env(cfg["env"]["name"], **cfg["env"].get("overrides", {}))
    icfg = _integrator_cfg(cfg, env.dt)
    pcfg = _planner_cfg(cfg, seed)
    replan = cfg.get("planner", {}).get("replan_every", 1)

    if args.ckpt == "oracle":
        model = env.env_derivative
        model_id = f"oracle:{env.name}"
    else:
        params, _ = load_dynamics(args.ckpt)
        model = lambda s, a: full_derivative(s, a, params)
        model_id = args.ckpt
    report = zero_shot_eval(model, env, env.reward, pcfg,
                            n_episodes=args.episodes,
                            episode_length=args.episode_length, seed=seed,
                            icfg=icfg, replan_every=replan,
                            model_ckpt=model_id)
    report.config_hash = config_hash({**cfg, "cmd": "plan"})
    _emit(report.to_json_dict(), args.out)
    return 0


def cmd_lce(args):
    from .benchmark import estimate_lce, model_lce_step, oracle_lce_step
    from .checkpoint import load_dynamics
    from .dynamics import full_derivative
    from .envs import make_env

    cfg = load_run_config(args.config, {"seed": args.seed,
                                        "env": {"name": args.env}})
    seed = cfg.get("seed", 0)
    env = make_env(cfg["env"]["name"], **cfg["env"].get("overrides", {}))

    if args.ckpt == "oracle":
        step = oracle_lce_step(env)
        model_id = f"oracle:{env.name}"
    else:
        params, _ = load_dynamics(args.ckpt)
        model = lambda s, a: full_derivative(s, a, params)
        icfg = _integrator_cfg(cfg, env.dt)
        step = model_lce_step(model, env.d_a, env.dt, icfg)
        model_id = args.ckpt
    result = estimate_lce(step, env.sample_initial, delta=args.delta,
                          t_steps=args.steps, n_traj=args.n_traj,
                          dt=env.dt, seed=seed)
    doc = {
        "env": env.name, "model": model_id, "lce": result.lce,
        "std_error": result.std_error,
        "n_trajectories": result.n_trajectories,
        "n_dropped": result.n_dropped,
        "delta": args.delta, "t_steps": args.steps,
        "config_hash": config_hash({**cfg, "cmd": "lce",
                                    "delta": args.delta,
                                    "steps": args.steps,
                                    "n_traj": args.n_traj}),
    }
    _emit(doc, args.out)
    return 0


def cmd_fit_flow(args):
    from .datasets import read_dataset
    from .flow import default_penalty_config, fit_flow, save_flow

    cfg = load_run_config(args.config, {"seed": args.seed,
                                        "dataset": args.dataset})
    seed = cfg.get("seed", 0)
    ds = read_dataset(cfg["dataset"])
    states = ds.all_states()
    f = cfg.get("flow", {})
    flow, log = fit_flow(states, n_layers=f.get("n_layers", 6),
                         hidden=f.get("hidden", 32),
                         n_hidden=f.get("n_hidden", 1),
                         iters=f.get("iters", 800),
                         batch_size=f.get("batch_size", 256),
                         lr=f.get("lr", 1e-3), seed=seed)
    pcfg = default_penalty_config(flow, states)
    chash = config_hash({**cfg, "cmd": "fit-flow"})
    save_flow(args.out, flow, extra_meta={
        "penalty_tau": [pcfg.tau], "penalty_alpha": [pcfg.alpha],
        "config_hash_bytes": np.frombuffer(chash.encode(), dtype=np.uint8)})
    print(json.dumps({
        "out": args.out, "states": int(states.shape[0]),
        "holdout_logp": log.holdout_logp[-1] if log.holdout_logp else None,
        "penalty_tau": pcfg.tau, "penalty_alpha": pcfg.alpha,
        "config_hash": chash}))
    return 0


def cmd_few_shot(args):
    from .checkpoint import load_dynamics, save_dynamics
    from .datasets import read_dataset
    from .envs import make_env
    from .training import FewShotConfig, few_shot_loop

    cfg = load_run_config(args.config, {"seed": args.seed,
                                        "env": {"name": args.env},
                                        "dataset": args.dataset})
    seed = cfg.get("seed", 0)
    env = make_env(cfg["env"]["name"], **cfg["env"].get("overrides", {}))
    ds = read_dataset(cfg["dataset"])
    params0, _ = load_dynamics(args.ckpt)
    fs = cfg.get("few_shot", {})
    fcfg = FewShotConfig(
        virtual_steps=fs.get("virtual_steps", 20000),
        collect_every=fs.get("collect_every", 5000),
        collect_steps=fs.get("collect_steps", 1000),
        update_every=fs.get("update_every", 100),
        updates_per_cycle=fs.get("updates_per_cycle", 2),
        episode_length=fs.get("episode_length", 100),
        batch_size=fs.get("batch_size", 32),
        segment_length=fs.get("segment_length", 8),
        lr=fs.get("lr", 3e-4),
        replan_every=fs.get("replan_every", 4), seed=seed)
    pcfg = _planner_cfg(cfg, seed)
    chash = config_hash({**cfg, "cmd": "few-shot"})
    params, log = few_shot_loop(fcfg, env, pcfg, env.reward, params0, ds)
    save_dynamics(args.out, params, extra_meta={
        "config_hash_bytes": np.frombuffer(chash.encode(), dtype=np.uint8)})
    print(json.dumps({
        "out": args.out, "virtual_steps": log.virtual_steps,
        "oracle_steps": log.oracle_steps,
        "collections": len(log.collections),
        "config_hash": chash}))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    parser = argparse.ArgumentParser(
        prog="motionsim",
        description="Learn, benchmark, analyze, and plan with "
                    "continuous-time dynamics models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config (schema-validated)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", help="output path (reports default to stdout)")

    p = sub.add_parser("gen-data", help="generate an oracle trajectory dataset")
    common(p)
    p.add_argument("--env", required=True)
    p.add_argument("--mode", choices=["random", "policy"], default="random",
                   help="excitation source: random sampler or planner rollouts")
    p.add_argument("--sampler", choices=["poisson_hold", "uniform_per_step"],
                   default="poisson_hold")
    p.add_argument("--rate", type=float, default=2.0,
                   help="poisson_hold switch rate, switches/s")
    p.add_argument("--n-traj", type=int, required=True)
    p.add_argument("--duration", type=float, required=True,
                   help="seconds per trajectory")
    p.set_defaults(fn=cmd_gen_data, out_required=True)

    p = sub.add_parser("train", help="train a dynamics model on a dataset")
    common(p)
    p.add_argument("--dataset", help="MOSIMTRJ path (or set in config)")
    p.add_argument("--resume", help="MSNN checkpoint to continue from")
    p.add_argument("--log", help="JSON-lines training log path")
    p.set_defaults(fn=cmd_train, out_required=True)

    p = sub.add_parser("benchmark", help="rollout-MSE of a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True,
                   help="MSNN checkpoint, or 'oracle' for the env itself")
    p.add_argument("--dataset", required=True)
    p.add_argument("--horizons", default="3,16,100")
    p.add_argument("--n-eval", type=int, default=64)
    p.add_argument("--warmin", type=int, default=100)
    p.set_defaults(fn=cmd_benchmark)

    p = sub.add_parser("plan", help="zero-shot CEM-MPC evaluation")
    common(p)
    p.add_argument("--ckpt", required=True,
                   help="MSNN checkpoint, or 'oracle'")
    p.add_argument("--env", required=True)
    p.add_argument("--episodes", type=int, default=3)
    p.add_argument("--episode-length", type=int, default=100)
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("lce", help="Lyapunov characteristic exponent")
    common(p)
    p.add_argument("--ckpt", required=True,
                   help="MSNN checkpoint, or 'oracle'")
    p.add_argument("--env", required=True)
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--n-traj", type=int, default=2000)
    p.set_defaults(fn=cmd_lce)

    p = sub.add_parser("fit-flow", help="fit the state-density flow")
    common(p)
    p.add_argument("--dataset", required=True)
    p.set_defaults(fn=cmd_fit_flow, out_required=True)

    p = sub.add_parser("few-shot", help="few-shot fine-tuning loop")
    common(p)
    p.add_argument("--ckpt", required=True, help="pretrained MSNN checkpoint")
    p.add_argument("--env", required=True)
    p.add_argument("--dataset", required=True,
                   help="pretraining dataset seeding the replay buffer")
    p.set_defaults(fn=cmd_few_shot, out_required=True)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "out_required", False) and not args.out:
        parser.error(f"{args.command} requires --out")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FormatError as e:
        where = f" (byte offset {e.offset})" if e.offset is not None else ""
        print(f"data format error: {e}{where}", file=sys.stderr)
        return 3
    except (IntegrationError, TrainingFault, DensityFault) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4
    except FileNotFoundError as e:
        print(f"data format error: {e}", file=sys.stderr)
        return 3
    except (ValueError, KeyError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
