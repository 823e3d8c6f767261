"""Command-line entry point ``cannarx``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment, imc, mpc, plotting
from .model import ModelFileError, load_model, save_model
from .plant import Episode
from .stability import certify, lyapunov_probe
from .training import TrainConfig, TrainingDivergedError, evaluate

log = logging.getLogger("cannarx")

EXIT_OK, EXIT_VALIDATION, EXIT_STAGE = 0, 2, 3


def _config(args) -> experiment.ExperimentConfig:
    if getattr(args, "quick", False):
        cfg = experiment.ExperimentConfig.quick()
    else:
        cfg = experiment.ExperimentConfig()
    if args.config:
        d = json.loads(Path(args.config).read_text())
        if getattr(args, "quick", False):
            d.setdefault("preset", "quick")
        cfg = experiment.ExperimentConfig.from_dict(d)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _load_episodes(data_dir) -> list:
    paths = sorted(Path(data_dir).glob("episode_*.csv"))
    if not paths:
        raise FileNotFoundError(f"no episode_*.csv files in {data_dir}")
    return [Episode.load(p) for p in paths]


def cmd_gen_data(args):
    cfg = _config(args)
    for key in ("duration", "n_episodes", "noise_sigma"):
        if getattr(args, key) is not None:
            setattr(cfg.data, key, getattr(args, key))
    eps = experiment.generate_data(cfg, args.out)
    print(f"wrote {len(eps)} episodes to {args.out}")


def cmd_train(args):
    cfg = _config(args)
    if args.epochs is not None:
        cfg.train["epochs"] = args.epochs
    TrainConfig.from_dict(cfg.train)
    ds = experiment.build_dataset(cfg, _load_episodes(args.data))
    params, hist = experiment.train_variant(args.variant, cfg, ds)
    out = Path(args.out)
    save_model(params, out / f"{args.variant}.json")
    hist.to_csv(out / f"{args.variant}_history.csv")
    ev = evaluate(params, ds.test[0], cfg.train.get("washout", 20))
    print(f"{args.variant}: test FIT {ev['fit_overall']:.2f}% "
          f"(channels {', '.join(f'{x:.2f}' for x in ev['fit_channels'])}), "
          f"residual {params.training_meta['nu_residual']:.5f}")


def cmd_certify(args):
    params = load_model(args.model)
    cert = certify(params)
    probe = lyapunov_probe(params, n_samples=args.probe_samples, seed=args.seed or 0)
    cert.probe_violations, cert.probe_max_violation = probe.violations, probe.max_violation
    if params.is_control_affine:
        cert.extra["eps_star"] = imc.verify_assumption3(
            params, n_starts=args.starts, n_screen=args.screen, seed=args.seed or 0).eps_star
    text = json.dumps(cert.to_dict(), indent=2, sort_keys=True, default=float)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)


def _reference(args, loop):
    if args.reference:
        t, Y = imc.load_reference_csv(args.reference)
        duration = args.duration or len(t)
        if duration > len(t):
            Y = np.vstack([Y, np.tile(Y[-1], (duration - len(t), 1))])
        return Y[:duration], duration
    sched = experiment.reference_schedule(loop)
    duration = args.duration or loop.duration
    return sched, duration


def _plant(args, params, y0, u0):
    if args.plant == "model":
        sc = params.scalers
        from .model import constant_state
        return imc.ModelPlant(params, constant_state(params, sc.norm_y(y0), sc.norm_u(u0)))
    return imc.TankPlant(y0)


def _loop_start(ref):
    y0 = ref[0][1] if isinstance(ref, list) else ref[0]
    return np.asarray(y0, float)


def cmd_run_imc(args):
    cfg = _config(args)
    params = load_model(args.model)
    margin = imc.verify_assumption3(params, n_starts=args.starts, n_screen=args.screen,
                                    seed=args.seed or 0, strict=True)
    ref, duration = _reference(args, cfg.loop)
    y0 = _loop_start(ref)
    u0 = np.array(args.u0 if args.u0 else cfg.loop.setpoints[0], float)
    ctrl = imc.IMCController(params, tau_r=cfg.loop.tau_r, tau_m=cfg.loop.tau_m,
                             eps_star=margin.eps_star)
    rec = imc.run_closed_loop(_plant(args, params, y0, u0), ctrl, ref, duration, args.noise,
                              args.seed or 0, u0_raw=u0,
                              feasibility_check=mpc.feasibility_advisor(params))
    rec.to_csv(args.out)
    rmse = experiment.tracking_rmse(rec)
    print(f"IMC: rmse {', '.join(f'{x:.4f}' for x in rmse)} cm, "
          f"median latency {np.median(rec.latency_us):.1f} us -> {args.out}")


def cmd_run_mpc(args):
    cfg = _config(args)
    params = load_model(args.model)
    ref, duration = _reference(args, cfg.loop)
    y0 = _loop_start(ref)
    u0 = np.array(args.u0 if args.u0 else cfg.loop.setpoints[0], float)
    fc = mpc.FhocpConfig(N_p=args.horizon, Q=args.q or cfg.loop.Q, R=args.r or cfg.loop.R,
                         mu_T=args.mu_t, max_iter=args.max_iter)
    ctrl = mpc.MPCController(params, fc, tau_r=cfg.loop.tau_r)
    rec = mpc.run_closed_loop(_plant(args, params, y0, u0), ctrl, ref, duration, args.noise,
                              args.seed or 0, u0_raw=u0)
    rec.to_csv(args.out)
    rmse = experiment.tracking_rmse(rec)
    print(f"MPC: rmse {', '.join(f'{x:.4f}' for x in rmse)} cm, "
          f"median latency {np.median(rec.latency_us) / 1e3:.2f} ms -> {args.out}")


def cmd_compare(args):
    records = {}
    for item in args.records:
        name, _, path = item.partition("=")
        if not path:
            name, path = Path(item).stem, item
        records[name] = imc.LoopRecord.from_csv(path)
    out = Path(args.out)
    report = experiment.compare(records, out, out)
    plotting.closed_loop(records, out / "closed_loop.png")
    plotting.latency_histogram({k: r.latency_us for k, r in records.items()}, out / "latency_histogram.png")
    print((out / "compare.md").read_text())
    print((out / "latency.md").read_text())
    return report


def cmd_reproduce_all(args):
    cfg = _config(args)
    manifest = experiment.reproduce_all(cfg, args.out)
    print((Path(args.out) / "report.md").read_text())
    print(f"manifest digest {manifest['digest']}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment configuration JSON")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", required=True, help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cannarx", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="simulate identification episodes")
    s.add_argument("--duration", type=int)
    s.add_argument("--n-episodes", type=int)
    s.add_argument("--noise-sigma", type=float)
    s.add_argument("--quick", action="store_true")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", parents=[common], help="train one model variant")
    s.add_argument("--data", required=True, help="directory of episode files")
    s.add_argument("--variant", choices=experiment.VARIANTS, default="diss-ca-nnarx")
    s.add_argument("--epochs", type=int)
    s.add_argument("--quick", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("certify", parents=[common], help="stability certificate and probes")
    s.add_argument("--model", required=True)
    s.add_argument("--probe-samples", type=int, default=100_000)
    s.add_argument("--starts", type=int, default=512)
    s.add_argument("--screen", type=int, default=1_000_000)
    s.set_defaults(func=cmd_certify, config=None)

    for name, func in (("run-imc", cmd_run_imc), ("run-mpc", cmd_run_mpc)):
        s = sub.add_parser(name, parents=[common], help=f"closed loop with {name[4:].upper()}")
        s.add_argument("--model", required=True)
        s.add_argument("--reference", help="CSV with header t,y1_ref,...")
        s.add_argument("--duration", type=int)
        s.add_argument("--noise", type=float, default=0.0)
        s.add_argument("--plant", choices=("tank", "model"), default="tank")
        s.add_argument("--u0", type=float, nargs=2, help="initial voltages")
        s.add_argument("--quick", action="store_true")
        if name == "run-imc":
            s.add_argument("--starts", type=int, default=512)
            s.add_argument("--screen", type=int, default=1_000_000)
        else:
            s.add_argument("--horizon", type=int, default=10)
            s.add_argument("--q", type=float, nargs="+")
            s.add_argument("--r", type=float, nargs="+")
            s.add_argument("--mu-t", type=float, default=1e3)
            s.add_argument("--max-iter", type=int, default=200)
        s.set_defaults(func=func)

    s = sub.add_parser("compare", parents=[common], help="tables and figures from loop records")
    s.add_argument("records", nargs="+", help="NAME=PATH or PATH of loop-record CSVs")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("reproduce-all", parents=[common], help="run the whole pipeline")
    s.add_argument("--quick", action="store_true", help="small preset for smoke runs")
    s.set_defaults(func=cmd_reproduce_all)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, FileNotFoundError, ModelFileError, imc.AssumptionViolation,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (experiment.StageError, TrainingDivergedError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
