"""End-to-end pipeline: data, training, certification, closed loops and reports.

Everything written under the output directory is a deterministic function of
the configuration, except the files under ``timing/`` which hold wall-clock
latencies. The manifest hashes every deterministic file.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import imc, mpc, plotting
from .model import ModelParameters, init_cannarx, init_nnarx, nnarx_width_for, rescale_norm_products, save_model
from .plant import LEVEL_MAX, VOLTAGE_MAX, Episode, generate_episode, make_dataset, steady_state
from .stability import certify, lyapunov_probe
from .training import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

VARIANTS = ("diss-ca-nnarx", "ca-nnarx", "nnarx")
LABELS = {"diss-ca-nnarx": "dISS CA-NNARX", "ca-nnarx": "CA-NNARX", "nnarx": "NNARX"}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


# --------------------------------------------------------------------------- configuration


@dataclass
class DataConfig:
    n_episodes: int = 7
    duration: int = 3000
    noise_sigma: float = 0.05
    n_levels: int = 7
    dwell_range: tuple = (30, 120)
    bounds: tuple = ((1.0, 11.0), (1.0, 11.0))
    T_sub: int = 150
    n_train: int | None = 735
    n_val: int | None = 142


@dataclass
class LoopConfig:
    setpoints: tuple = ((5.0, 5.0), (6.0, 4.5), (4.5, 6.5), (5.5, 5.5))
    dwell: int = 150
    tau_r: float = 12.0
    tau_m: float = 12.0
    noise_sigma: float = 0.05
    noise_seeds: tuple = (0, 1, 2)
    N_p: int = 10
    Q: tuple = (5.0, 5.0, 5.0, 5.0)
    R: tuple = (0.1, 0.1)
    mu_T: float = 1e3
    mpc_max_iter: int = 200

    @property
    def duration(self) -> int:
        return self.dwell * len(self.setpoints)


@dataclass
class ExperimentConfig:
    seed: int = 7
    data: DataConfig = field(default_factory=DataConfig)
    train: dict = field(default_factory=lambda: {"epochs": 300, "lr": 3e-3})
    loop: LoopConfig = field(default_factory=LoopConfig)
    variants: tuple = VARIANTS
    init_products: dict = field(default_factory=lambda: {"f": 0.25, "g": 0.1, "nnarx": 0.35})
    gain_starts: int = 512
    gain_screen: int = 1_000_000
    probe_samples: int = 100_000

    @classmethod
    def quick(cls, seed: int = 7) -> "ExperimentConfig":
        """Small preset exercising every stage in well under a minute."""
        return cls(seed=seed,
                   data=DataConfig(n_episodes=3, duration=600, T_sub=60, n_train=40, n_val=10),
                   train={"epochs": 3, "lr": 3e-3, "batch_size": 20},
                   loop=LoopConfig(setpoints=((5.0, 5.0), (6.0, 4.5)), dwell=30, noise_seeds=(0,),
                                   mpc_max_iter=20),
                   gain_starts=16, gain_screen=10_000, probe_samples=2_000)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        base = cls.quick(d.get("seed", 7)) if d.pop("preset", None) == "quick" else cls()
        for f in fields(cls):
            if f.name not in d:
                continue
            val = d[f.name]
            if f.name in ("data", "loop"):
                sub = getattr(base, f.name)
                known = {k for k in sub.__dataclass_fields__}
                unknown = set(val) - known
                if unknown:
                    raise ValueError(f"unknown {f.name} keys: {sorted(unknown)}")
                val = type(sub)(**{**asdict(sub), **{k: _tuplify(v) for k, v in val.items()}})
            elif f.name == "train":
                val = {**base.train, **val}
                TrainConfig.from_dict(val)
            elif f.name == "variants":
                bad = set(val) - set(VARIANTS)
                if bad:
                    raise ValueError(f"unknown variants {sorted(bad)}")
                val = tuple(val)
            setattr(base, f.name, val)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return base

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


# --------------------------------------------------------------------------- stages


def generate_data(cfg: ExperimentConfig, out_dir=None) -> list:
    """Simulated identification episodes; the last ones become validation and test."""
    d = cfg.data
    eps = [generate_episode(cfg.seed * 1000 + i, d.duration, n_levels=d.n_levels,
                            dwell_range=d.dwell_range, bounds=d.bounds, noise_sigma=d.noise_sigma)
           for i in range(d.n_episodes)]
    if out_dir is not None:
        for i, ep in enumerate(eps):
            ep.save(Path(out_dir) / f"episode_{i:02d}")
    return eps


def build_dataset(cfg: ExperimentConfig, episodes):
    n = len(episodes)
    if n < 3:
        raise ValueError("need at least three episodes (train, validation, test)")
    split = ((n - 2) / n, 1 / n, 1 / n)
    return make_dataset(episodes, cfg.data.T_sub, split, cfg.data.n_train, cfg.data.n_val)


def initial_model(variant: str, seed: int, products: dict | None = None) -> ModelParameters:
    """Random initial weights, rescaled so the stability bound starts satisfied."""
    products = products or {"f": 0.25, "g": 0.1, "nnarx": 0.35}
    if variant in ("diss-ca-nnarx", "ca-nnarx"):
        p = init_cannarx(seed=seed)
        return rescale_norm_products(p, products["f"], products["g"])
    if variant == "nnarx":
        ref = init_cannarx(seed=seed).n_params()
        w = nnarx_width_for(ref, 5, 2, 4)
        return rescale_norm_products(init_nnarx(widths=(w, w), seed=seed), products["nnarx"])
    raise ValueError(f"unknown variant {variant!r}")


def train_variant(variant: str, cfg: ExperimentConfig, dataset, seed: int | None = None):
    seed = cfg.seed if seed is None else seed
    tc = TrainConfig.from_dict({**cfg.train, "seed": seed,
                                "enforce_diss": variant == "diss-ca-nnarx"})
    p0 = initial_model(variant, seed, cfg.init_products)
    params, history = train(tc, dataset, p0)
    params.training_meta["variant"] = variant
    return params, history


def reference_schedule(loop: LoopConfig):
    """Piecewise-constant level setpoints: plant steady states of the listed voltages."""
    return [(i * loop.dwell, steady_state(V)) for i, V in enumerate(loop.setpoints)]


def run_imc_loop(params, loop: LoopConfig, noise_sigma: float = 0.0, seed: int = 0,
                 advisor: bool = False):
    sched = reference_schedule(loop)
    plant = imc.TankPlant(sched[0][1])
    ctrl = imc.IMCController(params, tau_r=loop.tau_r, tau_m=loop.tau_m)
    check = mpc.feasibility_advisor(params) if advisor else None
    return imc.run_closed_loop(plant, ctrl, sched, loop.duration, noise_sigma, seed,
                               u0_raw=np.array(loop.setpoints[0]), feasibility_check=check)


def run_mpc_loop(params, loop: LoopConfig, noise_sigma: float = 0.0, seed: int = 0):
    sched = reference_schedule(loop)
    plant = imc.TankPlant(sched[0][1])
    fc = mpc.FhocpConfig(N_p=loop.N_p, Q=loop.Q, R=loop.R, mu_T=loop.mu_T,
                         max_iter=loop.mpc_max_iter)
    ctrl = mpc.MPCController(params, fc, tau_r=loop.tau_r)
    return mpc.run_closed_loop(plant, ctrl, sched, loop.duration, noise_sigma, seed,
                               u0_raw=np.array(loop.setpoints[0]))


# --------------------------------------------------------------------------- metrics


def tracking_rmse(rec: imc.LoopRecord) -> np.ndarray:
    """Per-channel RMSE (cm) of ``y[k+1] - r[k]``."""
    e = rec.tracking_error()
    return np.sqrt(np.mean(e * e, axis=0))


def tracking_variance(rec: imc.LoopRecord) -> float:
    """Mean over channels of the tracking-error variance (cm^2)."""
    return float(np.mean(np.var(rec.tracking_error(), axis=0)))


def violations(rec: imc.LoopRecord) -> dict:
    return {"input": int(np.count_nonzero((rec.u < 0.0) | (rec.u > VOLTAGE_MAX))),
            "level": int(np.count_nonzero((rec.y < 0.0) | (rec.y > LEVEL_MAX)))}


def latency_stats(rec: imc.LoopRecord) -> dict:
    lat = np.asarray(rec.latency_us, float) * 1e-6
    return {"mean_s": float(lat.mean()), "median_s": float(np.median(lat)),
            "p99_s": float(np.percentile(lat, 99))}


def compare(records: dict, out_dir=None, timing_dir=None) -> dict:
    """Per-channel RMSE, violation counts and latency statistics per record.

    Deterministic columns go to ``compare.md``/``compare.csv`` in ``out_dir``;
    latencies go to ``latency.md``/``latency.csv`` in ``timing_dir``.
    """
    report = {name: {"rmse_cm": tracking_rmse(r).tolist(), "violations": violations(r),
                     "latency": latency_stats(r)} for name, r in records.items()}
    if out_dir is not None:
        n_y = len(next(iter(report.values()))["rmse_cm"])
        header = ["controller"] + [f"rmse_h{i + 1}_cm" for i in range(n_y)] + [
            "input_violations", "level_violations"]
        rows = [[name] + [_fmt(v) for v in rep["rmse_cm"]]
                + [rep["violations"]["input"], rep["violations"]["level"]]
                for name, rep in report.items()]
        _write_table(Path(out_dir) / "compare", header, rows)
    if timing_dir is not None:
        header = ["controller", "mean_s", "median_s", "p99_s"]
        rows = [[name, _fmt(rep["latency"]["mean_s"]), _fmt(rep["latency"]["median_s"]),
                 _fmt(rep["latency"]["p99_s"])] for name, rep in report.items()]
        _write_table(Path(timing_dir) / "latency", header, rows)
    return report


def _fmt(v) -> str:
    return f"{float(v):.6g}"


def _write_table(stem: Path, header, rows):
    stem.parent.mkdir(parents=True, exist_ok=True)
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    stem.with_suffix(".md").write_text(markdown_table(header, rows))


def markdown_table(header, rows) -> str:
    lines = ["| " + " | ".join(map(str, header)) + " |",
             "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(map(str, r)) + " |" for r in rows]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- pipeline


def reproduce_all(cfg: ExperimentConfig, out_dir) -> dict:
    """Run every stage and write the artifact tree; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timing = out / "timing"
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    with _stage("gen-data"):
        episodes = generate_data(cfg, out / "data")
        dataset = build_dataset(cfg, episodes)
        test = dataset.test[0]

    models, fits = {}, {}
    with _stage("train"):
        for v in cfg.variants:
            params, hist = train_variant(v, cfg, dataset)
            models[v] = params
            save_model(params, out / "models" / f"{v}.json")
            hist.to_csv(out / "models" / f"{v}_history.csv")
            ev = evaluate(params, test, cfg.train.get("washout", 20))
            fits[v] = ev
            _save_prediction(out / "models" / f"{v}_test_prediction.csv", test, ev["y_hat"])

    with _stage("certify"):
        certs = {}
        for v, p in models.items():
            c = certify(p)
            pr = lyapunov_probe(p, n_samples=cfg.probe_samples, seed=cfg.seed)
            c.probe_violations, c.probe_max_violation = pr.violations, pr.max_violation
            if p.is_control_affine:
                gm = imc.verify_assumption3(p, n_starts=cfg.gain_starts, n_screen=cfg.gain_screen,
                                            seed=cfg.seed)
                c.extra["eps_star"] = gm.eps_star
            certs[v] = c
            _dump_json(out / "certificates" / f"{v}.json", c.to_dict())

    loops = {}
    with _stage("run-imc"):
        for v in ("diss-ca-nnarx", "ca-nnarx"):
            if v not in models:
                continue
            tag = "certified" if v == "diss-ca-nnarx" else "uncertified"
            loops[f"imc-{tag}"] = run_imc_loop(models[v], cfg.loop)
        noisy = {}
        for v in ("diss-ca-nnarx", "ca-nnarx"):
            if v not in models:
                continue
            noisy[v] = [run_imc_loop(models[v], cfg.loop, cfg.loop.noise_sigma, s)
                        for s in cfg.loop.noise_seeds]

    with _stage("run-mpc"):
        if "diss-ca-nnarx" in models:
            loops["mpc-certified"] = run_mpc_loop(models["diss-ca-nnarx"], cfg.loop)

    with _stage("compare"):
        for name, rec in loops.items():
            rec.to_csv(out / "loops" / f"{name}.csv", include_latency=False)
            rec.to_csv(timing / f"{name}.csv", include_latency=True)
        for v, recs in noisy.items():
            for s, rec in zip(cfg.loop.noise_seeds, recs):
                rec.to_csv(out / "loops" / f"imc-{v}-noise-s{s}.csv", include_latency=False)
        table3 = compare(loops, out / "tables", timing)
        _fit_table(out / "tables" / "table2_fit", fits)
        noise_rows = _noise_table(out / "tables" / "noise_variance", noisy, cfg.loop.noise_seeds)
        plotting.validation_curves({v: out / "models" / f"{v}_history.csv" for v in models},
                                   out / "figures" / "validation_loss.png")
        plotting.open_loop_prediction(test, {v: fits[v]["y_hat"] for v in models},
                                      out / "figures" / "open_loop_prediction.png")
        plotting.closed_loop({k: v for k, v in loops.items()}, out / "figures" / "closed_loop.png")
        plotting.latency_histogram({k: v.latency_us for k, v in loops.items()},
                                   timing / "latency_histogram.png")
        _write_report(out / "report.md", cfg, fits, certs, table3, noise_rows)

    manifest = build_manifest(out)
    _dump_json(out / "manifest.json", manifest)
    return manifest


class _stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, f"{type(exc).__name__}: {exc}") from exc
        return False


def _dump_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")


def _save_prediction(path: Path, ep: Episode, y_hat):
    path.parent.mkdir(parents=True, exist_ok=True)
    n_y = ep.y.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"y{i + 1}" for i in range(n_y)] + [f"yhat{i + 1}" for i in range(n_y)])
        for t, y, yh in zip(ep.t, ep.y, y_hat):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in np.concatenate([y, yh])])


def _fit_table(stem: Path, fits: dict):
    header = ["model", "fit_h1", "fit_h2", "fit_h3", "fit_h4", "fit_overall"]
    rows = [[LABELS[v]] + [f"{x:.2f}" for x in ev["fit_channels"]] + [f"{ev['fit_overall']:.2f}"]
            for v, ev in fits.items()]
    _write_table(stem, header, rows)


def _noise_table(stem: Path, noisy: dict, seeds):
    header = ["model"] + [f"variance_seed{s}" for s in seeds] + ["median"]
    rows = []
    for v, recs in noisy.items():
        var = [tracking_variance(r) for r in recs]
        rows.append([LABELS[v]] + [_fmt(x) for x in var] + [_fmt(np.median(var))])
    _write_table(stem, header, rows)
    return rows


def _write_report(path: Path, cfg, fits, certs, table3, noise_rows):
    parts = ["# Reproduction report", "",
             f"Seed {cfg.seed}; {cfg.data.n_episodes} episodes of {cfg.data.duration} samples; "
             f"{cfg.train.get('epochs')} training epochs.", "",
             "## Open-loop FIT on the test episode (%)", ""]
    header = ["model", "h1", "h2", "h3", "h4", "overall"]
    parts.append(markdown_table(header, [[LABELS[v]] + [f"{x:.2f}" for x in ev["fit_channels"]]
                                         + [f"{ev['fit_overall']:.2f}"] for v, ev in fits.items()]))
    parts += ["## Certificates", ""]
    rows = [[LABELS[v], f"{c.nu:.6f}", c.verdict, c.probe_violations,
             _fmt(c.extra["eps_star"]) if "eps_star" in c.extra else "-"] for v, c in certs.items()]
    parts.append(markdown_table(["model", "residual", "verdict", "probe violations", "input gain margin"],
                                rows))
    parts += ["## Closed-loop tracking RMSE (cm)", ""]
    rows = [[name] + [f"{x:.4f}" for x in rep["rmse_cm"]]
            + [rep["violations"]["input"], rep["violations"]["level"]] for name, rep in table3.items()]
    parts.append(markdown_table(["controller", "h1", "h2", "h3", "h4", "input viol.", "level viol."],
                                rows))
    parts += ["## Tracking-error variance under output noise (cm^2)", ""]
    parts.append(markdown_table(["model"] + [f"seed {s}" for s in cfg.loop.noise_seeds] + ["median"],
                                noise_rows))
    parts += ["Latency statistics are in `timing/latency.md` (wall-clock, not reproducible).", ""]
    path.write_text("\n".join(parts))


def build_manifest(out: Path) -> dict:
    """SHA-256 of every deterministic artifact (everything outside ``timing/``)."""
    files = {}
    for p in sorted(out.rglob("*")):
        rel = p.relative_to(out).as_posix()
        if p.is_dir() or rel == "manifest.json" or rel.startswith("timing/"):
            continue
        files[rel] = hashlib.sha256(p.read_bytes()).hexdigest()
    digest = hashlib.sha256(json.dumps(files, sort_keys=True).encode()).hexdigest()
    return {"files": files, "digest": digest}
