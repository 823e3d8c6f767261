"""Acceptance suite: one test per primary criterion at its stated tolerance.

Trained models are cached under ``.acceptance_cache/`` keyed by the experiment
configuration and the source of the modules that determine training, so only
the first run pays the full training cost (nine models of roughly four
minutes each on one core).
"""

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

import cannarx
from cannarx import autodiff as ad
from cannarx import cli, experiment, imc, model, plant, stability, training
from conftest import ACCEPTANCE_LINES
from fdcheck import central_diff, rel_err

pytestmark = pytest.mark.acceptance

ROOT = Path(__file__).resolve().parents[1]
CACHE = ROOT / ".acceptance_cache"
TRAIN_SEEDS = (7, 8, 9)


def report(n: int, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


# --------------------------------------------------------------------------- shared models


def _source_digest() -> str:
    h = hashlib.sha256()
    for name in ("autodiff", "plant", "model", "stability", "training", "experiment"):
        h.update((Path(cannarx.__file__).parent / f"{name}.py").read_bytes())
    return h.hexdigest()[:16]


class TrainedModels:
    def __init__(self):
        self.cfg = experiment.ExperimentConfig()
        self.episodes = experiment.generate_data(self.cfg)
        self.dataset = experiment.build_dataset(self.cfg, self.episodes)
        self.test = self.dataset.test[0]
        self._key = hashlib.sha256(json.dumps(
            [self.cfg.to_dict(), _source_digest()], sort_keys=True).encode()).hexdigest()[:16]
        self._models = {}

    def get(self, variant: str, seed: int) -> model.ModelParameters:
        if (variant, seed) not in self._models:
            path = CACHE / self._key / f"{variant}_s{seed}.json"
            if path.exists():
                p = model.load_model(path)
            else:
                p, _ = experiment.train_variant(variant, self.cfg, self.dataset, seed)
                model.save_model(p, path)
            self._models[variant, seed] = p
        return self._models[variant, seed]

    def fit(self, variant: str, seed: int) -> float:
        ev = training.evaluate(self.get(variant, seed), self.test, self.cfg.train.get("washout", 20))
        return ev["fit_overall"]


@pytest.fixture(scope="session")
def trained():
    return TrainedModels()


# --------------------------------------------------------------------------- 1


PRIMITIVES = {
    "matvec": lambda x: ad.total(ad.matvec(np.arange(12.0).reshape(3, 4) / 10, x)),
    "affine": lambda x: ad.total(ad.tanh(ad.affine(np.ones((3, 4)) * 0.3, x, np.array([0.1, -0.2, 0.3])))),
    "add": lambda x: ad.total(ad.mul(ad.add(x, 1.5), x)),
    "sub": lambda x: ad.total(ad.mul(ad.sub(x, 0.3), ad.sub(0.7, x))),
    "mul": lambda x: ad.total(ad.mul(x, ad.mul(x, x))),
    "neg": lambda x: ad.total(ad.mul(ad.neg(x), x)),
    "scale": lambda x: ad.total(ad.scale(ad.mul(x, x), -2.5)),
    "tanh": lambda x: ad.total(ad.tanh(x)),
    "sigmoid": lambda x: ad.total(ad.sigmoid(ad.scale(x, 3.0))),
    "concat": lambda x: ad.total(ad.mul(ad.concat([x, ad.tanh(x)]), np.arange(8.0))),
    "take": lambda x: ad.total(ad.mul(ad.take(x, slice(1, 3)), x[:2] + 1)),
    "sq_error": lambda x: ad.sq_error(ad.tanh(x), np.full(4, 0.2)),
    "maximum": lambda x: ad.total(ad.mul(ad.maximum(x, 0.05), x)),
    "minimum": lambda x: ad.total(ad.mul(ad.minimum(x, 0.05), x)),
    "spectral_norm": lambda x: ad.spectral_norm(ad.mul(np.outer([1.0, 2.0, -1.0], [1.0, 0.5, 0.2, -0.3]), x),
                                                n_iter=500),
}


def test_criterion_01_gradient_correctness():
    t0 = time.perf_counter()
    x = np.array([0.31, -0.72, 0.18, 0.93])
    worst = {}
    for name, fn in PRIMITIVES.items():
        _, g = ad.value_and_grad(fn, x)
        worst[name] = rel_err(g, central_diff(lambda v: float(np.asarray(fn(v))), x))

    # 150-step rollout: a sample of entries from every parameter tensor, plus
    # random directions over the full parameter vector
    eps = [plant.generate_episode(s, 400, noise_sigma=0.05) for s in range(3)]
    ds = plant.make_dataset(eps, 150, split=(1 / 3, 1 / 3, 1 / 3), n_train=2, n_val=1)
    p = model.rescale_norm_products(model.init_cannarx(seed=1), 0.3, 0.1)
    x0 = np.random.default_rng(0).uniform(-1, 1, (1, p.n))
    cfg = training.TrainConfig(washout=20)
    states = {}
    args = (ds.train_u[:1], ds.train_y[:1], x0, cfg, states)
    for _ in range(60):  # converge the warm-started power iterations
        training.loss(p, *args)
    _, g = ad.value_and_grad(training.loss, p, *args)
    arrays, grads = p.to_arrays(), g.to_arrays()
    rng = np.random.default_rng(1)
    h = 1e-6
    an, fd = [], []
    for k, v in arrays.items():
        flat = v.reshape(-1)
        for i in rng.choice(flat.size, size=min(flat.size, 25), replace=False):
            def at(t):
                w = flat.copy()
                w[i] += t
                return float(training.loss(p.with_arrays({**arrays, k: w.reshape(v.shape)}), *args))
            an.append(grads[k].reshape(-1)[i])
            fd.append((at(h) - at(-h)) / (2 * h))
    worst["rollout (entries)"] = rel_err(np.array(an), np.array(fd))
    for j in range(3):
        d = {k: rng.normal(size=v.shape) for k, v in arrays.items()}

        def along(t):
            return float(training.loss(p.with_arrays({k: v + t * d[k] for k, v in arrays.items()}), *args))
        dd = (along(h) - along(-h)) / (2 * h)
        worst[f"rollout (direction {j})"] = abs(sum(float(np.sum(grads[k] * d[k])) for k in d) - dd) / abs(dd)
    elapsed = time.perf_counter() - t0
    m = max(worst.values())
    report(1, m < 1e-5 and elapsed < 60,
           f"max relative error {m:.2e} over {len(worst)} checks in {elapsed:.1f} s")


# --------------------------------------------------------------------------- 2


def test_criterion_02_spectral_norm_vs_svd():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        m, n = rng.integers(1, 31, size=2)
        W = rng.normal(size=(m, n))
        sigma, _, _ = ad.power_iteration(W, max_iter=100_000, tol=1e-15)
        worst = max(worst, abs(sigma - np.linalg.svd(W, compute_uv=False)[0]))
    report(2, worst < 1e-8, f"max |power iteration - SVD| = {worst:.2e} on 1000 matrices")


# --------------------------------------------------------------------------- 3


def test_criterion_03_residual_arithmetic():
    errs = []
    for H in (1, 2, 4, 5, 9):
        p = model.init_cannarx(H=H)
        p = p.with_arrays({k: np.zeros_like(v) for k, v in p.to_arrays().items()})
        errs.append(abs(stability.diss_residual(p) + 1 / np.sqrt(H)))
    from test_stability import one_layer_model
    worked = stability.diss_residual(one_layer_model(0.4, 0.5, 0.5, 0.3))
    ok = max(errs) == 0.0 and abs(worked + 0.15) < 1e-12
    report(3, ok, f"zero-weight error {max(errs):.1e}, worked example {worked:.15f}")


# --------------------------------------------------------------------------- 4


def test_criterion_04_stability_certificate_is_valid(trained):
    models = [("trained", trained.get("diss-ca-nnarx", TRAIN_SEEDS[0]))]
    models += [(f"random s{s}", model.rescale_norm_products(model.init_cannarx(seed=s), pf, pg))
               for s, pf, pg in ((0, 0.3, 0.1), (1, 0.4, 0.03), (2, 0.1, 0.3))]
    t0 = time.perf_counter()  # training time is not part of the budget
    lines, ok = [], True
    for name, p in models:
        nu = stability.diss_residual(p)
        assert nu < 0, name
        probe = stability.lyapunov_probe(p, n_samples=100_000, seed=1, tol=1e-9)
        gaps = stability.paired_trajectory_gap(p, steps=1000, n_pairs=8, seed=1)
        late = float(gaps[:, 500:].max())
        ok &= probe.violations == 0 and not probe.report_only and late < 1e-6
        lines.append(f"{name}: {probe.violations} violations, max gap(k>=500) {late:.1e}")
    elapsed = time.perf_counter() - t0
    report(4, ok and elapsed < 300, "; ".join(lines) + f" ({elapsed:.0f} s)")


# --------------------------------------------------------------------------- 5


def test_criterion_05_fit_ordering(trained):
    ca = [trained.fit("diss-ca-nnarx", s) for s in TRAIN_SEEDS]
    nn = [trained.fit("nnarx", s) for s in TRAIN_SEEDS]
    ok = min(ca) >= 80.0 and np.median(nn) < np.median(ca)
    report(5, ok, f"dISS CA-NNARX FIT {', '.join(f'{v:.2f}' for v in ca)} (median {np.median(ca):.2f}); "
                  f"NNARX {', '.join(f'{v:.2f}' for v in nn)} (median {np.median(nn):.2f})")


# --------------------------------------------------------------------------- 6


def test_criterion_06_imc_exactness(trained):
    from test_imc import square_model
    p = square_model()
    p.scalers = plant.Scalers.identity(2, 2)
    y0, u0 = np.zeros(2), np.zeros(2)
    sched = [(0, np.array([0.15, -0.1])), (100, np.array([-0.1, 0.2])), (200, np.array([0.05, 0.05]))]
    rec = imc.run_closed_loop(imc.ModelPlant(p, model.constant_state(p, y0, u0)), imc.IMCController(p),
                              sched, 300, u0_raw=u0)
    unsat = np.all(np.abs(rec.u[:-1]) < 1.0, axis=1)
    synth = float(np.max(np.abs(rec.tracking_error()[unsat])))

    loop = trained.cfg.loop
    rec = experiment.run_imc_loop(trained.get("diss-ca-nnarx", TRAIN_SEEDS[0]), loop)
    offsets = []
    for i in range(len(loop.setpoints)):
        end = (i + 1) * loop.dwell
        offsets.append(np.abs(rec.y[end - 10:end].mean(axis=0) - rec.yo[end - 1]))
    tank = float(np.max(offsets))
    report(6, synth < 1e-9 and tank < 0.1,
           f"synthetic tracking error {synth:.1e}; tank steady-state offset {tank:.2e} cm")


# --------------------------------------------------------------------------- 7


def test_criterion_07_imc_versus_mpc(trained):
    p = trained.get("diss-ca-nnarx", TRAIN_SEEDS[0])
    loop = trained.cfg.loop
    r_imc = experiment.run_imc_loop(p, loop)
    r_mpc = experiment.run_mpc_loop(p, loop)
    rm_i, rm_m = experiment.tracking_rmse(r_imc), experiment.tracking_rmse(r_mpc)
    ratio = np.median(r_mpc.latency_us) / np.median(r_imc.latency_us)
    viol = [experiment.violations(r) for r in (r_imc, r_mpc)]
    clean = all(v == {"input": 0, "level": 0} for v in viol)
    ok = bool(np.all(rm_i <= rm_m)) and ratio >= 100 and clean
    report(7, ok, f"RMSE IMC {np.round(rm_i, 4).tolist()} vs MPC {np.round(rm_m, 4).tolist()} cm; "
                  f"latency ratio {ratio:.0f}x; violations {viol}")


# --------------------------------------------------------------------------- 8


def test_criterion_08_certified_model_is_less_noise_sensitive(trained):
    loop = trained.cfg.loop
    cert, unc = [], []
    for i, s in enumerate(TRAIN_SEEDS):
        cert.append(experiment.tracking_variance(
            experiment.run_imc_loop(trained.get("diss-ca-nnarx", s), loop, loop.noise_sigma, i)))
        unc.append(experiment.tracking_variance(
            experiment.run_imc_loop(trained.get("ca-nnarx", s), loop, loop.noise_sigma, i)))
    ok = np.median(cert) <= np.median(unc)
    report(8, ok, f"tracking-error variance median certified {np.median(cert):.4g} cm^2 "
                  f"vs uncertified {np.median(unc):.4g} cm^2")


# --------------------------------------------------------------------------- 9


def test_criterion_09_gain_verifier():
    p = model.init_cannarx(H=1, n_u=1, n_y=1, g_widths=(), seed=0)
    p.g_layers[-1].W = np.array([[1.0, 0.0]])
    p.g_layers[-1].b = np.array([-0.3])
    zero = imc.verify_assumption3(p).eps_star
    q = model.init_cannarx(g_final="sigmoid", seed=4)
    bound = imc.sigmoid_gain_lower_bound(q)
    eps = imc.verify_assumption3(q).eps_star
    report(9, zero < 1e-3 and eps >= bound,
           f"interior zero gives {zero:.1e}; sigmoid model {eps:.4f} >= bound {bound:.4f}")


# --------------------------------------------------------------------------- 10


def test_criterion_10_determinism(tmp_path, capsys):
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli.main(["reproduce-all", "--quick", "--seed", "7", "--out", str(out)]) == 0
        outs.append(out)
    capsys.readouterr()
    ma, mb = (json.loads((o / "manifest.json").read_text()) for o in outs)
    same_report = (outs[0] / "report.md").read_bytes() == (outs[1] / "report.md").read_bytes()
    report(10, same_report and ma == mb,
           f"{len(ma['files'])} artifacts, digests {ma['digest'][:12]} / {mb['digest'][:12]}")
