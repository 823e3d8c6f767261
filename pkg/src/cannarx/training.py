"""Truncated-BPTT training of CA-NNARX and NNARX models."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import ModelParameters, channel_fits, fit_index, simulate_open_loop
from .plant import Dataset, Episode
from .stability import diss_residual, diss_residual_traced, regularizer

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    lr_final: float = 1e-5
    washout: int = 20
    seed: int = 0
    pi_plus: float = 0.035
    pi_minus: float = 1e-4
    eps: float = 0.02
    enforce_diss: bool = True
    patience: int | None = None
    clip_norm: float | None = 10.0
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.washout < 0:
            raise ValueError("washout must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def simulation_mse(params: ModelParameters, u, y, x0, washout: int):
    """Mean over sequences and steps ``k >= washout`` of ``||y_hat_k - y_k||^2``.

    Traceable: with traced ``params`` the result is a :class:`~cannarx.autodiff.Var`.
    """
    u, y = np.asarray(u, float), np.asarray(y, float)
    B, T = y.shape[0], y.shape[1]
    if washout >= T:
        raise ValueError("washout must be shorter than the subsequence")
    outs = simulate_open_loop(params, x0, u)
    if isinstance(outs, list):
        acc = None
        for k in range(washout, T):
            e = ad.sq_error(outs[k], y[:, k, :])
            acc = e if acc is None else ad.add(acc, e)
        return ad.scale(acc, 1.0 / (B * (T - washout)))
    d = outs[:, washout:, :] - y[:, washout:, :]
    return float(np.sum(d * d) / (B * (T - washout)))


def loss(params: ModelParameters, u, y, x0, config: TrainConfig, pi_states: dict | None = None):
    """Simulation MSE plus, when ``enforce_diss``, the stability regularizer."""
    mse = simulation_mse(params, u, y, x0, config.washout)
    if not config.enforce_diss:
        return mse
    nu = diss_residual_traced(params, pi_states)
    return ad.add(mse, regularizer(nu, config.pi_plus, config.pi_minus, config.eps))


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def update(self, arrays: dict, grads: dict, lr: float) -> dict:
        self.t += 1
        out = {}
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, w in arrays.items():
            g = grads[k]
            m = self.m.get(k, 0.0) * self.b1 + (1.0 - self.b1) * g
            v = self.v.get(k, 0.0) * self.b2 + (1.0 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = w - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def cosine_lr(config: TrainConfig, step: int, total: int) -> float:
    frac = min(step / max(total, 1), 1.0)
    return config.lr_final + 0.5 * (config.lr - config.lr_final) * (1.0 + math.cos(math.pi * frac))


@dataclass
class History:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_mse", "nu"])
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[k])) for k in ("train_loss", "val_mse", "nu")])


def validation_mse(params: ModelParameters, u, y, washout: int) -> float:
    """Simulation MSE from the zero initial state."""
    if len(u) == 0:
        return float("nan")
    x0 = np.zeros((len(u), params.n))
    return simulation_mse(params, u, y, x0, washout)


def train(config: TrainConfig, dataset: Dataset, params: ModelParameters):
    """Train ``params`` on ``dataset``; returns ``(best_params, history)``.

    The best checkpoint is the one with the lowest validation MSE; when
    ``enforce_diss`` is set only checkpoints with a negative residual are
    eligible (the final iterate is returned if none ever was).
    """
    rng = np.random.default_rng(config.seed)
    params = params.with_arrays({k: np.array(v, dtype=float) for k, v in params.to_arrays().items()})
    params.scalers = dataset.scalers
    N = len(dataset.train_u)
    n_batches = max(1, math.ceil(N / config.batch_size))
    total_steps = config.epochs * n_batches
    opt = Adam(config.beta1, config.beta2)
    pi_states: dict = {}
    history = History()
    best, best_val, since_best = None, np.inf, 0
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(N)
        losses = []
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            x0 = rng.uniform(-1.0, 1.0, (len(idx), params.n))
            value, grads = ad.value_and_grad(
                loss, params, dataset.train_u[idx], dataset.train_y[idx], x0, config, pi_states)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b}")
            garr = grads.to_arrays()
            if config.clip_norm is not None:
                gn = math.sqrt(sum(float(np.sum(g * g)) for g in garr.values()))
                if gn > config.clip_norm:
                    garr = {k: g * (config.clip_norm / gn) for k, g in garr.items()}
            params = params.with_arrays(
                opt.update(params.to_arrays(), garr, cosine_lr(config, step, total_steps)))
            step += 1
            losses.append(value)
        nu = diss_residual(params)
        val = validation_mse(params, dataset.val_u, dataset.val_y, config.washout)
        history.append(epoch=epoch, train_loss=float(np.mean(losses)), val_mse=val, nu=nu)
        if not np.isfinite(val):
            raise TrainingDivergedError(f"non-finite validation MSE at epoch {epoch}")
        eligible = nu < 0 or not config.enforce_diss
        if eligible and val < best_val:
            best, best_val, since_best = params, val, 0
        else:
            since_best += 1
        log.debug("epoch %d loss %.3e val %.3e nu %.4f", epoch, losses[-1], val, nu)
        if config.patience is not None and best is not None and since_best >= config.patience:
            break
    chosen = best if best is not None else params
    chosen.training_meta = {"nu_residual": float(diss_residual(chosen)), "epochs": epoch,
                            "seed": config.seed, "best_val_mse": float(best_val),
                            "config": asdict(config)}
    return chosen, history


def evaluate(params: ModelParameters, episodes, washout: int = 20) -> dict:
    """Open-loop metrics on full episodes (raw units for FIT, normalized for MSE)."""
    if isinstance(episodes, Episode):
        episodes = [episodes]
    results = []
    for ep in episodes:
        sc = params.scalers
        un, yn = sc.norm_u(ep.u), sc.norm_y(ep.y)
        yh_n = simulate_open_loop(params, np.zeros(params.n), un)
        yh = sc.denorm_y(yh_n)
        d = yh_n[washout:] - yn[washout:]
        fits = channel_fits(yh, ep.y, washout)
        results.append({"mse": float(np.mean(np.sum(d * d, axis=1))),
                        "fit_channels": fits.tolist(),
                        "fit_overall": float(np.mean(fits)),
                        "fit_vector": fit_index(yh, ep.y, washout),
                        "y_hat": yh})
    if len(results) == 1:
        return results[0]
    return {"mse": float(np.mean([r["mse"] for r in results])),
            "fit_channels": np.mean([r["fit_channels"] for r in results], axis=0).tolist(),
            "fit_overall": float(np.mean([r["fit_overall"] for r in results])),
            "fit_vector": float(np.mean([r["fit_vector"] for r in results])),
            "y_hat": [r["y_hat"] for r in results]}
