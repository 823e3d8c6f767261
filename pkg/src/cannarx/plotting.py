"""Matplotlib figures for the report (rendered off-screen to PNG)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamp or version strings, so reruns produce identical files
_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def validation_curves(histories: dict, path):
    """Validation MSE per epoch, one line per model (history CSV paths)."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, csv_path in histories.items():
        data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        ax.semilogy(data[:, 0], data[:, 2], label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation MSE")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def open_loop_prediction(episode, predictions: dict, path):
    n_y = episode.y.shape[1]
    fig, axes = plt.subplots(n_y, 1, figsize=(7, 1.8 * n_y), sharex=True)
    for i, ax in enumerate(np.atleast_1d(axes)):
        ax.plot(episode.t, episode.y[:, i], "k-", lw=1, label="plant")
        for name, yh in predictions.items():
            ax.plot(episode.t, yh[:, i], "--", lw=1, label=name)
        ax.set_ylabel(f"h{i + 1} [cm]")
    np.atleast_1d(axes)[0].legend(fontsize=7, ncol=len(predictions) + 1)
    np.atleast_1d(axes)[-1].set_xlabel("t [s]")
    fig.tight_layout()
    return _save(fig, path)


def closed_loop(records: dict, path):
    if not records:
        return None
    first = next(iter(records.values()))
    n_y, n_u = first.y.shape[1], first.u.shape[1]
    fig, axes = plt.subplots(n_y + n_u, 1, figsize=(7, 1.6 * (n_y + n_u)), sharex=True)
    for i in range(n_y):
        axes[i].plot(first.t, first.yo[:, i], "k:", lw=1, label="setpoint")
        for name, rec in records.items():
            axes[i].plot(rec.t, rec.y[:, i], lw=1, label=name)
        axes[i].set_ylabel(f"h{i + 1} [cm]")
    for j in range(n_u):
        for name, rec in records.items():
            axes[n_y + j].step(rec.t, rec.u[:, j], where="post", lw=1, label=name)
        axes[n_y + j].set_ylabel(f"V{j + 1} [V]")
    axes[0].legend(fontsize=7)
    axes[-1].set_xlabel("t [s]")
    fig.tight_layout()
    return _save(fig, path)


def latency_histogram(latencies_us: dict, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, lat in latencies_us.items():
        lat = np.asarray(lat, float) * 1e-6
        bins = np.logspace(np.log10(max(lat.min(), 1e-7)), np.log10(lat.max() * 1.01 + 1e-12), 30)
        ax.hist(lat, bins=bins, density=True, alpha=0.6, label=name)
    ax.set_xscale("log")
    ax.set_xlabel("per-step computation time [s]")
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
