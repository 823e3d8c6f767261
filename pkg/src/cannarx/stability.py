"""Incremental ISS residual, training regularizer, certificates and probes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import ModelParameters, model_step


def _norm2(W) -> float:
    return float(np.linalg.norm(np.asarray(W, dtype=float), 2))


def norm_products(params: ModelParameters, norm=_norm2) -> tuple[float, float]:
    """``(||W0|| prod L_i ||W_i||, ||U0|| prod L~_j ||U_j||)``.

    For a plain NNARX the second term is zero.
    """
    pf = norm(params.W0)
    for layer in params.f_layers:
        pf *= layer.lipschitz * norm(layer.W)
    if not params.is_control_affine:
        return pf, 0.0
    pg = norm(params.U0)
    for layer in params.g_layers:
        pg *= layer.lipschitz * norm(layer.W)
    return pf, pg


def diss_residual(params: ModelParameters, norm=_norm2) -> float:
    """Residual of the sufficient incremental-ISS condition; negative means certified."""
    pf, pg = norm_products(params, norm)
    return float(pf + pg - 1.0 / np.sqrt(params.H))


def diss_residual_traced(params: ModelParameters, states: dict | None = None):
    """Differentiable residual using warm-started power iteration.

    ``states`` maps array names to :class:`~cannarx.autodiff.PowerIterationState`
    and is updated in place so the next call starts from the current vectors.
    """
    states = {} if states is None else states

    def sn(name, W):
        return ad.spectral_norm(W, states.setdefault(name, ad.PowerIterationState()))

    pf = sn("W0", params.W0)
    for i, layer in enumerate(params.f_layers):
        pf = ad.mul(pf, ad.scale(sn(f"f{i}.W", layer.W), layer.lipschitz))
    if not params.is_control_affine:
        return ad.add(pf, -1.0 / np.sqrt(params.H))
    pg = sn("U0", params.U0)
    for j, layer in enumerate(params.g_layers):
        pg = ad.mul(pg, ad.scale(sn(f"g{j}.W", layer.W), layer.lipschitz))
    return ad.add(ad.add(pf, pg), -1.0 / np.sqrt(params.H))


def regularizer(nu, pi_plus: float = 0.035, pi_minus: float = 1e-4, eps: float = 0.02):
    """Piecewise-linear penalty, zero at ``nu = -eps``; traceable."""
    up = ad.add(ad.maximum(nu, -eps), eps)
    down = ad.add(ad.minimum(nu, -eps), eps)
    return ad.add(ad.scale(up, pi_plus), ad.scale(down, pi_minus))


def alpha_constants(pf: float, pg: float, pu0: float, H: int, q):
    """Lyapunov decrease/gain constants for Young parameter ``q``."""
    q = np.asarray(q, dtype=float)
    alpha_x = 1.0 - H * (1.0 + 1.0 / q**2) * (pf + pg) ** 2
    alpha_u = H * (1.0 + pu0**2 * (1.0 + q**2))
    return alpha_x, alpha_u


@dataclass
class Certificate:
    nu: float
    norms: dict
    H: int
    verdict: str
    alpha_x: float | None = None
    alpha_u: float | None = None
    q: float | None = None
    probe_violations: int | None = None
    probe_max_violation: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def certified(self) -> bool:
        return self.verdict == "certified"

    def to_dict(self) -> dict:
        d = {"nu": self.nu, "norms": self.norms, "H": self.H, "verdict": self.verdict,
             "alpha_x": self.alpha_x, "alpha_u": self.alpha_u, "q": self.q,
             "probe_violations": self.probe_violations,
             "probe_max_violation": self.probe_max_violation}
        d.update(self.extra)
        return d


def default_q_grid() -> np.ndarray:
    return np.logspace(-1, 3, 200)


def certify(params: ModelParameters, q_grid=None) -> Certificate:
    """A-posteriori certificate with exact singular values.

    When certified, picks the grid value of ``q`` maximising ``alpha_x``.
    """
    norms = {k: _norm2(v) for k, v in params.to_arrays().items() if k.endswith("W") or k in ("W0", "U0")}
    nu = diss_residual(params)
    cert = Certificate(nu=float(nu), norms=norms, H=params.H,
                       verdict="certified" if nu < 0 else "not-certified")
    if nu < 0:
        q = default_q_grid() if q_grid is None else np.asarray(q_grid, float)
        pf, pg = norm_products(params)
        pu0 = _norm2(params.U0) if params.is_control_affine else 0.0
        ax, au = alpha_constants(pf, pg, pu0, params.H, q)
        i = int(np.argmax(ax))
        cert.alpha_x, cert.alpha_u, cert.q = float(ax[i]), float(au[i]), float(q[i])
    return cert


def lyapunov_increment(params: ModelParameters, xa, xb, ua, ub) -> np.ndarray:
    """``V(x_a+, x_b+) - V(x_a, x_b)`` with ``P = diag(1, ..., H) (x) I``."""
    w = np.repeat(np.arange(1, params.H + 1, dtype=float), params.n_z)
    xa_n, _ = model_step(params, xa, ua)
    xb_n, _ = model_step(params, xb, ub)
    d0 = xa - xb
    d1 = xa_n - xb_n
    return np.sum(w * d1 * d1, axis=-1) - np.sum(w * d0 * d0, axis=-1)


@dataclass
class ProbeReport:
    n_samples: int
    violations: int
    max_violation: float
    alpha_x: float | None
    alpha_u: float | None
    report_only: bool


def lyapunov_probe(params: ModelParameters, n_samples: int = 100_000, seed: int = 0,
                   same_input: bool = False, q_grid=None, tol: float = 1e-9,
                   chunk: int = 20_000) -> ProbeReport:
    """Check the Lyapunov decrease bound on random state/input pairs in the unit box.

    A violation is ``dV > -alpha_x |dx|^2 + alpha_u |du|^2 + tol``. For an
    uncertified model the bound is evaluated with ``alpha_x`` from the best grid
    ``q`` anyway (report-only mode).
    """
    rng = np.random.default_rng(seed)
    cert = certify(params, q_grid)
    if cert.certified:
        ax, au = cert.alpha_x, cert.alpha_u
    else:
        q = default_q_grid() if q_grid is None else np.asarray(q_grid, float)
        pf, pg = norm_products(params)
        pu0 = _norm2(params.U0) if params.is_control_affine else 0.0
        axs, aus = alpha_constants(pf, pg, pu0, params.H, q)
        i = int(np.argmax(axs))
        ax, au = float(axs[i]), float(aus[i])
    violations, worst = 0, -np.inf
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        xa = rng.uniform(-1, 1, (m, params.n))
        xb = rng.uniform(-1, 1, (m, params.n))
        ua = rng.uniform(-1, 1, (m, params.n_u))
        ub = ua.copy() if same_input else rng.uniform(-1, 1, (m, params.n_u))
        dV = lyapunov_increment(params, xa, xb, ua, ub)
        bound = -ax * np.sum((xa - xb) ** 2, axis=1) + au * np.sum((ua - ub) ** 2, axis=1)
        excess = dV - bound
        violations += int(np.count_nonzero(excess > tol))
        worst = max(worst, float(excess.max()))
        done += m
    return ProbeReport(n_samples, violations, worst, ax, au, not cert.certified)


def paired_trajectory_gap(params: ModelParameters, steps: int = 1000, seed: int = 0,
                          n_pairs: int = 8, u_seq=None) -> np.ndarray:
    """``||x_a,k - x_b,k||`` for pairs of random initial states under shared inputs.

    Returns an array (n_pairs, steps + 1). Inputs are uniform in the unit box
    unless ``u_seq`` (steps, n_u) is given.
    """
    rng = np.random.default_rng(seed)
    xa = rng.uniform(-1, 1, (n_pairs, params.n))
    xb = rng.uniform(-1, 1, (n_pairs, params.n))
    if u_seq is None:
        u_seq = rng.uniform(-1, 1, (steps, params.n_u))
    gaps = np.empty((n_pairs, steps + 1))
    gaps[:, 0] = np.linalg.norm(xa - xb, axis=1)
    for k in range(steps):
        u = np.broadcast_to(u_seq[k], (n_pairs, params.n_u))
        xa, _ = model_step(params, xa, u)
        xb, _ = model_step(params, xb, u)
        gaps[:, k + 1] = np.linalg.norm(xa - xb, axis=1)
    return gaps
