"""Internal model control with the explicit control-affine inverse."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import (ModelParameters, constant_state, eval_g, mlp_np, model_step, output,
                    shift_np)
from .plant import LEVEL_MAX, NOMINAL, TankParams, step as tank_step

log = logging.getLogger(__name__)


class AssumptionViolation(RuntimeError):
    """The input-gain network gets arbitrarily close to zero on the state box."""


# --------------------------------------------------------------------------- filters


@dataclass
class FilterState:
    """Unit-gain first-order low-pass filter discretised with a zero-order hold."""

    tau: float
    dt: float = 1.0
    state: np.ndarray | None = None

    @property
    def a(self) -> float:
        return float(np.exp(-self.dt / self.tau)) if self.tau > 0 else 0.0

    def reset(self, value):
        self.state = np.array(value, dtype=float)


def filter_step(fs: FilterState, value) -> np.ndarray:
    value = np.asarray(value, dtype=float)
    if fs.state is None:
        fs.state = np.zeros_like(value)
    fs.state = fs.a * fs.state + (1.0 - fs.a) * value
    return fs.state.copy()


# --------------------------------------------------------------------------- input-gain margin


@dataclass
class GainMargin:
    eps_star: float
    per_channel: np.ndarray
    argmin: np.ndarray
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.eps_star > self.tolerance


def _g_channel(params, x, j):
    return ad.take(eval_g(params, x), (Ellipsis, j))


def verify_assumption3(params: ModelParameters, n_starts: int = 512, n_screen: int = 1_000_000,
                       tolerance: float = 1e-3, iters: int = 100, seed: int = 0,
                       strict: bool = False) -> GainMargin:
    """Smallest ``|g_j(x)|`` over the normalized state box, per input channel.

    A random screen seeds a multi-start local search: projected Gauss-Newton
    steps towards ``g_j = 0`` with per-start step halving, accepting only
    improvements. The returned value is an upper estimate of the true infimum
    that is attained at a point inside the box.
    """
    rng = np.random.default_rng(seed)
    n, n_u = params.n, params.n_u
    mins = np.full(n_u, np.inf)
    argmins = np.zeros((n_u, n))
    screen_best = [[] for _ in range(n_u)]
    chunk = 100_000
    done = 0
    while done < n_screen:
        m = min(chunk, n_screen - done)
        X = rng.uniform(-1.0, 1.0, (m, n))
        G = np.abs(eval_g(params, X))
        for j in range(n_u):
            k = min(n_starts // 2, m)
            idx = np.argpartition(G[:, j], k - 1)[:k]
            screen_best[j].append((G[idx, j], X[idx]))
        done += m
    for j in range(n_u):
        vals = np.concatenate([v for v, _ in screen_best[j]])
        pts = np.concatenate([p for _, p in screen_best[j]])
        keep = np.argsort(vals)[: n_starts // 2]
        starts = np.vstack([pts[keep], rng.uniform(-1.0, 1.0, (n_starts - len(keep), n))])
        x = starts
        gx = np.abs(eval_g(params, x)[:, j])
        t = np.ones(len(x))
        for _ in range(iters):
            # rows are independent, so the gradient of the sum is the per-row gradient
            _, J = ad.value_and_grad(lambda v: ad.total(_g_channel(params, v, j)), x)
            gval = eval_g(params, x)[:, j]
            nrm = np.sum(J * J, axis=1)
            d = -(gval / np.maximum(nrm, 1e-300))[:, None] * J
            cand = np.clip(x + t[:, None] * d, -1.0, 1.0)
            gc = np.abs(eval_g(params, cand)[:, j])
            better = gc < gx
            x = np.where(better[:, None], cand, x)
            gx = np.where(better, gc, gx)
            t = np.where(better, np.minimum(1.0, 2.0 * t), 0.5 * t)
            if np.all(t < 1e-12):
                break
        i = int(np.argmin(gx))
        mins[j], argmins[j] = gx[i], x[i]
    result = GainMargin(float(mins.min()), mins, argmins, tolerance)
    if strict and not result.ok:
        raise AssumptionViolation(
            f"input gain margin {result.eps_star:.3g} not above tolerance {tolerance:g}")
    return result


def sigmoid_gain_lower_bound(params: ModelParameters) -> float:
    """Analytic lower bound on ``min_j g_j`` for a sigmoid output layer.

    The previous layer output lies in (-1, 1) when it is a tanh layer and in
    the state box otherwise, so each pre-activation is at least
    ``b_j - ||U_M[j]||_1``.
    """
    last = params.g_layers[-1]
    if last.activation != "sigmoid":
        raise ValueError("bound only applies to a sigmoid output layer")
    pre = np.asarray(last.b) - np.sum(np.abs(np.asarray(last.W)), axis=1)
    return float(np.min(1.0 / (1.0 + np.exp(-pre))))


# --------------------------------------------------------------------------- control law


def imc_control(params: ModelParameters, x, r, U0_pinv=None, saturate: bool = True):
    """Explicit inverse ``Sat(diag(g(x))^-1 U0^+ (r - W0 f(x)))`` in normalized units."""
    if U0_pinv is None:
        U0_pinv = np.linalg.pinv(params.U0)
    x = np.asarray(x, dtype=float)
    return _inverse(params, U0_pinv, mlp_np(params.f_layers, x), mlp_np(params.g_layers, x),
                    np.asarray(r, dtype=float), saturate)


def _inverse(params, U0_pinv, fx, gx, r, saturate=True):
    u = (U0_pinv @ (r - params.W0 @ fx)) / gx
    return np.clip(u, -1.0, 1.0) if saturate else u


@dataclass
class IMCController:
    """IMC loop around a trained model; works in raw plant units at its boundary."""

    params: ModelParameters
    tau_r: float = 12.0
    tau_m: float = 12.0
    dt: float = 1.0
    eps_star: float | None = None
    U0_pinv: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.params.is_control_affine:
            raise ValueError("IMC needs a control-affine model")
        if self.eps_star is not None and self.eps_star <= 0:
            raise AssumptionViolation("input gain margin must be positive before deployment")
        self.U0_pinv = np.linalg.pinv(self.params.U0)
        self.F_r = FilterState(self.tau_r, self.dt)
        self.F_m = FilterState(self.tau_m, self.dt)
        self.x = None

    def reset(self, y0_raw, u0_raw, x0=None):
        sc = self.params.scalers
        y0, u0 = sc.norm_y(y0_raw), sc.norm_u(u0_raw)
        self.x = constant_state(self.params, y0, u0) if x0 is None else np.array(x0, float)
        self.F_r.reset(y0)
        self.F_m.reset(np.zeros(self.params.n_y))

    def model_output_raw(self):
        return self.params.scalers.denorm_y(output(self.x, self.params.n_y, self.params.n_u))

    def step(self, y_meas_raw, y_ref_raw):
        """One control step; returns ``(u_raw, filtered_reference_raw, y_hat_raw)``."""
        sc = self.params.scalers
        y_hat = output(self.x, self.params.n_y, self.params.n_u)
        e = sc.norm_y(y_meas_raw) - y_hat
        e_f = filter_step(self.F_m, e)
        ref_f = filter_step(self.F_r, sc.norm_y(y_ref_raw))
        p = self.params
        fx, gx = mlp_np(p.f_layers, self.x), mlp_np(p.g_layers, self.x)
        u = _inverse(p, self.U0_pinv, fx, gx, ref_f - e_f)
        self.x = shift_np(self.x, p.W0 @ fx + p.U0 @ (gx * u), u)
        return sc.denorm_u(u), sc.denorm_y(ref_f), sc.denorm_y(y_hat)


# --------------------------------------------------------------------------- plants


class TankPlant:
    """Quadruple-tank simulator behind a measure/apply interface."""

    n_u, n_y = 2, 4

    def __init__(self, h0, dt: float = 1.0, params: TankParams = NOMINAL):
        self.h = np.clip(np.asarray(h0, dtype=float), 0.0, LEVEL_MAX)
        self.dt, self.params = dt, params

    def measure(self, rng=None, sigma: float = 0.0):
        if sigma > 0:
            return np.clip(self.h + rng.standard_normal(4) * sigma, 0.0, LEVEL_MAX)
        return self.h.copy()

    def apply(self, V):
        self.h = tank_step(self.h, np.clip(V, 0.0, 15.0), self.dt, self.params)


class ModelPlant:
    """A trained model used as the plant (raw units at the boundary)."""

    def __init__(self, params: ModelParameters, x0):
        self.params = params
        self.x = np.array(x0, dtype=float)
        self.n_u, self.n_y = params.n_u, params.n_y

    def measure(self, rng=None, sigma: float = 0.0):
        y = self.params.scalers.denorm_y(output(self.x, self.params.n_y, self.params.n_u))
        if sigma > 0:
            y = y + rng.standard_normal(self.n_y) * sigma
        return y

    def apply(self, u_raw):
        u = self.params.scalers.norm_u(u_raw)
        self.x, _ = model_step(self.params, self.x, u)


# --------------------------------------------------------------------------- closed loop


@dataclass
class LoopRecord:
    """Per-step log. Row ``k`` holds the measurement ``y[k]`` taken before ``u[k]``."""

    t: np.ndarray
    yo: np.ndarray
    r: np.ndarray
    u: np.ndarray
    y: np.ndarray
    yhat: np.ndarray
    latency_us: np.ndarray
    iterations: np.ndarray | None = None
    advisories: list = field(default_factory=list)

    def tracking_error(self) -> np.ndarray:
        """``y[k+1] - r[k]``: output against the filtered reference it was steered to."""
        return self.y[1:] - self.r[:-1]

    def to_csv(self, path, include_latency: bool = True):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        n_y, n_u = self.y.shape[1], self.u.shape[1]
        header = (["k", "t"] + [f"yo{i + 1}" for i in range(n_y)] + [f"r{i + 1}" for i in range(n_y)]
                  + [f"u{i + 1}" for i in range(n_u)] + [f"y{i + 1}" for i in range(n_y)]
                  + [f"yhat{i + 1}" for i in range(n_y)])
        if include_latency:
            header.append("latency_us")
        if self.iterations is not None:
            header.append("iterations")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(len(self.t)):
                row = [k, repr(float(self.t[k]))]
                row += [repr(float(v)) for v in
                        np.concatenate([self.yo[k], self.r[k], self.u[k], self.y[k], self.yhat[k]])]
                if include_latency:
                    row.append(repr(float(self.latency_us[k])))
                if self.iterations is not None:
                    row.append(int(self.iterations[k]))
                w.writerow(row)
        return path

    @classmethod
    def from_csv(cls, path) -> "LoopRecord":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        cols = {name: data[:, i] for i, name in enumerate(header)}

        def grab(prefix):
            names = sorted((h for h in header if h.startswith(prefix) and h[len(prefix):].isdigit()),
                           key=lambda h: int(h[len(prefix):]))
            return np.column_stack([cols[h] for h in names])

        lat = cols.get("latency_us", np.zeros(len(data)))
        it = cols.get("iterations")
        return cls(cols["t"], grab("yo"), grab("r"), grab("u"), grab("y"), grab("yhat"), lat,
                   None if it is None else it.astype(int))


def reference_at(schedule, k: int):
    """Value of a piecewise-constant schedule ``[(k_start, y_ref), ...]`` at sample k."""
    current = schedule[0][1]
    for k0, val in schedule:
        if k >= k0:
            current = val
    return np.asarray(current, dtype=float)


def run_closed_loop(plant, controller: IMCController, reference, duration: int,
                    noise_sigma: float = 0.0, seed: int = 0, u0_raw=None,
                    feasibility_check=None) -> LoopRecord:
    """Run the IMC loop for ``duration`` samples.

    ``reference`` is an array (duration, n_y) of raw setpoints or a
    piecewise-constant schedule ``[(k_start, y_ref), ...]``. The controller is
    reset to the plant's first measurement with input ``u0_raw``.
    ``feasibility_check(y_ref_raw)`` may return an advisory string that is
    logged whenever the setpoint changes.
    """
    rng = np.random.default_rng(seed)
    n_y, n_u = controller.params.n_y, controller.params.n_u
    ref = _reference_array(reference, duration, n_y)
    if u0_raw is None:
        u0_raw = controller.params.scalers.denorm_u(np.zeros(n_u))
    y = plant.measure(rng, noise_sigma)
    controller.reset(y, u0_raw)
    rec = _empty_record(duration, n_y, n_u, controller.dt)
    last_ref = None
    for k in range(duration):
        if feasibility_check is not None and (last_ref is None or np.any(ref[k] != last_ref)):
            msg = feasibility_check(ref[k])
            if msg:
                log.warning("k=%d: %s", k, msg)
                rec.advisories.append((k, msg))
            last_ref = ref[k]
        t0 = time.perf_counter_ns()
        u, rf, yh = controller.step(y, ref[k])
        rec.latency_us[k] = (time.perf_counter_ns() - t0) / 1e3
        rec.yo[k], rec.r[k], rec.u[k], rec.y[k], rec.yhat[k] = ref[k], rf, u, y, yh
        plant.apply(u)
        y = plant.measure(rng, noise_sigma)
    return rec


def _reference_array(reference, duration, n_y):
    if isinstance(reference, (list, tuple)) and reference and isinstance(reference[0], tuple):
        return np.array([reference_at(reference, k) for k in range(duration)])
    ref = np.asarray(reference, dtype=float)
    if ref.ndim == 1:
        ref = np.tile(ref, (duration, 1))
    if ref.shape != (duration, n_y):
        raise ValueError(f"reference must have shape ({duration}, {n_y})")
    return ref


def _empty_record(duration, n_y, n_u, dt):
    return LoopRecord(np.arange(duration) * dt, np.zeros((duration, n_y)), np.zeros((duration, n_y)),
                      np.zeros((duration, n_u)), np.zeros((duration, n_y)), np.zeros((duration, n_y)),
                      np.zeros(duration))


def load_reference_csv(path) -> np.ndarray:
    """Reference schedule file with header ``t,y1_ref,...``; returns (t, Y)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1:]


def save_reference_csv(path, t, Y):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"y{i + 1}_ref" for i in range(Y.shape[1])])
        for ti, yi in zip(t, Y):
            w.writerow([repr(float(ti))] + [repr(float(v)) for v in yi])
    return path
