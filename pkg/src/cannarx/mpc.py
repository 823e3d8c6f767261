"""Nonlinear MPC baseline: equilibrium targets and single-shooting FHOCP."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .imc import LoopRecord, FilterState, _empty_record, _reference_array, filter_step
from .model import (ModelParameters, advance_state, constant_state, eta, eta_jacobians, eta_np,
                    output, shift_np)

log = logging.getLogger(__name__)


class InfeasibleReference(ValueError):
    """No admissible input reproduces the requested output at equilibrium."""


@dataclass
class FhocpConfig:
    N_p: int = 10
    Q: np.ndarray = field(default_factory=lambda: np.full(4, 5.0))
    R: np.ndarray = field(default_factory=lambda: np.full(2, 0.1))
    mu_T: float = 1e3
    mu_x: float = 1e3
    max_iter: int = 200
    step_tol: float = 1e-6
    armijo_c: float = 1e-4

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float).reshape(-1)
        self.R = np.asarray(self.R, dtype=float).reshape(-1)
        if self.N_p < 1:
            raise ValueError("prediction horizon must be at least 1")
        if np.any(self.Q <= 0) or np.any(self.R <= 0):
            raise ValueError("Q and R diagonals must be positive")
        if self.mu_T < 0 or self.mu_x < 0:
            raise ValueError("penalty weights must be non-negative")


@dataclass
class EquilibriumTriple:
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    residual: float
    iterations: int = 0


def find_equilibrium(params: ModelParameters, y_ref, u_init=None, tol: float = 1e-10,
                     max_iter: int = 50, strict_tol: float | None = None) -> EquilibriumTriple:
    """Input ``u`` in the unit box minimising ``||eta(stack(y_ref, u), u) - y_ref||``.

    Damped Gauss-Newton with projection onto the box and step halving. With
    more outputs than inputs the least-squares solution is returned together
    with its residual; ``strict_tol`` turns a larger residual into
    :class:`InfeasibleReference`.
    """
    y_ref = np.asarray(y_ref, dtype=float)
    u = np.zeros(params.n_u) if u_init is None else np.clip(np.asarray(u_init, float), -1, 1)
    n_y, n_u = params.n_y, params.n_u
    # d stack(y, u) / du: identity on every input slot of the register
    dstack = np.zeros((params.n, n_u))
    for h in range(params.H):
        dstack[h * params.n_z + n_y:(h + 1) * params.n_z] = np.eye(n_u)

    def resid(v):
        return eta_np(params, constant_state(params, y_ref, v), v) - y_ref

    r = resid(u)
    cost = float(r @ r)
    it = 0
    for it in range(1, max_iter + 1):
        _, dx, du = eta_jacobians(params, constant_state(params, y_ref, u), u)
        J = dx @ dstack + du
        A = J.T @ J
        A += 1e-9 * (np.trace(A) / n_u + 1e-12) * np.eye(n_u)
        d = -np.linalg.solve(A, J.T @ r)
        t, accepted = 1.0, False
        while t > 1e-10:
            cand = np.clip(u + t * d, -1.0, 1.0)
            rc = resid(cand)
            cc = float(rc @ rc)
            if cc < cost:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        change = np.linalg.norm(cand - u)
        u, r, cost = cand, rc, cc
        if np.sqrt(cost) <= tol or change <= 1e-14:
            break
    res = float(np.sqrt(cost))
    if strict_tol is not None and res > strict_tol:
        raise InfeasibleReference(f"equilibrium residual {res:.3g} exceeds {strict_tol:g}")
    return EquilibriumTriple(constant_state(params, y_ref, u), u, y_ref, res, it)


def fhocp_cost(U, params: ModelParameters, x0, eq: EquilibriumTriple, cfg: FhocpConfig):
    """Shooting cost of an input sequence ``U`` (N_p, n_u); traceable in ``U``."""
    x = np.asarray(x0, dtype=float)
    J = None
    for i in range(cfg.N_p):
        u = ad.take(U, i)
        ey = ad.sub(output(x, params.n_y, params.n_u), eq.y)
        eu = ad.sub(u, eq.u)
        stage = ad.add(ad.total(ad.mul(ad.mul(ey, ey), cfg.Q)), ad.total(ad.mul(ad.mul(eu, eu), cfg.R)))
        if i > 0 and cfg.mu_x > 0:
            stage = ad.add(stage, ad.scale(_box_excess(x), cfg.mu_x))
        J = stage if J is None else ad.add(J, stage)
        x = advance_state(x, eta(params, x, u), u)
    if cfg.mu_x > 0:
        J = ad.add(J, ad.scale(_box_excess(x), cfg.mu_x))
    if cfg.mu_T > 0:
        J = ad.add(J, ad.scale(ad.sq_error(x, eq.x), cfg.mu_T))
    return J


def _box_excess(x):
    hi = ad.add(ad.maximum(x, 1.0), -1.0)
    lo = ad.add(ad.minimum(x, -1.0), 1.0)
    return ad.add(ad.total(ad.mul(hi, hi)), ad.total(ad.mul(lo, lo)))


def predicted_terminal_state(params: ModelParameters, x0, U) -> np.ndarray:
    x = np.asarray(x0, dtype=float)
    for u in np.asarray(U, dtype=float):
        x = shift_np(x, eta_np(params, x, u), u)
    return x


def fhocp_residuals(params: ModelParameters, x0, U, eq: EquilibriumTriple, cfg: FhocpConfig,
                    jacobian: bool = False):
    """Stacked residual vector whose squared norm is :func:`fhocp_cost`.

    With ``jacobian`` the derivative with respect to ``U`` (flattened row-major)
    is built by forward sensitivity propagation through the register shift.
    """
    n, n_y, n_u, N = params.n, params.n_y, params.n_u, cfg.N_p
    U = np.asarray(U, dtype=float)
    sq, sr = np.sqrt(cfg.Q), np.sqrt(cfg.R)
    smx, smt = np.sqrt(cfg.mu_x), np.sqrt(cfg.mu_T)
    y_sl = slice(n - params.n_z, n - n_u)
    x = np.asarray(x0, dtype=float)
    S = np.zeros((n, N * n_u))
    res, rows = [], []
    for i in range(N + 1):
        if i < N:
            res.append(sq * (x[y_sl] - eq.y))
            res.append(sr * (U[i] - eq.u))
            if jacobian:
                rows.append(sq[:, None] * S[y_sl])
                Ju = np.zeros((n_u, N * n_u))
                Ju[:, i * n_u:(i + 1) * n_u] = np.diag(sr)
                rows.append(Ju)
        if i > 0 and cfg.mu_x > 0:
            res.append(smx * (x - np.clip(x, -1.0, 1.0)))
            if jacobian:
                rows.append(smx * (np.abs(x) > 1.0)[:, None] * S)
        if i == N:
            break
        if jacobian:
            y_next, dx, du = eta_jacobians(params, x, U[i])
            S_next = np.empty_like(S)
            S_next[:n - params.n_z] = S[params.n_z:]
            S_next[y_sl] = dx @ S
            S_next[y_sl, i * n_u:(i + 1) * n_u] += du
            S_next[n - n_u:] = 0.0
            S_next[n - n_u:, i * n_u:(i + 1) * n_u] = np.eye(n_u)
            S = S_next
        else:
            y_next = eta_np(params, x, U[i])
        x = shift_np(x, y_next, U[i])
    if cfg.mu_T > 0:
        res.append(smt * (x - eq.x))
        if jacobian:
            rows.append(smt * S)
    r = np.concatenate(res)
    return (r, np.vstack(rows)) if jacobian else r


@dataclass
class FhocpSolution:
    U: np.ndarray
    cost: float
    iterations: int
    converged: bool
    cost_history: list


def solve_fhocp(params: ModelParameters, x0, eq: EquilibriumTriple, cfg: FhocpConfig,
                U_init=None, method: str = "gauss-newton") -> FhocpSolution:
    """Minimise the shooting cost over the input box.

    ``method="gauss-newton"`` takes projected Gauss-Newton steps on the free
    inputs (those not held at a bound by the gradient) and falls back to a
    projected gradient step when the line search rejects them.
    ``method="gradient"`` uses projected gradient steps only, with a
    Barzilai-Borwein trial length. Both accept a step only under the Armijo
    condition, so the cost history is non-increasing.
    """
    if method not in ("gauss-newton", "gradient"):
        raise ValueError(f"unknown method {method!r}")
    N, n_u = cfg.N_p, params.n_u
    U = np.tile(eq.u, (N, 1)) if U_init is None else np.clip(np.asarray(U_init, float), -1, 1)
    U = U.reshape(-1)

    def cost_of(v):
        r = fhocp_residuals(params, x0, v.reshape(N, n_u), eq, cfg)
        return float(r @ r)

    r, J = fhocp_residuals(params, x0, U.reshape(N, n_u), eq, cfg, jacobian=True)
    cost = float(r @ r)
    history = [cost]
    bb = 1.0
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        g = 2.0 * J.T @ r
        pg = U - np.clip(U - g, -1.0, 1.0)
        if np.linalg.norm(pg) <= cfg.step_tol:
            converged = True
            break
        cand, cc = None, None
        if method == "gauss-newton":
            held = ((U >= 1.0) & (g < 0)) | ((U <= -1.0) & (g > 0))
            free = ~held
            Jf = J[:, free]
            A = Jf.T @ Jf
            A += 1e-10 * (np.trace(A) / max(A.shape[0], 1) + 1e-12) * np.eye(A.shape[0])
            d = np.zeros_like(U)
            d[free] = -np.linalg.solve(A, Jf.T @ r)
            cand, cc = _armijo(cost_of, U, cost, g, d, 1.0, cfg.armijo_c, 30)
        if cand is None:
            cand, cc = _armijo(cost_of, U, cost, g, -g, bb, cfg.armijo_c, 60)
        if cand is None:
            converged = True
            break
        step = cand - U
        r_new, J_new = fhocp_residuals(params, x0, cand.reshape(N, n_u), eq, cfg, jacobian=True)
        dg = 2.0 * J_new.T @ r_new - g
        sy = float(step @ dg)
        bb = float(step @ step) / sy if sy > 1e-16 else 1.0
        U, r, J, cost = cand, r_new, J_new, cc
        history.append(cost)
        if np.linalg.norm(step) <= cfg.step_tol:
            converged = True
            break
    return FhocpSolution(U.reshape(N, n_u), float(cost), it, converged, history)


def _armijo(cost_of, U, cost, g, d, t, c, max_halvings):
    for _ in range(max_halvings):
        cand = np.clip(U + t * d, -1.0, 1.0)
        cc = cost_of(cand)
        if cc <= cost + c * float(g @ (cand - U)):
            return cand, cc
        t *= 0.5
    return None, None


class MPCController:
    """Receding-horizon controller on the measured input/output register."""

    def __init__(self, params: ModelParameters, cfg: FhocpConfig | None = None,
                 tau_r: float = 12.0, dt: float = 1.0):
        if not params.is_control_affine and params.kind != "nnarx":
            raise ValueError("unknown model kind")
        self.params = params
        self.cfg = FhocpConfig() if cfg is None else cfg
        self.F_r = FilterState(tau_r, dt)
        self.dt = dt
        self.x = None
        self.U = None
        self.eq = None

    def reset(self, y0_raw, u0_raw):
        sc = self.params.scalers
        y0, u0 = sc.norm_y(y0_raw), sc.norm_u(u0_raw)
        self.x = constant_state(self.params, y0, u0)
        self.F_r.reset(y0)
        self.U = None
        self.eq = None

    def step(self, y_meas_raw, y_ref_raw):
        """Returns ``(u_raw, filtered_reference_raw, y_hat_raw, iterations)``."""
        sc = self.params.scalers
        p = self.params
        y = sc.norm_y(y_meas_raw)
        # the register's newest output is replaced by the fresh measurement
        n_z = p.n_y + p.n_u
        self.x = self.x.copy()
        self.x[p.n - n_z:p.n - p.n_u] = y
        ref_f = filter_step(self.F_r, sc.norm_y(y_ref_raw))
        self.eq = find_equilibrium(p, ref_f, None if self.eq is None else self.eq.u)
        U_init = None
        if self.U is not None:
            U_init = np.vstack([self.U[1:], self.U[-1:]])
        sol = solve_fhocp(p, self.x, self.eq, self.cfg, U_init)
        self.U = sol.U
        u = sol.U[0]
        x_next = shift_np(self.x, eta_np(p, self.x, u), u)
        y_hat = output(x_next, p.n_y, p.n_u)
        self.x = x_next
        return sc.denorm_u(u), sc.denorm_y(ref_f), sc.denorm_y(y_hat), sol.iterations


def run_closed_loop(plant, controller: MPCController, reference, duration: int,
                    noise_sigma: float = 0.0, seed: int = 0, u0_raw=None) -> LoopRecord:
    """MPC counterpart of :func:`cannarx.imc.run_closed_loop` (same record layout).

    ``yhat`` holds the model's one-step prediction for the next sample.
    """
    rng = np.random.default_rng(seed)
    n_y, n_u = controller.params.n_y, controller.params.n_u
    ref = _reference_array(reference, duration, n_y)
    if u0_raw is None:
        u0_raw = controller.params.scalers.denorm_u(np.zeros(n_u))
    y = plant.measure(rng, noise_sigma)
    controller.reset(y, u0_raw)
    rec = _empty_record(duration, n_y, n_u, controller.dt)
    rec.iterations = np.zeros(duration, dtype=int)
    for k in range(duration):
        t0 = time.perf_counter_ns()
        u, rf, yh, iters = controller.step(y, ref[k])
        rec.latency_us[k] = (time.perf_counter_ns() - t0) / 1e3
        rec.yo[k], rec.r[k], rec.u[k], rec.y[k], rec.yhat[k] = ref[k], rf, u, y, yh
        rec.iterations[k] = iters
        plant.apply(u)
        y = plant.measure(rng, noise_sigma)
    return rec


def feasibility_advisor(params: ModelParameters, residual_tol: float = 0.05, margin: float = 1e-6):
    """Callable for the IMC runner flagging setpoints whose steady input saturates."""
    sc = params.scalers

    def check(y_ref_raw):
        eq = find_equilibrium(params, sc.norm_y(y_ref_raw))
        issues = []
        if np.any(np.abs(eq.u) >= 1.0 - margin):
            issues.append("steady input saturates")
        if eq.residual > residual_tol:
            issues.append(f"equilibrium residual {eq.residual:.3g}")
        return "; ".join(issues) + " for setpoint" if issues else None

    return check
