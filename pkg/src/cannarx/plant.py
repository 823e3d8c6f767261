"""Quadruple-tank simulator, excitation signals and identification datasets.

Levels are in cm, pump voltages in V, time in s. Tanks 3 and 4 are the upper
tanks draining into tanks 1 and 2 respectively.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

LEVEL_MAX = 25.0
VOLTAGE_MAX = 15.0


@dataclass(frozen=True)
class TankParams:
    a_out: tuple = (0.1781, 0.1781, 0.1781, 0.1781)
    S: float = 15.5179
    gamma_a: float = 0.36
    gamma_b: float = 0.36
    kappa_a: float = 3.3
    kappa_b: float = 3.3
    g_grav: float = 981.0

    def __post_init__(self):
        vals = [*self.a_out, self.S, self.kappa_a, self.kappa_b, self.g_grav]
        if len(self.a_out) != 4 or min(vals) <= 0:
            raise ValueError("tank parameters must be strictly positive")
        if not (0 < self.gamma_a < 1 and 0 < self.gamma_b < 1):
            raise ValueError("flow split ratios must lie in (0, 1)")


NOMINAL = TankParams()


def rhs(h, V, params: TankParams = NOMINAL) -> np.ndarray:
    """Level derivatives dh/dt for levels ``h`` (4,) and voltages ``V`` (2,)."""
    h = np.asarray(h, dtype=float)
    V = np.asarray(V, dtype=float)
    a = np.asarray(params.a_out)
    out = a / params.S * np.sqrt(2.0 * params.g_grav * np.maximum(h, 0.0))
    qa = params.kappa_a * V[..., 0]
    qb = params.kappa_b * V[..., 1]
    S = params.S
    return np.stack([
        -out[..., 0] + out[..., 2] + params.gamma_a / S * qa,
        -out[..., 1] + out[..., 3] + params.gamma_b / S * qb,
        -out[..., 2] + (1.0 - params.gamma_b) / S * qb,
        -out[..., 3] + (1.0 - params.gamma_a) / S * qa,
    ], axis=-1)


def step(h, V, dt: float = 1.0, params: TankParams = NOMINAL, dt_int: float = 0.1) -> np.ndarray:
    """Advance the levels by ``dt`` seconds with fixed-step RK4, then saturate.

    The input is held constant over the interval. ``dt_int`` is the internal
    substep; the number of substeps is ``ceil(dt / dt_int)``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = max(1, int(np.ceil(dt / dt_int - 1e-12)))
    hs = dt / n
    x = np.asarray(h, dtype=float)
    V = np.asarray(V, dtype=float)
    for _ in range(n):
        k1 = rhs(x, V, params)
        k2 = rhs(x + 0.5 * hs * k1, V, params)
        k3 = rhs(x + 0.5 * hs * k2, V, params)
        k4 = rhs(x + hs * k3, V, params)
        x = x + hs / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return np.clip(x, 0.0, LEVEL_MAX)


def steady_state(V, params: TankParams = NOMINAL) -> np.ndarray:
    """Head-balance equilibrium levels for constant voltages (not saturated)."""
    V = np.asarray(V, dtype=float)
    a = np.asarray(params.a_out)
    two_g = 2.0 * params.g_grav
    qa, qb = params.kappa_a * V[0], params.kappa_b * V[1]
    q3 = (1.0 - params.gamma_b) * qb
    q4 = (1.0 - params.gamma_a) * qa
    q1 = params.gamma_a * qa + q3
    q2 = params.gamma_b * qb + q4
    return np.array([q1, q2, q3, q4]) ** 2 / (a**2 * two_g)


def simulate(h0, V_seq, dt: float = 1.0, params: TankParams = NOMINAL) -> np.ndarray:
    """Levels at every sample, ``h[k]`` measured before ``V_seq[k]`` is applied."""
    V_seq = np.asarray(V_seq, dtype=float)
    out = np.empty((len(V_seq), 4))
    h = np.clip(np.asarray(h0, dtype=float), 0.0, LEVEL_MAX)
    for k, V in enumerate(V_seq):
        out[k] = h
        h = step(h, V, dt, params)
    return out


# --------------------------------------------------------------------------- signals


def gen_mprs(seed: int, duration: int, n_levels: int = 7, dwell_range=(30, 120),
             bounds=((0.0, VOLTAGE_MAX), (0.0, VOLTAGE_MAX))) -> np.ndarray:
    """Multilevel pseudo-random signal, one independent channel per ``bounds`` entry.

    Each channel holds a level drawn uniformly from ``n_levels`` equispaced
    values in its bounds for a dwell time drawn uniformly (inclusive) from
    ``dwell_range`` samples.
    """
    lo_d, hi_d = int(dwell_range[0]), int(dwell_range[1])
    if lo_d < 1 or hi_d < lo_d:
        raise ValueError(f"empty dwell range {dwell_range!r}")
    if n_levels < 1:
        raise ValueError("n_levels must be positive")
    rng = np.random.default_rng(seed)
    out = np.empty((duration, len(bounds)))
    for c, (lo, hi) in enumerate(bounds):
        if not (0.0 <= lo <= hi <= VOLTAGE_MAX):
            raise ValueError(f"channel {c} bounds {lo, hi} outside actuator limits")
        levels = np.linspace(lo, hi, n_levels) if n_levels > 1 else np.array([0.5 * (lo + hi)])
        k = 0
        while k < duration:
            d = int(rng.integers(lo_d, hi_d + 1))
            out[k:k + d, c] = levels[rng.integers(n_levels)]
            k += d
    return out


def count_switches(signal) -> int:
    """Number of sample-to-sample value changes in any channel."""
    s = np.asarray(signal)
    return int(np.count_nonzero(np.any(s[1:] != s[:-1], axis=-1)))


# --------------------------------------------------------------------------- episodes


@dataclass
class Scalers:
    """Per-channel affine maps between raw units and [-1, 1]."""

    u_min: np.ndarray
    u_max: np.ndarray
    y_min: np.ndarray
    y_max: np.ndarray

    def __post_init__(self):
        for name in ("u_min", "u_max", "y_min", "y_max"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.u_max <= self.u_min) or np.any(self.y_max <= self.y_min):
            raise ValueError("scalers need max > min on every channel")

    @classmethod
    def identity(cls, n_u: int, n_y: int) -> "Scalers":
        return cls(-np.ones(n_u), np.ones(n_u), -np.ones(n_y), np.ones(n_y))

    @classmethod
    def fit(cls, u, y) -> "Scalers":
        u = np.concatenate([np.asarray(a).reshape(-1, np.shape(a)[-1]) for a in u])
        y = np.concatenate([np.asarray(a).reshape(-1, np.shape(a)[-1]) for a in y])
        return cls(u.min(0), u.max(0), y.min(0), y.max(0))

    def norm_u(self, u):
        return 2.0 * (np.asarray(u) - self.u_min) / (self.u_max - self.u_min) - 1.0

    def denorm_u(self, un):
        return self.u_min + 0.5 * (np.asarray(un) + 1.0) * (self.u_max - self.u_min)

    def norm_y(self, y):
        return 2.0 * (np.asarray(y) - self.y_min) / (self.y_max - self.y_min) - 1.0

    def denorm_y(self, yn):
        return self.y_min + 0.5 * (np.asarray(yn) + 1.0) * (self.y_max - self.y_min)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("u_min", "u_max", "y_min", "y_max")}

    @classmethod
    def from_dict(cls, d) -> "Scalers":
        return cls(d["u_min"], d["u_max"], d["y_min"], d["y_max"])


@dataclass
class Episode:
    """One experiment: inputs ``u[k]`` applied after measuring ``y[k]``."""

    dt: float
    t: np.ndarray
    u: np.ndarray
    y: np.ndarray
    scalers: Scalers | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if not (len(self.t) == len(self.u) == len(self.y)):
            raise ValueError("episode series must share their length")

    def __len__(self):
        return len(self.t)

    def with_scalers(self, scalers: Scalers) -> "Episode":
        return Episode(self.dt, self.t, self.u, self.y, scalers, dict(self.config))

    def normalized(self) -> tuple[np.ndarray, np.ndarray]:
        if self.scalers is None:
            raise ValueError("episode has no scalers")
        return self.scalers.norm_u(self.u), self.scalers.norm_y(self.y)

    def save(self, path) -> Path:
        """Write ``<path>.csv`` and the ``<path>.json`` sidecar."""
        path = Path(path).with_suffix("")
        path.parent.mkdir(parents=True, exist_ok=True)
        n_u, n_y = self.u.shape[1], self.y.shape[1]
        header = ",".join(["t"] + [f"u{i + 1}" for i in range(n_u)] + [f"y{i + 1}" for i in range(n_y)])
        rows = np.column_stack([self.t, self.u, self.y])
        with open(path.with_suffix(".csv"), "w") as fh:
            fh.write(header + "\n")
            for r in rows:
                fh.write(",".join(repr(float(v)) for v in r) + "\n")
        meta = {"dt": self.dt, "n_u": n_u, "n_y": n_y,
                "scalers": None if self.scalers is None else self.scalers.to_dict(),
                "config": self.config}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return path.with_suffix(".csv")

    @classmethod
    def load(cls, path) -> "Episode":
        path = Path(path).with_suffix("")
        meta = json.loads(path.with_suffix(".json").read_text())
        data = np.loadtxt(path.with_suffix(".csv"), delimiter=",", skiprows=1, ndmin=2)
        n_u = meta["n_u"]
        sc = meta.get("scalers")
        return cls(meta["dt"], data[:, 0], data[:, 1:1 + n_u], data[:, 1 + n_u:],
                   None if sc is None else Scalers.from_dict(sc), meta.get("config", {}))


def add_output_noise(episode: Episode, sigma, seed: int) -> Episode:
    """Add i.i.d. Gaussian noise to the outputs, truncated to the level box."""
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (episode.y.shape[1],))
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    if not np.any(sigma > 0):
        return Episode(episode.dt, episode.t, episode.u, episode.y.copy(), episode.scalers,
                       dict(episode.config))
    rng = np.random.default_rng(seed)
    y = np.clip(episode.y + rng.standard_normal(episode.y.shape) * sigma, 0.0, LEVEL_MAX)
    cfg = dict(episode.config, noise_sigma=sigma.tolist(), noise_seed=seed)
    return Episode(episode.dt, episode.t, episode.u, y, episode.scalers, cfg)


def generate_episode(seed: int, duration: int, dt: float = 1.0, n_levels: int = 7,
                     dwell_range=(30, 120), bounds=((1.0, 11.0), (1.0, 11.0)),
                     noise_sigma: float = 0.0, h0=None,
                     params: TankParams = NOMINAL) -> Episode:
    """Simulate the tank under an MPRS excitation, optionally with sensor noise.

    Starts from the steady state of the first input sample unless ``h0`` is
    given.
    """
    V = gen_mprs(seed, duration, n_levels, dwell_range, bounds)
    if h0 is None:
        h0 = np.clip(steady_state(V[0], params), 0.0, LEVEL_MAX)
    y = simulate(h0, V, dt, params)
    cfg = {"seed": seed, "duration": duration, "n_levels": n_levels,
           "dwell_range": list(dwell_range), "bounds": [list(b) for b in bounds],
           "noise_sigma": noise_sigma}
    ep = Episode(dt, np.arange(duration) * dt, V, y, None, cfg)
    if noise_sigma > 0:
        ep = add_output_noise(ep, noise_sigma, seed + 1_000_003)
        ep.config["noise_sigma"] = noise_sigma
    return ep


# --------------------------------------------------------------------------- datasets


@dataclass
class Dataset:
    """Normalized TBPTT subsequences plus held-out full test episodes."""

    train_u: np.ndarray
    train_y: np.ndarray
    val_u: np.ndarray
    val_y: np.ndarray
    test: list
    scalers: Scalers
    train_episodes: list = field(default_factory=list)
    val_episodes: list = field(default_factory=list)


def _windows(n_items: int, length: int, T: int, count: int | None, stride: int | None):
    if length < T:
        raise ValueError(f"episode of length {length} shorter than T_sub={T}")
    last = length - T
    if count is not None:
        return np.unique(np.round(np.linspace(0, last, count)).astype(int)) if count > 1 else np.array([0])
    return np.arange(0, last + 1, stride or T)


def make_dataset(episodes, T_sub: int, split=(0.7, 0.15, 0.15), n_train: int | None = None,
                 n_val: int | None = None, stride: int | None = None) -> Dataset:
    """Assign whole episodes to train/val/test and cut TBPTT windows.

    ``split`` gives the fraction of episodes per role (in order); each role
    with a positive fraction receives at least one episode. ``n_train`` and
    ``n_val`` request a number of evenly spaced windows spread over the role's
    episodes; otherwise windows start every ``stride`` samples (default
    ``T_sub``, i.e. non-overlapping). Scalers are fitted on the training
    episodes only.
    """
    episodes = list(episodes)
    if len(split) != 3 or min(split) < 0 or sum(split) > 1.0 + 1e-12:
        raise ValueError(f"invalid or overlapping split request {split!r}")
    n_ep = len(episodes)
    need = [1 if f > 0 else 0 for f in split]
    counts = [max(nd, int(np.floor(f * n_ep + 1e-9))) for f, nd in zip(split, need)]
    while sum(counts) > n_ep:
        i = int(np.argmax(counts))
        if counts[i] <= need[i]:
            raise ValueError("not enough episodes for the requested split")
        counts[i] -= 1
    if counts[0] == 0:
        raise ValueError("training split is empty")
    tr = episodes[:counts[0]]
    va = episodes[counts[0]:counts[0] + counts[1]]
    te = episodes[counts[0] + counts[1]:counts[0] + counts[1] + counts[2]]
    for e in tr + va:
        if len(e) < T_sub:
            raise ValueError(f"episode of length {len(e)} shorter than T_sub={T_sub}")
    scalers = Scalers.fit([e.u for e in tr], [e.y for e in tr])

    def cut(eps, total):
        us, ys = [], []
        if not eps:
            return np.empty((0, T_sub, 0)), np.empty((0, T_sub, 0))
        per = None
        if total is not None:
            base, extra = divmod(total, len(eps))
            per = [base + (1 if i < extra else 0) for i in range(len(eps))]
        for i, e in enumerate(eps):
            un, yn = scalers.norm_u(e.u), scalers.norm_y(e.y)
            starts = _windows(len(eps), len(e), T_sub, None if per is None else per[i], stride)
            for s in starts:
                us.append(un[s:s + T_sub])
                ys.append(yn[s:s + T_sub])
        return np.stack(us), np.stack(ys)

    tu, ty = cut(tr, n_train)
    vu, vy = cut(va, n_val)
    return Dataset(tu, ty, vu, vy, [e.with_scalers(scalers) for e in te], scalers,
                   [e.with_scalers(scalers) for e in tr], [e.with_scalers(scalers) for e in va])
