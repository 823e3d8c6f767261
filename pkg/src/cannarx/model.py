"""Control-affine neural NARX models.

The NARX state stacks the last ``H`` pairs ``z_h = (y, u_prev)`` in
normalized units, oldest first, so the newest output sits in the last block::

    x_k = [y_{k-H+1}, u_{k-H}, ..., y_k, u_{k-1}]

and one model step is ``y_{k+1} = eta(x_k, u_k)`` followed by a register
shift. A plain NNARX baseline (``kind="nnarx"``) feeds ``[x_k, u_k]`` through
a single network instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .plant import Scalers

SCHEMA_VERSION = 1

LIPSCHITZ = {"tanh": 1.0, "sigmoid": 0.25, "identity": 1.0, "linear": 1.0}
ZERO_CENTERED = {"tanh", "identity", "linear"}
BOUNDED = {"tanh", "sigmoid"}


class ModelFileError(ValueError):
    """Model file does not match the schema or its dimensions do not chain."""


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "tanh"

    @property
    def lipschitz(self) -> float:
        return LIPSCHITZ[self.activation]


@dataclass
class ModelParameters:
    """Weights of a CA-NNARX (or plain NNARX) model plus structural metadata."""

    H: int
    n_u: int
    n_y: int
    f_layers: list
    W0: np.ndarray
    g_layers: list = field(default_factory=list)
    U0: np.ndarray | None = None
    scalers: Scalers | None = None
    kind: str = "ca-nnarx"
    training_meta: dict = field(default_factory=dict)

    @property
    def n_z(self) -> int:
        return self.n_u + self.n_y

    @property
    def n(self) -> int:
        return self.H * self.n_z

    @property
    def is_control_affine(self) -> bool:
        return self.kind == "ca-nnarx"

    def to_arrays(self) -> dict:
        out = {}
        for i, layer in enumerate(self.f_layers):
            out[f"f{i}.W"], out[f"f{i}.b"] = layer.W, layer.b
        out["W0"] = self.W0
        for j, layer in enumerate(self.g_layers):
            out[f"g{j}.W"], out[f"g{j}.b"] = layer.W, layer.b
        if self.U0 is not None:
            out["U0"] = self.U0
        return out

    def with_arrays(self, arrays: dict) -> "ModelParameters":
        f = [Layer(arrays[f"f{i}.W"], arrays[f"f{i}.b"], l.activation)
             for i, l in enumerate(self.f_layers)]
        g = [Layer(arrays[f"g{j}.W"], arrays[f"g{j}.b"], l.activation)
             for j, l in enumerate(self.g_layers)]
        return replace(self, f_layers=f, g_layers=g, W0=arrays["W0"],
                       U0=arrays.get("U0", self.U0))

    def n_params(self) -> int:
        return int(sum(np.size(ad.value_of(a)) for a in self.to_arrays().values()))

    def validate(self):
        """Raise :class:`ModelFileError` unless the layer dimensions chain."""
        def chain(layers, width, name):
            if not layers:
                raise ModelFileError(f"{name} needs at least one layer")
            for i, layer in enumerate(layers):
                W, b = np.shape(ad.value_of(layer.W)), np.shape(ad.value_of(layer.b))
                if len(W) != 2 or W[1] != width or b != (W[0],):
                    raise ModelFileError(f"{name} layer {i} dimensions do not chain")
                if layer.activation not in LIPSCHITZ:
                    raise ModelFileError(f"unknown activation {layer.activation!r}")
                width = W[0]
            return width

        in_f = self.n + (0 if self.is_control_affine else self.n_u)
        v = chain(self.f_layers, in_f, "f")
        if np.shape(ad.value_of(self.W0)) != (self.n_y, v):
            raise ModelFileError("W0 shape does not match f output")
        if self.is_control_affine:
            w = chain(self.g_layers, self.n, "g")
            if w != self.n_u:
                raise ModelFileError("g output width must equal n_u")
            if self.g_layers[-1].activation not in BOUNDED:
                raise ModelFileError("g final activation must be tanh or sigmoid")
            if np.shape(ad.value_of(self.U0)) != (self.n_y, self.n_u):
                raise ModelFileError("U0 must be n_y x n_u")
        elif self.kind != "nnarx":
            raise ModelFileError(f"unknown model kind {self.kind!r}")
        return self


# --------------------------------------------------------------------------- construction


def _glorot(rng, n_out, n_in, gain=1.0):
    lim = gain * np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, size=(n_out, n_in))


def init_cannarx(H: int = 5, n_u: int = 2, n_y: int = 4, f_widths=(15, 15), g_widths=(15, 15),
                 g_final: str = "tanh", seed: int = 0, scalers: Scalers | None = None,
                 gain: float = 1.0) -> ModelParameters:
    """Randomly initialised CA-NNARX with tanh hidden layers."""
    rng = np.random.default_rng(seed)
    n = H * (n_u + n_y)
    f_layers, width = [], n
    for w in f_widths:
        f_layers.append(Layer(_glorot(rng, w, width, gain), np.zeros(w), "tanh"))
        width = w
    W0 = _glorot(rng, n_y, width, gain)
    g_layers, width = [], n
    for w in g_widths:
        g_layers.append(Layer(_glorot(rng, w, width, gain), np.zeros(w), "tanh"))
        width = w
    g_layers.append(Layer(_glorot(rng, n_u, width, gain), rng.uniform(0.5, 1.0, n_u), g_final))
    U0 = _glorot(rng, n_y, n_u, gain)
    return ModelParameters(H, n_u, n_y, f_layers, W0, g_layers, U0,
                           scalers or Scalers.identity(n_u, n_y)).validate()


def rescale_norm_products(params: ModelParameters, f_product: float,
                          g_product: float | None = None) -> ModelParameters:
    """Scale weight matrices so the Lipschitz-bound products hit the given targets.

    Every matrix of a chain is multiplied by the same factor; biases are left
    alone. Used to start training inside the certified region.
    """
    def factor(mats, lips, target):
        cur = np.prod([np.linalg.norm(m, 2) * l for m, l in zip(mats, lips)])
        return (target / cur) ** (1.0 / len(mats)) if cur > 0 else 1.0

    arrays = dict(params.to_arrays())
    f_names = [f"f{i}.W" for i in range(len(params.f_layers))] + ["W0"]
    f_lips = [l.lipschitz for l in params.f_layers] + [1.0]
    c = factor([arrays[k] for k in f_names], f_lips, f_product)
    for k in f_names:
        arrays[k] = arrays[k] * c
    if params.is_control_affine and g_product is not None:
        g_names = [f"g{j}.W" for j in range(len(params.g_layers))] + ["U0"]
        g_lips = [l.lipschitz for l in params.g_layers] + [1.0]
        c = factor([arrays[k] for k in g_names], g_lips, g_product)
        for k in g_names:
            arrays[k] = arrays[k] * c
    return params.with_arrays(arrays)


def nnarx_width_for(n_params: int, H: int, n_u: int, n_y: int, layers: int = 2) -> int:
    """Hidden width giving a plain NNARX with about ``n_params`` weights."""
    n_in = H * (n_u + n_y) + n_u
    best, best_gap = 1, np.inf
    for w in range(1, 200):
        count = (n_in + 1) * w + (layers - 1) * (w + 1) * w + n_y * w
        if abs(count - n_params) < best_gap:
            best, best_gap = w, abs(count - n_params)
    return best


def init_nnarx(H: int = 5, n_u: int = 2, n_y: int = 4, widths=(24, 24), seed: int = 0,
               scalers: Scalers | None = None, gain: float = 1.0) -> ModelParameters:
    """Plain NNARX baseline ``y+ = W0 f([x, u])``."""
    rng = np.random.default_rng(seed)
    width = H * (n_u + n_y) + n_u
    layers = []
    for w in widths:
        layers.append(Layer(_glorot(rng, w, width, gain), np.zeros(w), "tanh"))
        width = w
    W0 = _glorot(rng, n_y, width, gain)
    return ModelParameters(H, n_u, n_y, layers, W0, [], None,
                           scalers or Scalers.identity(n_u, n_y), kind="nnarx").validate()


# --------------------------------------------------------------------------- evaluation


def _mlp(layers, x):
    for layer in layers:
        x = ad.activation(layer.activation, ad.affine(layer.W, x, layer.b))
    return x


def _check_state(params, x):
    if np.shape(ad.value_of(x))[-1] != params.n:
        raise ValueError(f"state has dimension {np.shape(ad.value_of(x))[-1]}, expected {params.n}")


def eval_f(params: ModelParameters, x):
    """Output of the state network ``f`` (..., v)."""
    _check_state(params, x)
    return _mlp(params.f_layers, x)


def eval_g(params: ModelParameters, x):
    """Output of the input-gain network ``g`` (..., n_u)."""
    _check_state(params, x)
    return _mlp(params.g_layers, x)


def eta(params: ModelParameters, x, u):
    """One-step output prediction ``W0 f(x) + U0 (g(x) * u)``."""
    if np.shape(ad.value_of(u))[-1] != params.n_u:
        raise ValueError("input dimension mismatch")
    if params.is_control_affine:
        fx = eval_f(params, x)
        gu = ad.mul(eval_g(params, x), u)
        return ad.add(ad.matvec(params.W0, fx), ad.matvec(params.U0, gu))
    _check_state(params, x)
    return ad.matvec(params.W0, _mlp(params.f_layers, ad.concat([x, u])))


def advance_state(x, y_next, u_now):
    """Shift the regressor register and append ``(y_next, u_now)``."""
    n_z = np.shape(ad.value_of(y_next))[-1] + np.shape(ad.value_of(u_now))[-1]
    return ad.concat([ad.take(x, (Ellipsis, slice(n_z, None))), y_next, u_now])


def output(x, n_y: int, n_u: int):
    """Newest stored output (the ``C x`` read-out)."""
    n_z = n_y + n_u
    return ad.take(x, (Ellipsis, slice(-n_z, -n_u)))


def model_step(params: ModelParameters, x, u):
    """``(x_next, y_next)`` for one sample."""
    y_next = eta(params, x, u)
    return advance_state(x, y_next, u), y_next


def build_state(y_hist, u_hist) -> np.ndarray:
    """Stack ``H`` outputs ``y_{k-H+1..k}`` and inputs ``u_{k-H..k-1}``, oldest first."""
    y_hist, u_hist = np.asarray(y_hist, float), np.asarray(u_hist, float)
    if y_hist.shape[-2] != u_hist.shape[-2]:
        raise ValueError("histories must have the same length")
    return np.concatenate([y_hist, u_hist], axis=-1).reshape(*y_hist.shape[:-2], -1)


def constant_state(params: ModelParameters, y, u) -> np.ndarray:
    """State with every register slot equal to ``(y, u)``."""
    z = np.concatenate([np.asarray(y, float), np.asarray(u, float)], axis=-1)
    return np.tile(z, params.H)


def state_matrices(H: int, n_y: int, n_u: int):
    """Dense ``A, B_u, B_x, C`` of the NARX normal form."""
    n_z = n_y + n_u
    n = H * n_z
    A = np.eye(n, k=n_z)
    Bu = np.zeros((n, n_u))
    Bu[n - n_u:, :] = np.eye(n_u)
    Bx = np.zeros((n, n_y))
    Bx[n - n_z:n - n_u, :] = np.eye(n_y)
    C = np.zeros((n_y, n))
    C[:, n - n_z:n - n_u] = np.eye(n_y)
    return A, Bu, Bx, C


def simulate_open_loop(params: ModelParameters, x0, u_seq):
    """Free-run simulation; returns ``y_hat[k] = C x_k`` for ``k = 0..T-1``.

    ``u_seq`` is (T, n_u) or batched (B, T, n_u) with ``x0`` (B, n). Works on
    traced values, in which case a list of per-step outputs is returned.
    """
    traced = isinstance(x0, ad.Var) or any(
        isinstance(a, ad.Var) for a in params.to_arrays().values())
    u_seq = np.asarray(u_seq, dtype=float)
    T = u_seq.shape[-2]
    x = x0
    outs = []
    for k in range(T):
        outs.append(output(x, params.n_y, params.n_u))
        if k < T - 1:
            u = u_seq[..., k, :]
            x = advance_state(x, eta(params, x, u), u)
    if traced:
        return outs
    return np.stack(outs, axis=-2)


# --------------------------------------------------------------------------- plain-numpy fast path

# activation and its derivative written in terms of the activation output
_ACT_NP = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "sigmoid": (lambda z: 0.5 * (1.0 + np.tanh(0.5 * z)), lambda a: a * (1.0 - a)),
    "identity": (lambda z: z, lambda a: np.ones_like(a)),
    "linear": (lambda z: z, lambda a: np.ones_like(a)),
}


def mlp_np(layers, x: np.ndarray) -> np.ndarray:
    """Untraced network evaluation on plain arrays (used on latency-critical paths)."""
    for layer in layers:
        x = _ACT_NP[layer.activation][0](x @ layer.W.T + layer.b)
    return x


def mlp_jacobian(layers, x: np.ndarray):
    """Output and input Jacobian of a network at a single point ``x`` (1-D)."""
    J = None
    for layer in layers:
        act, dact = _ACT_NP[layer.activation]
        x = act(layer.W @ x + layer.b)
        DW = dact(x)[:, None] * layer.W
        J = DW if J is None else DW @ J
    return x, J


def eta_jacobians(params: ModelParameters, x: np.ndarray, u: np.ndarray):
    """``(eta, d eta/dx, d eta/du)`` at a single state/input pair."""
    if params.is_control_affine:
        fx, Jf = mlp_jacobian(params.f_layers, x)
        gx, Jg = mlp_jacobian(params.g_layers, x)
        y = params.W0 @ fx + params.U0 @ (gx * u)
        dx = params.W0 @ Jf + params.U0 @ (u[:, None] * Jg)
        du = params.U0 * gx[None, :]
        return y, dx, du
    h, Jh = mlp_jacobian(params.f_layers, np.concatenate([x, u]))
    J = params.W0 @ Jh
    return params.W0 @ h, J[:, :params.n], J[:, params.n:]


def eta_np(params: ModelParameters, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    if params.is_control_affine:
        return (mlp_np(params.f_layers, x) @ params.W0.T
                + (mlp_np(params.g_layers, x) * u) @ params.U0.T)
    return mlp_np(params.f_layers, np.concatenate([x, u], axis=-1)) @ params.W0.T


def shift_np(x: np.ndarray, y_next: np.ndarray, u_now: np.ndarray) -> np.ndarray:
    n_z = y_next.shape[-1] + u_now.shape[-1]
    return np.concatenate([x[..., n_z:], y_next, u_now], axis=-1)


def fit_index(y_hat, y, washout: int = 0, y_avg=None) -> float:
    """FIT in percent over ``k >= washout`` using the 2-norm of each sample.

    ``y_avg`` defaults to the mean of the whole ground-truth sequence. Pass
    single-column arrays for a per-channel FIT.
    """
    y_hat = np.asarray(y_hat, float).reshape(len(y_hat), -1)
    y = np.asarray(y, float).reshape(len(y), -1)
    if y_hat.shape != y.shape or len(y) <= washout:
        raise ValueError("sequences must have equal length greater than the washout")
    if y_avg is None:
        y_avg = y.mean(axis=0)
    den = np.sum(np.linalg.norm(y[washout:] - y_avg, axis=1))
    if den == 0.0:
        raise ValueError("ground truth is constant, FIT undefined")
    num = np.sum(np.linalg.norm(y_hat[washout:] - y[washout:], axis=1))
    return float(100.0 * (1.0 - num / den))


def channel_fits(y_hat, y, washout: int = 0) -> np.ndarray:
    y_hat, y = np.asarray(y_hat, float), np.asarray(y, float)
    return np.array([fit_index(y_hat[:, i], y[:, i], washout) for i in range(y.shape[1])])


# --------------------------------------------------------------------------- persistence


def _layers_to_json(layers):
    return [{"W": np.asarray(l.W).tolist(), "b": np.asarray(l.b).tolist(),
             "activation": l.activation, "lipschitz": l.lipschitz} for l in layers]


def _layers_from_json(items):
    try:
        return [Layer(np.asarray(d["W"], dtype=float), np.asarray(d["b"], dtype=float),
                      d["activation"]) for d in items]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"malformed layer entry: {exc}") from None


def to_json_dict(params: ModelParameters) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "kind": params.kind,
        "dims": {"H": params.H, "n_u": params.n_u, "n_y": params.n_y},
        "f_layers": _layers_to_json(params.f_layers),
        "g_layers": _layers_to_json(params.g_layers),
        "W0": np.asarray(params.W0).tolist(),
        "U0": None if params.U0 is None else np.asarray(params.U0).tolist(),
        "activations": {"f": [l.activation for l in params.f_layers],
                        "g": [l.activation for l in params.g_layers]},
        "scalers": None if params.scalers is None else params.scalers.to_dict(),
        "training_meta": params.training_meta,
    }


def from_json_dict(d: dict) -> ModelParameters:
    if not isinstance(d, dict) or d.get("version") != SCHEMA_VERSION:
        raise ModelFileError(f"unsupported model schema version {d.get('version')!r}")
    try:
        dims = d["dims"]
        p = ModelParameters(
            H=int(dims["H"]), n_u=int(dims["n_u"]), n_y=int(dims["n_y"]),
            f_layers=_layers_from_json(d["f_layers"]),
            W0=np.asarray(d["W0"], dtype=float),
            g_layers=_layers_from_json(d.get("g_layers", [])),
            U0=None if d.get("U0") is None else np.asarray(d["U0"], dtype=float),
            scalers=None if d.get("scalers") is None else Scalers.from_dict(d["scalers"]),
            kind=d.get("kind", "ca-nnarx"),
            training_meta=d.get("training_meta", {}),
        )
    except (KeyError, TypeError) as exc:
        raise ModelFileError(f"missing field: {exc}") from None
    return p.validate()


def save_model(params: ModelParameters, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_json_dict(params), indent=1, sort_keys=True) + "\n")
    return path


def load_model(path) -> ModelParameters:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"not a JSON model file: {exc}") from None
    return from_json_dict(d)
