"""Per-shape flow models trained with conditional flow matching.

A flow is a time-dependent velocity field ``v(x, t)`` (a small MLP with
sinusoidal time features).  Training regresses ``v`` onto the straight
line velocity ``x1 - x0`` between anchor noise ``x0 ~ N(0, I)`` and an
embedding row ``x1``, evaluated at ``x_t = (1 - t) x0 + t x1``.
Integrating the ODE from t=0 to 1 carries anchor samples onto the
embedding distribution; integrating from 1 to 0 carries embedding rows
back to the anchor.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import expit

from ._io import atomic_write
from .embedding import EmbeddingMatrix, NormalizationTransform
from .errors import ContractError, FormatError, NumericError, ParameterError, TruncationError, VersionError

MAGIC = b"FLOWCORR"
FORMAT_VERSION = 1
ACTIVATIONS = ("silu",)
_HEAD = struct.Struct("<8sII")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch: int = 512
    learning_rate: float = 1e-3
    lr_schedule: str = "constant"
    hidden_widths: tuple = (128, 128, 128, 128)
    time_features: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if int(self.steps) < 1:
            raise ParameterError("steps must be >= 1")
        if int(self.batch) < 1:
            raise ParameterError("batch must be >= 1")
        if not float(self.learning_rate) > 0:
            raise ParameterError("learning_rate must be > 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ParameterError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if int(self.time_features) < 0 or any(w < 1 for w in self.hidden_widths):
            raise ParameterError("time_features must be >= 0 and hidden widths >= 1")

    def to_dict(self):
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        for key in data:
            if key not in known:
                raise ParameterError(f"unknown train config key {key!r}")
        casts = {"steps": int, "batch": int, "learning_rate": float, "lr_schedule": str,
                 "hidden_widths": lambda v: tuple(int(w) for w in v), "time_features": int, "seed": int}
        kwargs = {}
        for key, value in data.items():
            try:
                kwargs[key] = casts[key](value)
            except (TypeError, ValueError):
                raise ParameterError(f"bad value for train config key {key!r}: {value!r}") from None
        return cls(**kwargs)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def time_embedding(t, n_freq):
    """[sin(2^k pi t), cos(2^k pi t)] for k < n_freq, interleaved per k."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if n_freq == 0:
        return np.zeros((len(t), 0))
    ang = np.pi * t[:, None] * (2.0 ** np.arange(n_freq))[None, :]
    out = np.empty((len(t), 2 * n_freq))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


@dataclass(frozen=True, eq=False)
class VelocityField:
    """MLP ``concat(x, time features) -> velocity``; weights are (fan_in, fan_out)."""

    weights: tuple
    biases: tuple
    time_features: int
    activation: str = "silu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "weights", tuple(np.asarray(w, dtype=float) for w in self.weights))
        object.__setattr__(self, "biases", tuple(np.asarray(b, dtype=float) for b in self.biases))
        widths = self.widths
        if widths[0] != widths[-1] + 2 * self.time_features:
            raise ParameterError("input width must be d + 2 * time_features")

    @property
    def widths(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def d(self):
        return self.weights[-1].shape[1]

    @property
    def hidden_widths(self):
        return tuple(self.widths[1:-1])

    @classmethod
    def init(cls, d, hidden_widths, time_features, rng):
        widths = [d + 2 * time_features, *hidden_widths, d]
        ws, bs = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            bs.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(tuple(ws), tuple(bs), time_features)

    @classmethod
    def zeros(cls, d, hidden_widths=(), time_features=0):
        widths = [d + 2 * time_features, *hidden_widths, d]
        return cls(tuple(np.zeros((a, b)) for a, b in zip(widths[:-1], widths[1:])),
                   tuple(np.zeros(b) for b in widths[1:]), time_features)

    def parameters(self):
        """[W0, b0, W1, b1, ...]"""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self):
        return np.concatenate([p.ravel() for p in self.parameters()])

    def with_flat(self, flat):
        flat = np.asarray(flat, dtype=float)
        params, pos = [], 0
        for p in self.parameters():
            params.append(flat[pos:pos + p.size].reshape(p.shape).copy())
            pos += p.size
        if pos != len(flat):
            raise ParameterError(f"expected {pos} parameters, got {len(flat)}")
        return replace(self, weights=tuple(params[0::2]), biases=tuple(params[1::2]))

    def n_params(self):
        return sum(p.size for p in self.parameters())


def _forward(field, x, tfeat, cache=False):
    h = np.concatenate([x, tfeat], axis=1) if tfeat.shape[1] else x
    acts, pre = [h], []
    last = len(field.weights) - 1
    for i, (w, b) in enumerate(zip(field.weights, field.biases)):
        z = h @ w + b
        if i < last:
            s = expit(z)
            h = z * s
            if cache:
                pre.append((z, s))
        else:
            h = z
        if cache:
            acts.append(h)
    return h, acts, pre


def _backward(field, acts, pre, g):
    grads = []
    for i in range(len(field.weights) - 1, -1, -1):
        grads.append(g.sum(axis=0))
        grads.append(acts[i].T @ g)
        if i > 0:
            g = g @ field.weights[i].T
            z, s = pre[i - 1]
            g = g * (s * (1.0 + z * (1.0 - s)))
    return grads[::-1]


def _tfeat(field, t, m):
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return np.broadcast_to(time_embedding(t, field.time_features), (m, 2 * field.time_features))
    return time_embedding(t, field.time_features)


def eval_velocity(field: VelocityField, x, t):
    """Velocity at points ``x`` ((d,) or (m, d)) and time(s) ``t`` in [0, 1]."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    tt = np.asarray(t, dtype=float)
    if np.any(tt < 0) or np.any(tt > 1):
        raise ParameterError("t must lie in [0, 1]")
    if not np.all(np.isfinite(X)):
        raise ParameterError("x must be finite")
    v, _, _ = _forward(field, X, _tfeat(field, tt, len(X)))
    if not np.all(np.isfinite(v)):
        raise NumericError("non-finite velocity")
    return v[0] if single else v


def cfm_loss_grad(field: VelocityField, x1, x0, t):
    """Flow-matching loss on a batch and its gradient w.r.t. every parameter.

    loss = mean_i || v(x_t_i, t_i) - (x1_i - x0_i) ||^2 with
    x_t = (1 - t) x0 + t x1.  The gradient is returned in the order of
    :meth:`VelocityField.parameters`.
    """
    x1 = np.asarray(x1, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    t = np.asarray(t, dtype=float).reshape(-1)
    if x1.shape != x0.shape or x1.ndim != 2 or len(t) != len(x1) or x1.shape[1] != field.d:
        raise ContractError("batch shapes are inconsistent")
    if np.any(t < 0) or np.any(t > 1):
        raise ParameterError("t must lie in [0, 1]")
    m = len(x1)
    xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
    target = x1 - x0
    v, acts, pre = _forward(field, xt, time_embedding(t, field.time_features), cache=True)
    r = v - target
    loss = float(np.einsum("ij,ij->", r, r) / m)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    return loss, _backward(field, acts, pre, (2.0 / m) * r)


@dataclass(frozen=True, eq=False)
class FlowModel:
    field: VelocityField
    norm: NormalizationTransform
    train_config: TrainConfig
    final_loss: float
    seed: int
    loss_history: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.norm.d != self.field.d:
            raise ContractError("normalization and field dimensions differ")
        if not np.isfinite(self.final_loss):
            raise NumericError("final_loss must be finite")
        for p in self.field.parameters():
            p.setflags(write=False)

    @property
    def d(self):
        return self.field.d

    def generate(self, n, steps=64, seed=0, raw=True):
        """Push fresh anchor noise through the flow; un-standardize if ``raw``."""
        x0 = np.random.default_rng(seed).standard_normal((n, self.d))
        x1 = integrate_forward(self, x0, steps)
        return self.norm.invert(x1) if raw else x1

    def digest(self):
        h = hashlib.sha256(self.field.flat().astype("<f8").tobytes())
        h.update(self.norm.shift.astype("<f8").tobytes() + self.norm.scale.astype("<f8").tobytes())
        return h.hexdigest()


def train_flow(E: EmbeddingMatrix, cfg: TrainConfig = TrainConfig()) -> FlowModel:
    """Fit a velocity field to a standardized embedding with Adam.

    Each step draws ``cfg.batch`` rows of ``E`` with replacement, anchor
    noise and uniform times; everything is driven by one generator seeded
    with ``cfg.seed``.
    """
    if not isinstance(E, EmbeddingMatrix) or E.norm is None:
        raise ContractError("train_flow needs a standardized EmbeddingMatrix (call standardize first)")
    rng = np.random.default_rng(cfg.seed)
    data = E.values
    n, d = data.shape
    field = VelocityField.init(d, cfg.hidden_widths, cfg.time_features, rng)
    params = [p.copy() for p in field.parameters()]
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    losses = np.empty(cfg.steps)
    for step in range(cfg.steps):
        cur = VelocityField(tuple(params[0::2]), tuple(params[1::2]), cfg.time_features)
        idx = rng.integers(0, n, size=cfg.batch)
        x0 = rng.standard_normal((cfg.batch, d))
        t = rng.random(cfg.batch)
        try:
            loss, grads = cfm_loss_grad(cur, data[idx], x0, t)
        except NumericError as exc:
            raise NumericError(f"training diverged at step {step}: {exc}") from None
        losses[step] = loss
        lr = cfg.learning_rate
        if cfg.lr_schedule == "cosine":
            lr *= 0.5 * (1.0 + np.cos(np.pi * step / cfg.steps))
        c1 = 1.0 - beta1 ** (step + 1)
        c2 = 1.0 - beta2 ** (step + 1)
        for p, g, a, b in zip(params, grads, m1, m2):
            a *= beta1
            a += (1.0 - beta1) * g
            b *= beta2
            b += (1.0 - beta2) * g * g
            p -= lr * (a / c1) / (np.sqrt(b / c2) + eps)
    field = VelocityField(tuple(params[0::2]), tuple(params[1::2]), cfg.time_features)
    final = float(losses[-100:].mean())
    return FlowModel(field, E.norm, cfg, final, cfg.seed, loss_history=losses)


def _as_field(model):
    return model.field if isinstance(model, FlowModel) else model


def _rk4(field, x, steps, forward):
    if int(steps) < 1:
        raise ParameterError("steps must be >= 1")
    x = np.array(x, dtype=float, copy=True)
    if x.ndim != 2 or x.shape[1] != field.d:
        raise ContractError(f"expected an (m, {field.d}) array, got {x.shape}")
    m = len(x)
    h = (1.0 if forward else -1.0) / steps
    cache = {}

    def v(y, t):
        # the time features only depend on t; reuse them across stages
        key = round(t * steps * 2)
        tf = cache.get(key)
        if tf is None:
            tf = cache[key] = np.broadcast_to(time_embedding(t, field.time_features), (m, 2 * field.time_features))
        return _forward(field, y, tf)[0]

    for i in range(steps):
        t = i / steps if forward else 1.0 - i / steps
        # overflow is detected below and reported with its row
        with np.errstate(over="ignore", invalid="ignore"):
            k1 = v(x, t)
            k2 = v(x + 0.5 * h * k1, t + 0.5 * h)
            k3 = v(x + 0.5 * h * k2, t + 0.5 * h)
            k4 = v(x + h * k3, t + h)
            x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(x).all():
            row = int(np.flatnonzero(~np.isfinite(x).all(axis=1))[0])
            raise NumericError(f"non-finite state at row {row} (step {i})")
    return x


def integrate_forward(model, X0, steps=64):
    """Classical RK4 from t=0 to t=1 with ``steps`` equal steps."""
    return _rk4(_as_field(model), X0, steps, forward=True)


def integrate_backward(model, X1, steps=64):
    """Classical RK4 from t=1 back to t=0 on the same field."""
    return _rk4(_as_field(model), X1, steps, forward=False)


# ----------------------------------------------------------------------------
# model files: magic, version, JSON header length | JSON header |
# norm shift, norm scale, parameters (little-endian float64)


def save_model(model: FlowModel, path):
    f = model.field
    header = {
        "d": f.d,
        "widths": f.widths,
        "activation": f.activation,
        "time_features": f.time_features,
        "train_config": model.train_config.to_dict(),
        "final_loss": model.final_loss,
        "seed": model.seed,
        "n_params": f.n_params(),
    }
    head = json.dumps(header, sort_keys=True).encode()
    with atomic_write(os.fspath(path), "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, FORMAT_VERSION, len(head)))
        fh.write(head)
        fh.write(model.norm.shift.astype("<f8").tobytes())
        fh.write(model.norm.scale.astype("<f8").tobytes())
        fh.write(f.flat().astype("<f8").tobytes())


def load_model(path) -> FlowModel:
    with open(os.fspath(path), "rb") as fh:
        data = fh.read()
    if len(data) < _HEAD.size:
        raise TruncationError("model file shorter than its fixed header")
    magic, version, head_len = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise FormatError("not a flow model file (bad magic)")
    if version != FORMAT_VERSION:
        raise VersionError(f"model format version {version} is not supported (expected {FORMAT_VERSION})")
    pos = _HEAD.size
    if len(data) < pos + head_len:
        raise TruncationError("model header truncated")
    header = json.loads(data[pos:pos + head_len])
    pos += head_len
    d, n_params = header["d"], header["n_params"]
    need = 8 * (2 * d + n_params)
    if len(data) - pos < need:
        raise TruncationError(f"model payload truncated ({len(data) - pos} of {need} bytes)")
    arr = np.frombuffer(data[pos:pos + need], dtype="<f8").astype(np.float64)
    norm = NormalizationTransform(arr[:d], arr[d:2 * d])
    widths = header["widths"]
    template = VelocityField.zeros(d, widths[1:-1], header["time_features"])
    field = replace(template.with_flat(arr[2 * d:]), activation=header["activation"])
    cfg = TrainConfig.from_dict(header["train_config"])
    return FlowModel(field, norm, cfg, float(header["final_loss"]), int(header["seed"]))
