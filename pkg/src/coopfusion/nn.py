"""Learnable modules on top of the tensor engine.

Includes parameter containers, plain relu MLPs, AdamW with decoupled weight
decay, a binary checkpoint format, and a central-difference gradient checker
used as the independent oracle for every backward implementation.

Checkpoint layout (little-endian, version 1):
    magic b"CFCK" | u32 version | u32 record count
    per record: u16 name length | name utf-8 | u8 ndim | u32 dims... | f64 data
Records are written sorted by name so identical parameter sets produce
byte-identical files.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import seeded

CHECKPOINT_MAGIC = b"CFCK"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Checkpoint bytes do not parse (bad magic/version/truncation)."""


class Parameter:
    """Named leaf tensor with requires_grad=True."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.tensor = T.Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray):
        self.tensor.data = np.asarray(value, dtype=np.float64)

    @property
    def grad(self):
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.tensor.data.shape})"


def init_uniform(shape: tuple, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) initialization."""
    bound = float(np.sqrt(1.0 / max(fan_in, 1)))
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths [in, hidden..., out]; nonlinearity between layers, linear last."""

    widths: tuple
    activation: str = "relu"
    final_layernorm: bool = False

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError(f"MlpSpec needs at least [in, out], got {self.widths}")
        if self.activation not in ("relu", "gelu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")


class Mlp:
    """Fully connected stack built from an MlpSpec, with named parameters."""

    def __init__(self, name: str, spec: MlpSpec, seed: int):
        self.name = name
        self.spec = spec
        self.weights: list[Parameter] = []
        self.biases: list[Parameter] = []
        widths = spec.widths
        for i, (din, dout) in enumerate(zip(widths[:-1], widths[1:])):
            wr = seeded(seed, name, f"w{i}")
            br = seeded(seed, name, f"b{i}")
            self.weights.append(Parameter(f"{name}.w{i}", init_uniform((din, dout), din, wr)))
            self.biases.append(Parameter(f"{name}.b{i}", init_uniform((dout,), din, br)))
        self.ln_gain = None
        self.ln_bias = None
        if spec.final_layernorm:
            c = widths[-1]
            self.ln_gain = Parameter(f"{name}.ln_gain", np.ones(c))
            self.ln_bias = Parameter(f"{name}.ln_bias", np.zeros(c))

    def params(self) -> list[Parameter]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        if self.ln_gain is not None:
            out.extend((self.ln_gain, self.ln_bias))
        return out

    def __call__(self, x: T.Tensor) -> T.Tensor:
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = T.matmul(x, w.tensor) + b.tensor
            if i < n - 1 and self.spec.activation == "relu":
                x = T.relu(x)
            elif i < n - 1 and self.spec.activation == "gelu":
                x = T.gelu(x)
        if self.ln_gain is not None:
            x = T.layernorm(x, self.ln_gain.tensor, self.ln_bias.tensor)
        return x


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay.

    Zero gradient and zero weight decay leave parameters exactly unchanged.
    Parameters whose grad is None are skipped and counted in `skipped`.
    """

    def __init__(self, params: list[Parameter], lr: float = 1e-4,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.skipped = 0
        self._warned = False

    def zero_grad(self):
        for p in self.params:
            p.tensor.zero_grad()

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else float(lr)
        b1, b2 = self.betas
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.tensor.grad
            if g is None:
                self.skipped += 1
                if not self._warned:
                    warnings.warn(f"AdamW: parameter {p.name} has no gradient; skipping")
                    self._warned = True
                continue
            if self.weight_decay != 0.0:
                p.tensor.data = p.tensor.data - lr * self.weight_decay * p.tensor.data
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            mhat = self.m[i] / (1.0 - b1**self.t)
            vhat = self.v[i] / (1.0 - b2**self.t)
            p.tensor.data = p.tensor.data - lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment state as named arrays for checkpointing."""
        out = {"opt.t": np.array([float(self.t)])}
        for i, p in enumerate(self.params):
            out[f"opt.m.{p.name}"] = self.m[i]
            out[f"opt.v.{p.name}"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.t = int(arrays["opt.t"][0])
        for i, p in enumerate(self.params):
            self.m[i] = np.array(arrays[f"opt.m.{p.name}"], dtype=np.float64)
            self.v[i] = np.array(arrays[f"opt.v.{p.name}"], dtype=np.float64)


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """Cosine annealing from base_lr at epoch 0 toward 0 at total_epochs."""
    if total_epochs <= 0:
        return base_lr
    frac = min(max(epoch / total_epochs, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + float(np.cos(np.pi * frac)))


# -- checkpoint io -------------------------------------------------------------


def save_checkpoint(path: str, arrays: dict[str, np.ndarray]):
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<II", CHECKPOINT_VERSION, len(arrays))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        enc = name.encode("utf-8")
        blob += struct.pack("<H", len(enc))
        blob += enc
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        blob += arr.astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(blob)


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {blob[:4]!r}")
    off = 4
    try:
        version, count = struct.unpack_from("<II", blob, off)
        off += 8
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"unsupported version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
            off += 4 * ndim
            n = int(np.prod(shape)) if shape else 1
            end = off + 8 * n
            if end > len(blob):
                raise CheckpointFormatError("truncated checkpoint data")
            arr = np.frombuffer(blob[off:end], dtype="<f8").reshape(shape).copy()
            off += 8 * n
            out[name] = arr
    except struct.error as e:
        raise CheckpointFormatError(f"truncated checkpoint header: {e}") from e
    return out


# -- gradient checking ---------------------------------------------------------


@dataclass
class GradCheckReport:
    checked: int = 0
    max_rel_err: float = 0.0
    worst: str = ""
    failures: list = field(default_factory=list)


def grad_check(loss_fn, params: list[Parameter], n_samples: int = 20,
               h: float = 1e-5, rel_tol: float = 1e-4, abs_tol: float = 1e-7,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    `loss_fn` must rebuild the forward graph from current parameter data and
    return a scalar Tensor. Samples `n_samples` coordinates spread across the
    parameter list (every parameter gets at least one sample when possible).
    Differences below `abs_tol` count as matches regardless of relative error:
    central differences bottom out near eps*|loss|/h, so gradients that small
    cannot be resolved numerically.
    """
    for p in params:
        p.tensor.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for p in params}
    rng = seeded(seed, "grad_check")
    coords: list[tuple[Parameter, tuple]] = []
    for p in params:
        flat = rng.integers(0, p.data.size)
        coords.append((p, np.unravel_index(int(flat), p.data.shape)))
    while len(coords) < n_samples:
        p = params[int(rng.integers(0, len(params)))]
        flat = rng.integers(0, p.data.size)
        coords.append((p, np.unravel_index(int(flat), p.data.shape)))
    report = GradCheckReport()
    with T.no_grad():
        for p, idx in coords[:max(n_samples, len(params))]:
            orig = p.data[idx]
            p.data[idx] = orig + h
            hi = float(loss_fn().data)
            p.data[idx] = orig - h
            lo = float(loss_fn().data)
            p.data[idx] = orig
            numeric = (hi - lo) / (2.0 * h)
            ana = float(analytic[p.name][idx])
            denom = max(abs(ana), abs(numeric), 1e-8)
            rel = 0.0 if abs(ana - numeric) < abs_tol else abs(ana - numeric) / denom
            report.checked += 1
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst = f"{p.name}{list(idx)}: analytic={ana:.3e} numeric={numeric:.3e}"
            if rel > rel_tol:
                report.failures.append((p.name, idx, ana, numeric, rel))
    return report
