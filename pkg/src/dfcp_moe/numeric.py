"""Deterministic tensor math, layers, losses, optimizers and a finite-difference oracle.

Tensors are plain float64 numpy arrays of rank <= 4.  Every public function
checks its result for NaN/Inf and raises :class:`NonFiniteError` instead of
propagating a bad value.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

DTYPE = np.float64
PROB_FLOOR = 1e-12
MAX_RANK = 4

TENSOR_MAGIC = b"DFMT"
TENSOR_VERSION = 1


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""


class NonFiniteError(ValueError):
    """Raised when a NaN or Inf shows up where a finite value is required."""


def check_finite(a: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return a


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    a = np.ascontiguousarray(data, dtype=dtype)
    if a.ndim > MAX_RANK:
        raise DimensionError(f"rank {a.ndim} exceeds maximum rank {MAX_RANK}")
    if a.ndim > 0 and 0 in a.shape:
        raise DimensionError(f"tensor extents must be positive, got {a.shape}")
    return check_finite(a)


# ---------------------------------------------------------------------------
# core ops


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "matmul output")


def conv2d_forward(x: np.ndarray, filters: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid (no padding), stride-1 convolution of an HxWxC input.

    ``filters`` has shape (K, F, F, C) and ``bias`` shape (K,).  Returns the
    (H-F+1, W-F+1, K) stack of feature maps.  Nothing is pooled.
    """
    x = np.asarray(x, dtype=DTYPE)
    filters = np.asarray(filters, dtype=DTYPE)
    bias = np.asarray(bias, dtype=DTYPE)
    if x.ndim != 3:
        raise DimensionError(f"input must be HxWxC, got shape {x.shape}")
    if filters.ndim != 4 or filters.shape[1] != filters.shape[2]:
        raise DimensionError(f"filters must be KxFxFxC, got shape {filters.shape}")
    h, w, c = x.shape
    k, f, _, fc = filters.shape
    if fc != c:
        raise DimensionError(f"filter depth {fc} does not match input channels {c}")
    if f > min(h, w):
        raise DimensionError(f"filter size {f} larger than input {h}x{w}")
    if bias.shape != (k,):
        raise DimensionError(f"bias shape {bias.shape} does not match {k} filters")
    windows = np.lib.stride_tricks.sliding_window_view(x, (f, f), axis=(0, 1))
    # windows: (H-F+1, W-F+1, C, F, F)
    out = np.einsum("abcij,kijc->abk", windows, filters, optimize=False) + bias
    return check_finite(out, "conv2d output")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-shifted softmax along the last axis."""
    z = np.asarray(logits, dtype=DTYPE)
    if z.size == 0 or z.shape[-1] == 0:
        raise DimensionError("softmax of an empty vector")
    check_finite(z, "logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(predicted: np.ndarray, true_class: int) -> float:
    p = np.asarray(predicted, dtype=DTYPE)
    if p.ndim != 1:
        raise DimensionError(f"expected a probability vector, got shape {p.shape}")
    if not 0 <= true_class < p.shape[0]:
        raise IndexError(f"class index {true_class} out of range for {p.shape[0]} classes")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {p.sum()}, not 1")
    return float(-np.log(max(p[true_class], PROB_FLOOR)))


def nll(prob_of_truth: np.ndarray) -> np.ndarray:
    """Per-sample -log p with the probability floored at ``PROB_FLOOR``."""
    return -np.log(np.maximum(prob_of_truth, PROB_FLOOR))


# ---------------------------------------------------------------------------
# activations

def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z):
    return (z > 0).astype(DTYPE)


def _tanh_grad(z):
    t = np.tanh(z)
    return 1.0 - t * t


ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "relu": (_relu, _relu_grad),
    "tanh": (np.tanh, _tanh_grad),
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
}


# ---------------------------------------------------------------------------
# parameters


@dataclass
class Layer:
    weights: np.ndarray
    bias: np.ndarray


@dataclass
class ParameterSet:
    """Ordered map of layer name -> (weights, bias)."""

    layers: dict[str, Layer] = field(default_factory=dict)
    seed: int = 0

    def add(self, name: str, weights: np.ndarray, bias: np.ndarray) -> None:
        if name in self.layers:
            raise KeyError(f"duplicate layer name {name!r}")
        self.layers[name] = Layer(as_tensor(weights), as_tensor(bias))

    def arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """Yield ``("<layer>/weights", W), ("<layer>/bias", b)`` in fixed order."""
        for name, layer in self.layers.items():
            yield f"{name}/weights", layer.weights
            yield f"{name}/bias", layer.bias

    def keys(self) -> list[str]:
        return [k for k, _ in self.arrays()]

    def get(self, key: str) -> np.ndarray:
        name, part = key.rsplit("/", 1)
        return getattr(self.layers[name], "weights" if part == "weights" else "bias")

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            {n: Layer(l.weights.copy(), l.bias.copy()) for n, l in self.layers.items()},
            self.seed,
        )

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(a) for k, a in self.arrays()}

    def count(self) -> int:
        return int(sum(a.size for _, a in self.arrays()))

    def equals(self, other: "ParameterSet") -> bool:
        if self.keys() != other.keys():
            return False
        return all(np.array_equal(a, other.get(k)) for k, a in self.arrays())


def xavier_normal(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape)


def kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


INITIALIZERS = {"xavier_normal": xavier_normal, "kaiming_uniform": kaiming_uniform}


# ---------------------------------------------------------------------------
# feed-forward networks


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a feed-forward network.

    ``dense``       z = x W + b                             W: (n_in, n_out)
    ``patch_sum``   z = sum_p x_p W + b over P input blocks  W: (n_in/P, n_out)
    ``patch_conv``  z_p = x_p W + b for every block, flattened  W: (n_in/P, n_out/P)
    """

    name: str
    kind: str
    n_in: int
    n_out: int
    activation: str = "relu"
    patches: int = 1

    def __post_init__(self):
        if self.kind not in ("dense", "patch_sum", "patch_conv"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.n_in <= 0 or self.n_out <= 0 or self.patches <= 0:
            raise DimensionError(f"layer {self.name}: sizes must be positive")
        if self.kind != "dense" and self.n_in % self.patches:
            raise DimensionError(f"layer {self.name}: {self.n_in} inputs not divisible into {self.patches} patches")
        if self.kind == "patch_conv" and self.n_out % self.patches:
            raise DimensionError(f"layer {self.name}: {self.n_out} outputs not divisible into {self.patches} patches")

    @property
    def block(self) -> int:
        return self.n_in // self.patches if self.kind != "dense" else self.n_in

    @property
    def weight_shape(self) -> tuple[int, int]:
        if self.kind == "dense":
            return (self.n_in, self.n_out)
        if self.kind == "patch_sum":
            return (self.block, self.n_out)
        return (self.block, self.n_out // self.patches)

    @property
    def bias_shape(self) -> tuple[int]:
        return (self.weight_shape[1],)

    def flops(self) -> int:
        """Multiply-adds counted as 2 flops; bias add folded in; +1 per activation output."""
        fi, fo = self.weight_shape
        mac = 2 * fi * fo * self.patches
        act = 0 if self.activation == "identity" else self.n_out
        return mac + act

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "n_in": self.n_in,
            "n_out": self.n_out,
            "activation": self.activation,
            "patches": self.patches,
        }


def init_params(specs, seed: int, scheme: str = "kaiming_uniform") -> ParameterSet:
    rng = np.random.default_rng(seed)
    init = INITIALIZERS[scheme]
    params = ParameterSet(seed=seed)
    for s in specs:
        fi, fo = s.weight_shape
        params.add(s.name, init(rng, fi, fo, s.weight_shape), np.zeros(s.bias_shape))
    return params


class Network:
    """A stack of :class:`LayerSpec` evaluated on (batch, features) arrays."""

    def __init__(self, specs, params: ParameterSet):
        self.specs = tuple(specs)
        for a, b in zip(self.specs, self.specs[1:]):
            if a.n_out != b.n_in:
                raise DimensionError(f"layer {a.name} outputs {a.n_out} but {b.name} expects {b.n_in}")
        for s in self.specs:
            layer = params.layers.get(s.name)
            if layer is None:
                raise KeyError(f"missing parameters for layer {s.name!r}")
            if layer.weights.shape != s.weight_shape or layer.bias.shape != s.bias_shape:
                raise DimensionError(
                    f"layer {s.name}: parameters {layer.weights.shape}/{layer.bias.shape} "
                    f"do not match spec {s.weight_shape}/{s.bias_shape}"
                )
        self.params = params

    @property
    def n_in(self) -> int:
        return self.specs[0].n_in

    @property
    def n_out(self) -> int:
        return self.specs[-1].n_out

    def flops(self) -> int:
        return sum(s.flops() for s in self.specs)

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.n_in:
            raise DimensionError(f"network expects {self.n_in} inputs, got {x.shape[1]}")
        cache = []
        a = x
        for s in self.specs:
            layer = self.params.layers[s.name]
            w, b = layer.weights, layer.bias
            if s.kind == "dense":
                z = a @ w + b
            elif s.kind == "patch_sum":
                blocks = a.reshape(a.shape[0], s.patches, s.block)
                z = np.einsum("bpk,ko->bo", blocks, w) + b
            else:
                blocks = a.reshape(a.shape[0], s.patches, s.block)
                z = (np.einsum("bpk,kf->bpf", blocks, w) + b).reshape(a.shape[0], s.n_out)
            cache.append((a, z))
            a = ACTIVATIONS[s.activation][0](z)
        return check_finite(a, "network output"), cache

    def backward(self, cache, d_out: np.ndarray):
        """Return (grads keyed like ``ParameterSet.arrays``, gradient w.r.t. the input)."""
        grads: dict[str, np.ndarray] = {}
        d = np.asarray(d_out, dtype=DTYPE)
        for s, (a, z) in zip(reversed(self.specs), reversed(cache)):
            dz = d * ACTIVATIONS[s.activation][1](z)
            w = self.params.layers[s.name].weights
            if s.kind == "dense":
                gw = a.T @ dz
                gb = dz.sum(axis=0)
                d = dz @ w.T
            elif s.kind == "patch_sum":
                blocks = a.reshape(a.shape[0], s.patches, s.block)
                gw = np.einsum("bpk,bo->ko", blocks, dz)
                gb = dz.sum(axis=0)
                d = np.repeat((dz @ w.T)[:, None, :], s.patches, axis=1).reshape(a.shape)
            else:
                blocks = a.reshape(a.shape[0], s.patches, s.block)
                dzb = dz.reshape(a.shape[0], s.patches, -1)
                gw = np.einsum("bpk,bpf->kf", blocks, dzb)
                gb = dzb.sum(axis=(0, 1))
                d = (dzb @ w.T).reshape(a.shape)
            grads[f"{s.name}/weights"] = gw
            grads[f"{s.name}/bias"] = gb
        ordered = {k: grads[k] for k in self.params.keys()}
        return ordered, d


def mlp_specs(prefix: str, n_in: int, hidden, n_out: int, activation: str = "relu",
              out_activation: str = "identity", first_kind: str = "dense", patches: int = 1):
    """Build layer specs for an MLP whose first layer may be a patch layer."""
    specs = []
    width = n_in
    sizes = list(hidden) + [n_out]
    for i, size in enumerate(sizes):
        last = i == len(sizes) - 1
        kind = first_kind if i == 0 else "dense"
        if kind == "patch_conv":
            size = size * patches
        specs.append(LayerSpec(
            name=f"{prefix}{i + 1}",
            kind=kind,
            n_in=width,
            n_out=size,
            activation=out_activation if last else activation,
            patches=patches if kind != "dense" else 1,
        ))
        width = size
    return specs


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    rho: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")

    def _buffer(self, name: str, key: str, like: np.ndarray) -> np.ndarray:
        slot = self.buffers.setdefault(name, {})
        if key not in slot:
            slot[key] = np.zeros_like(like)
        return slot[key]


def optimizer_step(params: ParameterSet, grads: dict[str, np.ndarray], state: OptimizerState,
                   lr: float | None = None):
    """Apply one update in place and return ``(params, state)``.

    ``lr`` overrides ``state.lr`` for this step only (``lr=0`` leaves params untouched).
    """
    lr = state.lr if lr is None else lr
    for key, theta in params.arrays():
        g = grads.get(key)
        if g is None:
            raise KeyError(f"no gradient for {key}")
        if g.shape != theta.shape:
            raise DimensionError(f"gradient for {key} has shape {g.shape}, parameter has {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {key}")
    state.step += 1
    t = state.step
    for key, theta in params.arrays():
        g = grads[key]
        if state.kind == "sgd":
            if state.momentum:
                v = state._buffer("velocity", key, theta)
                v *= state.momentum
                v += g
                update = v
            else:
                update = g
        elif state.kind == "adam":
            m = state._buffer("m", key, theta)
            v = state._buffer("v", key, theta)
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            m_hat = m / (1.0 - state.beta1 ** t)
            v_hat = v / (1.0 - state.beta2 ** t)
            update = m_hat / (np.sqrt(v_hat) + state.eps)
        else:
            s = state._buffer("square_avg", key, theta)
            s *= state.rho
            s += (1.0 - state.rho) * g * g
            update = g / (np.sqrt(s) + state.eps)
        if state.weight_decay > 0:
            theta -= lr * state.weight_decay * theta
        theta -= lr * update
    return params, state


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_gradient(loss_fn: Callable[[ParameterSet], float], params: ParameterSet,
                         h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences (f(θ+h) - f(θ-h)) / 2h for every coordinate of ``params``."""
    if not h > 0:
        raise ValueError("step h must be positive")
    grads = {}
    for key, theta in params.arrays():
        g = np.zeros_like(theta)
        flat = theta.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn(params)
            flat[i] = orig - h
            fm = loss_fn(params)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"loss is non-finite while perturbing {key}[{i}]")
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[key] = g
    return grads


# ---------------------------------------------------------------------------
# binary tensor / parameter serialization


def write_tensor(buf, a: np.ndarray) -> None:
    a = np.asarray(a, dtype="<f8")
    if a.ndim > MAX_RANK:
        raise DimensionError(f"rank {a.ndim} exceeds {MAX_RANK}")
    buf.write(TENSOR_MAGIC)
    buf.write(struct.pack("<IB", TENSOR_VERSION, a.ndim))
    buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    buf.write(np.ascontiguousarray(a).tobytes())


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise ValueError("unexpected end of data")
    return data


def read_tensor(buf) -> np.ndarray:
    if _read_exact(buf, 4) != TENSOR_MAGIC:
        raise ValueError("bad tensor magic")
    version, rank = struct.unpack("<IB", _read_exact(buf, 5))
    if version != TENSOR_VERSION:
        raise ValueError(f"unsupported tensor version {version}")
    if rank > MAX_RANK:
        raise DimensionError(f"rank {rank} exceeds {MAX_RANK}")
    shape = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank))
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(buf, 8 * count), dtype="<f8")
    return data.astype(DTYPE).reshape(shape)


def tensor_to_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, a)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def write_str(buf, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def read_str(buf) -> str:
    (n,) = struct.unpack("<I", _read_exact(buf, 4))
    return _read_exact(buf, n).decode("utf-8")


def write_params(buf, params: ParameterSet) -> None:
    buf.write(struct.pack("<QI", params.seed & 0xFFFFFFFFFFFFFFFF, len(params.layers)))
    for name, layer in params.layers.items():
        write_str(buf, name)
        write_tensor(buf, layer.weights)
        write_tensor(buf, layer.bias)


def read_params(buf) -> ParameterSet:
    seed, n = struct.unpack("<QI", _read_exact(buf, 12))
    params = ParameterSet(seed=seed)
    for _ in range(n):
        name = read_str(buf)
        params.add(name, read_tensor(buf), read_tensor(buf))
    return params
