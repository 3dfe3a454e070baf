"""Minimal numerical substrate: float64 reverse-mode autodiff plus layers.

Supports exactly the primitives the trainer composes (arithmetic, matmul,
tanh/sigmoid/exp/log/softplus, squares, reductions, concatenation, slicing
and clamping) over 1-D vectors and 2-D batches. Every op checks its output
for non-finite values and reports the offending primitive, so a NaN cannot
propagate silently. Gradients are exact reverse accumulation; forward values
are bit-identical whether or not gradients are requested.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


class NumericsError(Exception):
    """A primitive produced (or received) a non-finite value."""


class Tensor:
    """A node in the computation graph wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericsError(f"non-finite values in '{op}'")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; non-Tensor operands become constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.data.shape})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, parents=(a, b), op="add")
    out._backward = lambda g: (_accum(a, _unbroadcast(g, a.shape)), _accum(b, _unbroadcast(g, b.shape)))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, parents=(a, b), op="sub")
    out._backward = lambda g: (_accum(a, _unbroadcast(g, a.shape)), _accum(b, _unbroadcast(-g, b.shape)))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, parents=(a, b), op="mul")
    out._backward = lambda g: (
        _accum(a, _unbroadcast(g * b.data, a.shape)),
        _accum(b, _unbroadcast(g * a.data, b.shape)),
    )
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data, parents=(a, b), op="div")
    out._backward = lambda g: (
        _accum(a, _unbroadcast(g / b.data, a.shape)),
        _accum(b, _unbroadcast(-g * a.data / (b.data**2), b.shape)),
    )
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data @ b.data, parents=(a, b), op="matmul")

    def backward(g):
        if a.data.ndim == 1:
            _accum(a, g @ b.data.T)
            _accum(b, np.outer(a.data, g))
        else:
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)

    out._backward = backward
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y, parents=(x,), op="tanh")
    out._backward = lambda g: _accum(x, g * (1.0 - y * y))
    return out


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data)
    out = Tensor(y, parents=(x,), op="sigmoid")
    out._backward = lambda g: _accum(x, g * y * (1.0 - y))
    return out


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = Tensor(y, parents=(x,), op="exp")
    out._backward = lambda g: _accum(x, g * y)
    return out


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data), parents=(x,), op="log")
    out._backward = lambda g: _accum(x, g / x.data)
    return out


def softplus(x: Tensor) -> Tensor:
    out = Tensor(np.logaddexp(0.0, x.data), parents=(x,), op="softplus")
    s = _sigmoid_np(x.data)
    out._backward = lambda g: _accum(x, g * s)
    return out


def square(x: Tensor) -> Tensor:
    out = Tensor(x.data**2, parents=(x,), op="square")
    out._backward = lambda g: _accum(x, g * 2.0 * x.data)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), parents=(x,), op="relu")
    out._backward = lambda g: _accum(x, g * (x.data > 0))
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    out = Tensor(np.clip(x.data, lo, hi), parents=(x,), op="clip")
    mask = (x.data >= lo) & (x.data <= hi)
    out._backward = lambda g: _accum(x, g * mask)
    return out


def tsum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims), parents=(x,), op="sum")

    def backward(g):
        if axis is None or keepdims:
            _accum(x, np.broadcast_to(g, x.shape).copy())
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    out._backward = backward
    return out


def tmean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis, keepdims), _wrap(1.0 / count))


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), parents=tuple(parts), op="concat")
    sizes = [p.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, size in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis if axis >= 0 else g.ndim + axis] = slice(offset, offset + size)
            _accum(p, g[tuple(sl)])
            offset += size

    out._backward = backward
    return out


def narrow(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice [start, stop) along the last axis."""

    out = Tensor(x.data[..., start:stop], parents=(x,), op="narrow")

    def backward(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        _accum(x, full)

    out._backward = backward
    return out


# --- layers ------------------------------------------------------------------


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, scale: float = 1.0) -> np.ndarray:
    bound = scale * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class GruParams:
    """Gates of a single recurrent cell.

    Weight matrices act on the concatenation [x, h]; the new hidden state is
    (1 - z) * h_prev + z * h_candidate, with the candidate gated by z.
    """

    input_size: int
    hidden_size: int
    w_z: Tensor
    w_r: Tensor
    w_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @classmethod
    def create(cls, input_size: int, hidden_size: int, rng: np.random.Generator) -> "GruParams":
        k = input_size + hidden_size

        def w():
            return Tensor(_xavier(rng, k, hidden_size), requires_grad=True)

        def b():
            return Tensor(np.zeros(hidden_size), requires_grad=True)

        return cls(input_size, hidden_size, w(), w(), w(), b(), b(), b())

    def named(self, prefix: str = "gru") -> dict[str, Tensor]:
        return {
            f"{prefix}.w_z": self.w_z,
            f"{prefix}.w_r": self.w_r,
            f"{prefix}.w_h": self.w_h,
            f"{prefix}.b_z": self.b_z,
            f"{prefix}.b_r": self.b_r,
            f"{prefix}.b_h": self.b_h,
        }


def gru_cell_forward(x, h_prev, p: GruParams) -> Tensor:
    """One recurrent update; accepts vectors or (batch, dim) arrays."""

    x = _wrap(x)
    h_prev = _wrap(h_prev)
    xh = concat([x, h_prev])
    z = sigmoid(add(matmul(xh, p.w_z), p.b_z))
    r = sigmoid(add(matmul(xh, p.w_r), p.b_r))
    xrh = concat([x, mul(r, h_prev)])
    h_cand = tanh(add(matmul(xrh, p.w_h), p.b_h))
    return add(mul(sub(_wrap(1.0), z), h_prev), mul(z, h_cand))


@dataclass
class MlpParams:
    """Dense stack: ReLU hidden layers, linear output."""

    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def create(
        cls,
        sizes: list[int],
        rng: np.random.Generator,
        out_scale: float = 1.0,
    ) -> "MlpParams":
        weights, biases = [], []
        for i in range(len(sizes) - 1):
            scale = out_scale if i == len(sizes) - 2 else 1.0
            weights.append(Tensor(_xavier(rng, sizes[i], sizes[i + 1], scale), requires_grad=True))
            biases.append(Tensor(np.zeros(sizes[i + 1]), requires_grad=True))
        return cls(weights, biases)

    def named(self, prefix: str = "mlp") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out


def mlp_forward(x, p: MlpParams) -> Tensor:
    h = _wrap(x)
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = add(matmul(h, w), b)
        if i != last:
            h = relu(h)
    return h


LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0


def mlp_gaussian_head(h, p: MlpParams) -> tuple[Tensor, Tensor]:
    """Split a 2n-wide output into (mu, sigma); log-std clamped to [-20, 2]."""

    out = mlp_forward(h, p)
    n = out.shape[-1]
    if n % 2 != 0:
        raise ValueError("gaussian head needs an even output width")
    mu = narrow(out, 0, n // 2)
    log_std = clip(narrow(out, n // 2, n), LOG_STD_MIN, LOG_STD_MAX)
    return mu, exp(log_std)


# --- gradients and updates ---------------------------------------------------


def evaluate_with_gradients(computation, params: dict[str, Tensor]) -> tuple[float, dict[str, np.ndarray]]:
    """Run a scalar-valued forward expression and reverse-accumulate gradients.

    ``computation`` is a zero-argument callable composing the primitives above
    over the given parameter tensors. Returns the value and one gradient array
    per parameter (zeros for parameters the expression never touches).
    """

    for p in params.values():
        p.grad = None
    out = computation()
    if not isinstance(out, Tensor):
        raise TypeError("computation must return a Tensor")
    out.backward()
    value = float(out.data)
    grads = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    return value, grads


@dataclass
class AdamState:
    """Moment accumulators shaped like the parameters, plus the step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, values: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in values.items()},
            v={k: np.zeros_like(v) for k, v in values.items()},
        )


def adam_update(
    values: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected update; pure, returns fresh arrays and state."""

    t = state.step + 1
    new_vals: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for k, val in values.items():
        g = grads[k]
        if g.shape != val.shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        new_vals[k] = val - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[k] = m
        new_v[k] = v
    return new_vals, AdamState(new_m, new_v, t, state.beta1, state.beta2, state.eps)


def apply_values(params: dict[str, Tensor], values: dict[str, np.ndarray]) -> None:
    for k, p in params.items():
        p.data = np.asarray(values[k], dtype=np.float64)


def param_values(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data for k, p in params.items()}


# --- checkpoints -------------------------------------------------------------

_CKPT_MAGIC = b"VOLTCOORD-CKPT-1\n"


def save_checkpoint(path: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Deterministic container: json header plus raw float64 bytes.

    Byte-for-byte reproducible for identical inputs; round-trips exactly.
    """

    names = sorted(arrays)
    header = {
        "format": 1,
        "meta": meta or {},
        "arrays": [{"name": k, "shape": list(arrays[k].shape)} for k in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        for k in names:
            f.write(np.ascontiguousarray(arrays[k], dtype=np.float64).tobytes())


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        n = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(n).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            arrays[spec["name"]] = np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()
    return arrays, header.get("meta", {})
