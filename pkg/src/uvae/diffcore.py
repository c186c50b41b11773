"""Small reverse-mode differentiation engine over float64 numpy arrays.

Every operation records its parents and a closure mapping the upstream
gradient to parent gradients.  ``Tensor.backward`` walks the recorded graph
in reverse topological order.  Arrays may carry a leading batch axis; all
broadcasting follows numpy rules and is undone on the way back.
"""
from __future__ import annotations

import struct
from collections.abc import Callable, Iterator, Mapping
from pathlib import Path

import numpy as np
from scipy.special import expit

__all__ = [
    "ContractViolation",
    "NonFiniteError",
    "Tensor",
    "ParamSet",
    "as_tensor",
    "gradient",
    "value_and_grad",
    "dense_layer",
    "tanh",
    "softplus",
    "sigmoid",
    "exp",
    "log",
    "square",
    "sqrt",
    "softmax",
    "log_softmax",
    "logsumexp",
    "concat",
    "clip",
    "floor",
    "tsum",
    "tmean",
    "dot",
    "save_params",
    "load_params",
]

ACTIVATIONS = ("identity", "tanh", "softplus", "sigmoid", "softmax")


class ContractViolation(ValueError):
    """Raised when an operation is called outside its precondition."""


class NonFiniteError(ArithmeticError):
    """Raised when a primitive produces NaN or infinity."""

    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by primitive '{op}'")
        self.op = op


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    """A float64 array node in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"

    @classmethod
    def _make(cls, data, parents, backward, op) -> Tensor:
        if type(data) is not np.ndarray or data.dtype != np.float64:
            data = np.asarray(data, dtype=np.float64)
        if not np.isfinite(data).all():
            raise NonFiniteError(op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor({self.data!r}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)),
            "sub",
        )

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other) - self

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._make(
            x * y,
            (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._make(
            x / y,
            (self, other),
            lambda g: (
                _unbroadcast(g / y, x.shape),
                _unbroadcast(-g * x / (y * y), y.shape),
            ),
            "div",
        )

    def __rtruediv__(self, other) -> Tensor:
        return as_tensor(other) / self

    def __neg__(self) -> Tensor:
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, p: float) -> Tensor:
        if isinstance(p, Tensor):
            raise ContractViolation("tensor exponents are not supported")
        x = self.data
        return Tensor._make(
            x**p, (self,), lambda g: (g * p * x ** (p - 1),), "pow"
        )

    def __matmul__(self, other) -> Tensor:
        other = as_tensor(other)
        x, y = self.data, other.data
        if x.ndim != 2 or y.ndim != 2:
            raise ContractViolation("matmul expects two matrices")
        if x.shape[1] != y.shape[0]:
            raise ContractViolation(f"matmul shape mismatch {x.shape} @ {y.shape}")
        return Tensor._make(
            x @ y, (self, other), lambda g: (g @ y.T, x.T @ g), "matmul"
        )

    def __getitem__(self, idx) -> Tensor:
        shape = self.shape

        def back(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(self.data[idx], (self,), back, "index")

    @property
    def T(self) -> Tensor:
        return Tensor._make(self.data.T, (self,), lambda g: (g.T,), "transpose")

    def reshape(self, *shape) -> Tensor:
        old = self.shape
        return Tensor._make(
            self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),), "reshape"
        )

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis=axis, keepdims=keepdims)

    # -- reverse sweep ----------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise ContractViolation(
                f"backward requires a scalar objective, got shape {self.shape}"
            )
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise primitives ---------------------------------------------------


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return Tensor._make(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return Tensor._make(np.logaddexp(0.0, x.data), (x,), lambda g: (g * s,), "softplus")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return Tensor._make(e, (x,), lambda g: (g * e,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.log(x.data)
    return Tensor._make(v, (x,), lambda g: (g / x.data,), "log")


def square(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        r = np.sqrt(x.data)
    return Tensor._make(r, (x,), lambda g: (0.5 * g / r,), "sqrt")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; gradient passes only where the input was inside."""
    x = as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)
    return Tensor._make(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,), "clip")


def floor(x, eta: float) -> Tensor:
    """max(x, eta) with the gradient of the identity above the floor."""
    x = as_tensor(x)
    mask = x.data > eta
    return Tensor._make(np.maximum(x.data, eta), (x,), lambda g: (g * mask,), "floor")


# -- reductions and vector maps -----------------------------------------------


def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return Tensor._make(
        x.data.sum(axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (_expand(g, shape, axis, keepdims),),
        "sum",
    )


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    n = x.data.size if axis is None else shape[axis]
    return Tensor._make(
        x.data.mean(axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (_expand(g, shape, axis, keepdims) / n,),
        "mean",
    )


def dot(a, b) -> Tensor:
    """Inner product along the last axis."""
    return tsum(as_tensor(a) * as_tensor(b), axis=-1)


def logsumexp(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    p = e / s
    return Tensor._make(out, (x,), lambda g: (np.expand_dims(g, axis) * p,), "logsumexp")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._make(p, (x,), back, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), back, "log_softmax")


def concat(parts, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._make(
        np.concatenate([p.data for p in parts], axis=axis),
        tuple(parts),
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


_ACT = {
    "identity": lambda t: t,
    "tanh": tanh,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "softmax": softmax,
}


def activate(x, activation: str) -> Tensor:
    try:
        return _ACT[activation](as_tensor(x))
    except KeyError:
        raise ContractViolation(f"unknown activation {activation!r}") from None


def dense_layer(W, b, x, activation: str = "identity") -> Tensor:
    """activation(W @ x + b) for a vector x, or row-wise for a batch.

    W has shape (out, in); x has shape (in,) or (batch, in).
    """
    W, b, x = as_tensor(W), as_tensor(b), as_tensor(x)
    if W.ndim != 2 or b.shape != (W.shape[0],):
        raise ContractViolation(f"bias shape {b.shape} does not match W {W.shape}")
    if x.shape[-1] != W.shape[1]:
        raise ContractViolation(
            f"input length {x.shape[-1]} does not match W columns {W.shape[1]}"
        )
    if x.ndim == 1:
        h = (x.reshape(1, -1) @ W.T).reshape(-1) + b
    else:
        h = x @ W.T + b
    return activate(h, activation)


# -- parameters ----------------------------------------------------------------

PARTITIONS = ("theta", "phi")


class ParamSet(Mapping):
    """Immutable named collection of parameter arrays.

    Identifiers are ``"<partition>/<network>/<name>"`` so the theta/phi split
    survives serialization.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        items = {}
        for key, value in arrays.items():
            part = key.split("/", 1)[0]
            if part not in PARTITIONS:
                raise ContractViolation(f"identifier {key!r} lacks a theta/phi prefix")
            arr = np.array(value, dtype=np.float64)
            arr.setflags(write=False)
            items[key] = arr
        self._arrays = items

    def __getitem__(self, key: str) -> np.ndarray:
        return self._arrays[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def partition(self, key: str) -> str:
        return key.split("/", 1)[0]

    def network(self, key: str) -> str:
        return key.split("/")[1]

    def keys_in(self, partition: str) -> list[str]:
        return [k for k in self._arrays if self.partition(k) == partition]

    def replace(self, updates: Mapping[str, np.ndarray]) -> ParamSet:
        merged = dict(self._arrays)
        merged.update(updates)
        return ParamSet(merged)

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> ParamSet:
        return ParamSet({k: fn(v) for k, v in self._arrays.items()})

    def num_values(self) -> int:
        return sum(v.size for v in self._arrays.values())


def gradient(objective: Callable[[dict[str, Tensor]], Tensor], params: ParamSet) -> ParamSet:
    """d objective / d p for every parameter p."""
    return value_and_grad(objective, params)[1]


def value_and_grad(
    objective: Callable[[dict[str, Tensor]], Tensor], params: ParamSet
) -> tuple[float, ParamSet]:
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    out = objective(leaves)
    if not isinstance(out, Tensor):
        out = as_tensor(out)
    if out.data.size != 1:
        raise ContractViolation(f"objective must be scalar, got shape {out.shape}")
    value = out.item()
    if not np.isfinite(value):
        raise NonFiniteError(out.op)
    if out.requires_grad:
        out.backward()
    grads = {
        k: (leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data))
        for k, leaf in leaves.items()
    }
    return value, ParamSet(grads)


# -- binary format ---------------------------------------------------------------

MAGIC = b"UVAE"
FORMAT_VERSION = 1


def save_params(params: ParamSet, path) -> None:
    """Write the flat little-endian binary form of ``params``."""
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(params))]
    for key, arr in params.items():
        name = key.encode("utf-8")
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> ParamSet:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    pos = 12
    arrays = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            key = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(buf):
                raise ValueError(f"{path}: truncated payload for {key!r} at byte {pos}")
            arrays[key] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
    except struct.error as exc:
        raise ValueError(f"{path}: truncated file at byte {pos}") from exc
    return ParamSet(arrays)
