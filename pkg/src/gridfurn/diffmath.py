"""Small dense-tensor autodiff engine on top of numpy.

Operations are recorded on the innermost active :class:`Tape`; outside a tape
they only compute values. ``backward`` walks the tape in reverse and
accumulates into ``.grad`` of every tensor that requires gradients.

    >>> w = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> tape.backward(loss)
    >>> w.grad
    array([2., 2., 2.])
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "parameter",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "concat",
    "reshape",
    "transpose",
    "tsum",
    "mean",
    "backward",
    "grad_check",
    "AdamState",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

ArrayLike = Union[np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    # -- conveniences --------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def parameter(data: ArrayLike, name: str = "", dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def constant(data: ArrayLike, dtype=None) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, dtype=dtype)


# -- tape ----------------------------------------------------------------------

_ACTIVE: List["Tape"] = []


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: List[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
        backward(loss, tape=self, grad=grad)


def _record(out: np.ndarray, parents: Tuple[Tensor, ...], fn: Callable[[np.ndarray], None]) -> Tensor:
    result = Tensor(out)
    if _ACTIVE and any(p.requires_grad for p in parents):
        result.requires_grad = True
        result._parents = parents
        result._backward = fn
        _ACTIVE[-1].nodes.append(result)
    return result


def backward(loss: Tensor, tape: Optional[Tape] = None, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1 and grad is None:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if tape is None:
        if not _ACTIVE:
            raise RuntimeError("no tape given and none active")
        tape = _ACTIVE[-1]
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.data.dtype)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None or node._backward is None:
            continue
        node._backward(g)
        # Intermediate gradients are not kept; leaves keep theirs.
        node.grad = None


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise binary --------------------------------------------------------


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data, "add")

    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _record(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data, "sub")

    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _record(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data, "mul")

    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _record(a.data * b.data, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data, "div")
    out = a.data / b.data

    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _record(out, (a, b), fn)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    out = np.matmul(a.data, b.data)

    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _record(out, (a, b), fn)


# -- elementwise unary ---------------------------------------------------------


def relu(x) -> Tensor:
    x = _lift(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: x._accumulate(g * mask))


def tanh(x) -> Tensor:
    x = _lift(x)
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: x._accumulate(g * (1.0 - out * out)))


def sigmoid(x) -> Tensor:
    x = _lift(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record(out, (x,), lambda g: x._accumulate(g * out * (1.0 - out)))


def exp(x) -> Tensor:
    x = _lift(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: x._accumulate(g * out))


def log(x, floor: Optional[float] = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped from below first."""
    x = _lift(x)
    if floor is None:
        return _record(np.log(x.data), (x,), lambda g: x._accumulate(g / x.data))
    live = x.data > floor
    safe = np.where(live, x.data, floor)
    return _record(np.log(safe), (x,), lambda g: x._accumulate(np.where(live, g / safe, 0.0)))


def softmax(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _record(out, (x,), fn)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def fn(g):
        x._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _record(out, (x,), fn)


# -- structural ----------------------------------------------------------------


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def fn(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _record(out, tuple(ts), fn)


def take(x, index) -> Tensor:
    """``x[index]`` with numpy indexing semantics (basic or advanced)."""
    x = _lift(x)
    out = x.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def fn(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        x._accumulate(full)

    return _record(np.array(out, copy=True), (x,), fn)


def reshape(x, shape: Tuple[int, ...]) -> Tensor:
    x = _lift(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from exc
    return _record(out, (x,), lambda g: x._accumulate(g.reshape(x.shape)))


def transpose(x, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    x = _lift(x)
    out = np.transpose(x.data, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _record(out, (x,), lambda g: x._accumulate(np.transpose(g, inverse)))


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _record(np.asarray(out), (x,), fn)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# -- gradient checking ---------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    mode: str = "element",
) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f`` takes no arguments and reads ``params`` by closure. With
    ``mode="element"`` the error for one coordinate is
    ``|a - n| / (|a| + 1e-8)``. With ``mode="tensor"`` it is
    ``||a - n|| / (||a|| + ||n|| + 1e-30)`` per parameter tensor, which is not
    dominated by round-off on near-zero coordinates of large models.
    """
    if mode not in ("element", "tensor"):
        raise ValueError(f"unknown grad_check mode {mode!r}")
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    if loss.data.size != 1:
        raise ShapeError("grad_check needs a scalar function")
    tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f().data)
            flat[i] = orig - h
            down = float(f().data)
            flat[i] = orig
            num_flat[i] = (up - down) / (2 * h)
        if mode == "element":
            err = np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8), initial=0.0)
        else:
            err = np.linalg.norm(analytic - numeric) / (np.linalg.norm(analytic) + np.linalg.norm(numeric) + 1e-30)
        worst = max(worst, float(err))
        p.zero_grad()
    return worst


# -- ADAM ----------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment buffers and a step counter.

    ``step`` is a one-element array so that it can live in shared memory
    alongside the moment buffers.
    """

    m: List[np.ndarray]
    v: List[np.ndarray]
    step: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **hyper,
        )


def adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]], state: AdamState) -> None:
    """In-place bias-corrected ADAM update of ``params``."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("params, grads and optimizer state differ in length")
    state.step[0] += 1
    t = int(state.step[0])
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"GFCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Header manifest followed by little-endian arrays in manifest order.

    Layout: ``b"GFCKPT"``, uint32 header length, UTF-8 JSON header, raw data.
    """
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str})
        blobs.append(np.ascontiguousarray(le).tobytes())
    header = {"format_version": CHECKPOINT_VERSION, "tensors": entries, "meta": meta or {}}
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    offset = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, offset)
    offset += 4
    header = json.loads(data[offset : offset + hlen])
    offset += hlen
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    arrays = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated data for {entry['name']}")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="))
        offset += nbytes
    return arrays, header["meta"]
