"""Tape-based reverse-mode differentiation over dense numpy arrays.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient; outside a tape every op is a plain numpy
evaluation, which is what inference and finite-difference checks use.

    with Tape() as tape:
        loss = ad.sum(ad.tanh(x @ w))
    tape.backward(loss)       # accumulates into w.grad
"""

from __future__ import annotations

import json
import math
import struct
import weakref
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .sparse import SparseMatrix, spmm as _spmm, transpose as _sp_transpose

_TAPES: list["Tape"] = []


class Tape:
    """Append-only record of differentiable operations."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: "Tensor") -> None:
        backward(self, loss)

    def clear(self) -> None:
        self.nodes.clear()


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "vjp", "index", "__weakref__")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.parents: tuple = ()
        self.vjp = None
        self.index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)


class ParamTensor(Tensor):
    """Learnable leaf tensor carrying Adam moments."""

    __slots__ = ("name", "m", "v", "step_count")

    def __init__(self, name: str, value):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step_count = 0

    def __repr__(self) -> str:
        return f"ParamTensor({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(value, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``value`` as the output of an op with vector-Jacobian product ``vjp``.

    ``vjp(g)`` must return one gradient (or ``None``) per parent.
    """
    tape = _TAPES[-1] if _TAPES else None
    out = Tensor(value)
    if tape is None or not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    out.parents = tuple(parents)
    out.vjp = vjp
    out.index = len(tape.nodes)
    tape.nodes.append(out)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into every reachable leaf's ``grad``, then clear the tape."""
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        tape.clear()
        return
    if loss.vjp is None:
        loss.grad += 1.0
        tape.clear()
        return
    adj = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.vjp is None:
                parent.grad += pg
                continue
            if parent.index >= node.index:
                raise RuntimeError("tape is not topologically ordered (cycle detected)")
            key = id(parent)
            prev = adj.get(key)
            adj[key] = pg if prev is None else prev + pg
    tape.clear()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return custom_op(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return custom_op(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return custom_op(
        av * bv,
        (a, b),
        lambda g: (
            _unbroadcast(g * bv, av.shape) if a.requires_grad else None,
            _unbroadcast(g * av, bv.shape) if b.requires_grad else None,
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(-a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """2-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    return custom_op(
        av @ bv,
        (a, b),
        lambda g: (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None),
    )


_TRANSPOSES: "weakref.WeakKeyDictionary[SparseMatrix, SparseMatrix]" = weakref.WeakKeyDictionary()


def sparse_transpose(s: SparseMatrix) -> SparseMatrix:
    """Cached transpose, used by the adjoints of sparse products."""
    t = _TRANSPOSES.get(s)
    if t is None:
        t = _TRANSPOSES[s] = _sp_transpose(s)
    return t


def spmm(s: SparseMatrix, x) -> Tensor:
    """Product of a constant sparse matrix with a differentiable dense matrix."""
    x = as_tensor(x)
    return custom_op(_spmm(s, x.value), (x,), lambda g: (_spmm(sparse_transpose(s), g),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return custom_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.value)
    return custom_op(t, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.value > 0
    return custom_op(np.where(pos, x.value, 0.0), (x,), lambda g: (g * pos,))


def identity(x) -> Tensor:
    return as_tensor(x)


def absolute(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.value)
    return custom_op(np.abs(x.value), (x,), lambda g: (g * sign,))


def square(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    return custom_op(v * v, (x,), lambda g: (2.0 * g * v,))


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return custom_op(np.sum(x.value, axis=axis), (x,), vjp)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.value.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / count)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return custom_op(np.concatenate([x.value for x in xs], axis=ax), xs, vjp)


def getitem(x, key) -> Tensor:
    """Basic slicing (no fancy indexing)."""
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[key] = g
        return (out,)

    return custom_op(x.value[key], (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return custom_op(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return custom_op(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


# ----------------------------------------------------------------------------
# optimisation


def zero_grad(params: Iterable[ParamTensor]) -> None:
    for p in params:
        p.zero_grad()


def grad_norm(params: Iterable[ParamTensor]) -> float:
    return math.sqrt(float(np.sum([np.vdot(p.grad, p.grad) for p in params])))


def clip_grad_norm(params: Sequence[ParamTensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = grad_norm(params)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


def adam_step(
    params: Iterable[ParamTensor],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update.  Gradients are left untouched."""
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        p.step_count += 1
        t = p.step_count
        p.m *= beta1
        p.m += (1.0 - beta1) * p.grad
        p.v *= beta2
        p.v += (1.0 - beta2) * np.square(p.grad)
        m_hat = p.m / (1.0 - beta1**t)
        v_hat = p.v / (1.0 - beta2**t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


def lr_schedule(epoch: int, base_lr: float, start_epoch: int, period: int, factor: float) -> float:
    """Step decay: multiply by ``factor`` at ``start_epoch`` and every ``period`` epochs after."""
    if period < 1:
        raise ValueError(f"period must be >= 1, got {period}")
    if not 0 < factor <= 1:
        raise ValueError(f"factor must lie in (0, 1], got {factor}")
    if epoch < start_epoch:
        return base_lr
    return base_lr * factor ** ((epoch - start_epoch) // period + 1)


def init_params(shape, rng_seed, scheme: str = "glorot_uniform", name: str = "param") -> ParamTensor:
    """Deterministic initialisation.

    ``glorot_uniform`` draws from ``U[-s, s]`` with ``s = sqrt(6 / (fan_in + fan_out))``
    where ``fan_in, fan_out = shape[0], shape[-1]``; ``zeros`` is for biases.
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if scheme == "zeros":
        return ParamTensor(name, np.zeros(shape))
    if scheme != "glorot_uniform":
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    fan_in, fan_out = shape[0], shape[-1]
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return ParamTensor(name, rng.uniform(-s, s, size=shape))


# ----------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"DCRNNCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Sequence[ParamTensor], meta: dict | None = None) -> None:
    """Binary checkpoint: magic, u32 version, u64 header length, JSON header, raw ``<f8`` blobs.

    For every tensor (in header order) the blob holds value, Adam ``m`` and
    Adam ``v``, each in C order.
    """
    header = {
        "meta": meta or {},
        "tensors": [{"name": p.name, "shape": list(p.shape), "step_count": p.step_count} for p in params],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(raw)))
        fh.write(raw)
        for p in params:
            for arr in (p.value, p.m, p.v):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, ParamTensor], dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC or len(data) < 8 + struct.calcsize("<IQ"):
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 8 + struct.calcsize("<IQ")
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, ValueError):
        header = None
    if not isinstance(header, dict) or "tensors" not in header or "meta" not in header:
        raise CheckpointError(f"{path}: corrupt checkpoint header")
    pos += hlen
    out: dict[str, ParamTensor] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64))
        arrays = []
        for _ in range(3):
            nbytes = 8 * size
            if pos + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated data for {entry['name']!r}")
            arrays.append(np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64))
            pos += nbytes
        p = ParamTensor(entry["name"], arrays[0])
        p.m, p.v = arrays[1], arrays[2]
        p.step_count = int(entry["step_count"])
        out[p.name] = p
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes after tensor data")
    return out, header["meta"]


# ----------------------------------------------------------------------------
# finite differences


def numerical_grad(fn: Callable[[], float], p: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``fn()`` with respect to ``p.value``."""
    g = np.zeros_like(p.value)
    flat = p.value.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn())
        flat[i] = orig - h
        fm = float(fn())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom
