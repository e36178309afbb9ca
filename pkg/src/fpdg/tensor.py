"""Dense tensors with tape-based reverse-mode differentiation.

Arrays are numpy-backed. Every differentiable operation appends a record
``(output, inputs, backward_fn)`` to the active :class:`Tape`; ``backward``
replays the records in reverse order.  Broadcasting follows numpy's size-1
rule and gradients are summed back onto the original operand shape.
"""
from __future__ import annotations

import contextlib
import contextvars
import itertools
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float32
_ids = itertools.count(1)
_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)
_active_tape = contextvars.ContextVar("active_tape", default=None)


class DimensionError(ValueError):
    pass


class CheckpointError(ValueError):
    """Malformed checkpoint, or one that does not fit the model being loaded."""


class NonFiniteGradient(FloatingPointError):
    pass


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _DTYPE = dtype


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.node_id = next(_ids)
        self.name = name
        self._tape = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


class Tape:
    """Ordered record of operations for one computation graph.

    Use as a context manager to confine a graph; outside any ``with Tape()``
    block operations go to a module-level default tape.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self):
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple, fn: Callable) -> None:
        out._tape = self
        self.records.append((out, inputs, fn))

    def clear(self) -> None:
        for out, _, _ in self.records:
            out._tape = None
        self.records.clear()

    def backward(self, loss: Tensor, retain_graph: bool = False) -> None:
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ValueError("loss does not depend on any tensor requiring grad")
        if loss.is_leaf:
            loss.grad = loss.grad + np.ones_like(loss.data)
            return
        grads = {loss.node_id: np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(out.node_id, None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    if inp.grad is None or inp.grad.shape != gi.shape:
                        inp.grad = (0 if inp.grad is None else inp.grad) + gi
                    else:
                        inp.grad += gi      # leaf grads are owned arrays; accumulate in place
                elif inp.node_id in grads:
                    grads[inp.node_id] = grads[inp.node_id] + gi
                else:
                    grads[inp.node_id] = gi
        if not retain_graph:
            self.clear()


_default_tape = Tape()


def current_tape() -> Tape:
    tape = _active_tape.get()
    return _default_tape if tape is None else tape


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    tape = loss._tape if loss._tape is not None else current_tape()
    tape.backward(loss, retain_graph=retain_graph)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.node_id = next(_ids)
    out.name = None
    out._tape = None
    out.grad = None
    out.requires_grad = _grad_enabled.get() and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        current_tape().record(out, tuple(inputs), fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    if a.data.shape == b.data.shape:
        return a.data.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid_grad(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * y * (1.0 - y)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (_sigmoid_grad(y, g),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * pos,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.data >= lo
    return _make(np.maximum(a.data, lo).astype(a.data.dtype), (a,), lambda g: (g * keep,))


def weighted_sum(weights: Tensor, items: Tensor) -> Tensor:
    """``Σ_i w[..., i] * items[..., i, :]`` for weights (..., T) and items (..., T, d)."""
    w = reshape(weights, weights.shape[:-1] + (1, weights.shape[-1]))
    out = matmul(w, items)
    return reshape(out, out.shape[:-2] + (out.shape[-1],))


# ------------------------------------------------------------------ reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(y), (a,), fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), fn)


# --------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    need_a, need_b = a.requires_grad, b.requires_grad

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if need_b else None
        return ga, gb

    return _make(ad @ bd, (a, b), fn)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    if axis not in (-1, len(ref) - 1):
        raise DimensionError(f"concat supports the last axis only, got axis={axis}")
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:-1] != ref[:-1]:
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])
    return _make(np.concatenate([t.data for t in tensors], axis=-1), tensors,
                 lambda g: tuple(g[..., lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])))


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[..., start:stop] = g
        return (out,)

    return _make(a.data[..., start:stop], (a,), fn)


def index(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), fn)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return _make(table.data[ids], (table,), fn)


def pick(a: Tensor, ids) -> Tensor:
    """Select ``a[..., ids]`` per row: (B, K) with ids (B,) gives (B,)."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[rows, ids] = g
        return (out,)

    return _make(a.data[rows, ids], (a,), fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return _make(np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


# ------------------------------------------------------------------------ LSTM


class LSTMParams:
    """Packed LSTM weights: ``W`` is (in + hidden, 4*hidden), gate order i, f, o, g."""

    def __init__(self, W: Tensor, b: Tensor):
        if W.ndim != 2 or b.shape != (W.shape[1],) or W.shape[1] % 4:
            raise DimensionError(f"lstm params: bad shapes W{W.shape} b{b.shape}")
        self.W, self.b = W, b

    @property
    def hidden(self) -> int:
        return self.W.shape[1] // 4

    @property
    def input_size(self) -> int:
        return self.W.shape[0] - self.hidden


def _lstm_gates(z: Tensor, c_prev: Tensor) -> Tensor:
    """Fused gate nonlinearity: z = [x, h] W + b (B, 4d) and c_prev (B, d) -> [h, c] (B, 2d)."""
    d = c_prev.shape[-1]
    zd, cp = z.data, c_prev.data
    i = _sigmoid(zd[..., :d])
    f = _sigmoid(zd[..., d:2 * d])
    o = _sigmoid(zd[..., 2 * d:3 * d])
    g = np.tanh(zd[..., 3 * d:])
    c = f * cp + i * g
    tc = np.tanh(c)
    h = o * tc

    def fn(grad):
        gh, gc = grad[..., :d], grad[..., d:]
        gc = gc + gh * o * (1.0 - tc * tc)
        gz = np.concatenate([_sigmoid_grad(i, gc * g), _sigmoid_grad(f, gc * cp),
                             _sigmoid_grad(o, gh * tc), gc * i * (1.0 - g * g)], axis=-1)
        return gz, gc * f

    return _make(np.concatenate([h, c], axis=-1), (z, c_prev), fn)


def lstm_step(params: LSTMParams, h_prev: Tensor, c_prev: Tensor, x: Tensor):
    """One standard LSTM step: i, f, o = sigmoid, g = tanh, c = f*c' + i*g, h = o*tanh(c)."""
    d = params.hidden
    if h_prev.shape[-1] != d or c_prev.shape[-1] != d or x.shape[-1] != params.input_size:
        raise DimensionError(
            f"lstm_step: h{h_prev.shape} c{c_prev.shape} x{x.shape} vs hidden={d}, input={params.input_size}")
    z = concat([x, h_prev]) @ params.W + params.b
    hc = _lstm_gates(z, c_prev)
    return slice_last(hc, 0, d), slice_last(hc, d, 2 * d)


# ------------------------------------------------------------------- optimizer


class Adam:
    """Bias-corrected Adam over a mapping of named parameters."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None or not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(f"non-finite gradient in parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            p.data = (p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def adam_step(params: dict, state: Adam) -> dict:
    state.params = params
    state.step()
    return params


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(np.sum([np.sum(p.grad.astype(np.float64) ** 2) for p in params])))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total


# ------------------------------------------------------------------ checkpoint

MAGIC = b"FPDG1"


def save_params(path, params: dict, meta: bytes = b"") -> None:
    """Write ``MAGIC, u32 meta_len, meta, then per parameter:
    u32 name_len, name, u32 rank, u32 extents..., float32 LE data``."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        for name, p in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[bytes, dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an FPDG1 checkpoint")
    pos = len(MAGIC)
    (mlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = buf[pos:pos + mlen]
    pos += mlen
    arrays = {}
    try:
        _parse_entries(buf, pos, arrays)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({e})") from None
    return meta, arrays


def _parse_entries(buf: bytes, pos: int, arrays: dict) -> None:
    while pos < len(buf):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count


def load_params(path, params: dict) -> bytes:
    """Fill ``params`` in place from a checkpoint; returns the metadata bytes."""
    meta, arrays = read_checkpoint(path)
    for name, arr in arrays.items():
        if name not in params:
            raise CheckpointError(f"checkpoint parameter {name!r} is unknown to this model")
        if arr.shape != params[name].shape:
            raise CheckpointError(
                f"checkpoint parameter {name!r} has shape {arr.shape}, model expects {params[name].shape}")
    missing = set(params) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
    for name, arr in arrays.items():
        params[name].data = arr.astype(params[name].data.dtype)
    return meta
