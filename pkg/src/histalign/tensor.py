"""Small dense tensor library with tape-based reverse-mode autodiff.

Every op records itself on the active :class:`Tape` when at least one input
requires a gradient. Outside a tape (or with constant inputs) ops are plain
numpy calls, which is how the momentum encoder and evaluation forwards run.

All data is float64.
"""
from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

HTEN_MAGIC = b"HTEN"
HTEN_VERSION = 1


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "retains_grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.retains_grad = False
        self._tape = None  # set when produced by a recorded op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._tape is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def retain_grad(self):
        """Keep this intermediate's gradient after ``backward``."""
        self.retains_grad = True
        return self

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


class Tape:
    """Ordered record of differentiable ops.

    Entries are appended as ops execute, so the list is already in
    topological order. Use as a context manager to make it the active tape.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple, Callable]] = []
        self.consumed = False

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    def __len__(self):
        return len(self.entries)

    @classmethod
    def active(cls):
        return cls._stack[-1] if cls._stack else None


@contextmanager
def no_grad():
    """Suspend recording, e.g. for momentum-encoder forwards."""
    saved = Tape._stack
    Tape._stack = []
    try:
        yield
    finally:
        Tape._stack = saved


def _record(out_data, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = Tape.active()
    out = Tensor(out_data)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.entries.append((out, tuple(inputs), backward))
    return out


def _accumulate(grads, t, g):
    k = id(t)
    grads[k] = grads[k] + g if k in grads else g


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` of every leaf (and retained intermediate) reachable from ``loss``.

    Gradients accumulate into ``.grad``; callers zero them between steps.
    A tape can be consumed by ``backward`` only once.
    """
    if loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or loss._tape
    if tape is None:
        raise RuntimeError("loss was not produced on a tape")
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward call")
    grads = {id(loss): np.ones((), dtype=DTYPE)}
    produced = set()
    for out, inputs, back in reversed(tape.entries):
        produced.add(id(out))
        g = grads.pop(id(out), None)
        if g is None:
            continue
        if out.retains_grad:
            if out.grad is None:
                out.grad = np.zeros_like(out.data)
            out.grad += g
        for t, gi in zip(inputs, back(g)):
            if gi is not None and t.requires_grad:
                _accumulate(grads, t, gi)
    for _, inputs, _ in tape.entries:
        for t in inputs:
            if id(t) in produced:
                continue
            g = grads.pop(id(t), None)
            if g is not None:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g
    tape.consumed = True


def grad(output: Tensor, inputs: Sequence[Tensor], tape: Tape | None = None) -> list[np.ndarray]:
    """Gradients of scalar ``output`` w.r.t. ``inputs`` without touching ``.grad``.

    The tape stays usable afterwards, so a later ``backward`` on a different
    loss from the same tape still works. Results are constants (no graph).
    """
    if output.ndim != 0:
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
    tape = tape or output._tape
    if tape is None:
        return [np.zeros_like(t.data) for t in inputs]
    targets = {id(t) for t in inputs}
    produced = {id(e[0]) for e in tape.entries}
    pending = targets & produced
    leaf_targets = bool(targets - produced)
    grads = {id(output): np.ones((), dtype=DTYPE)}
    kept = {}
    for out, ins, back in reversed(tape.entries):
        if not pending and not leaf_targets:
            break
        key = id(out)
        g = grads.pop(key, None)
        if key in pending:
            pending.discard(key)
            if g is not None:
                kept[key] = g
        if g is None:
            continue
        for t, gi in zip(ins, back(g)):
            if gi is not None and t.requires_grad:
                _accumulate(grads, t, gi)
    for k in targets - produced:
        if k in grads:
            kept[k] = grads[k]
    return [kept.get(id(t), np.zeros_like(t.data)) for t in inputs]


def zero_grad(params) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise


def _binary_operand(a: Tensor, b) -> tuple[Tensor, str]:
    """Classify the right operand: same shape, scalar, or a bias matching trailing axes."""
    b = as_tensor(b)
    if b.shape == a.shape:
        return b, "same"
    if b.ndim == 0:
        return b, "scalar"
    if 1 <= b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return b, "bias"
    raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(g, kind, b_shape):
    if kind == "same":
        return g
    if kind == "scalar":
        return np.asarray(g.sum())
    return g.reshape((-1,) + tuple(b_shape)).sum(axis=0)


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b, kind = _binary_operand(a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, kind, b.shape)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b, kind = _binary_operand(a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, kind, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b, kind = _binary_operand(a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, kind, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data.copy())


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports ``[m,k] @ [k,n]``, ``[...,m,k] @ [k,n]`` (a shared weight) and
    batched ``[...,m,k] @ [...,k,n]`` with identical leading extents.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    shared = bd.ndim == 2 and ad.ndim > 2
    if shared:
        # one flat GEMM instead of a broadcast loop over leading axes
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))
    else:
        out = ad @ bd

    def back(g):
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _record(out, (a, b), back)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def index(x: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate."""
    shape = x.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record(x.data[idx], (x,), back)


def take(x: Tensor, ids) -> Tensor:
    """Rows of ``x`` along axis 0 (embedding lookup / gather)."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = x.shape

    def back(g):
        # scatter-add as a one-hot matmul; much faster than np.add.at
        flat = ids.ravel()
        onehot = np.zeros((shape[0], flat.size), dtype=DTYPE)
        onehot[flat, np.arange(flat.size)] = 1.0
        return ((onehot @ g.reshape(flat.size, -1)).reshape(shape),)

    return _record(x.data[ids], (x,), back)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _record(np.concatenate([x.data for x in xs], axis=axis), xs,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(x.data.sum(axis=axis), (x,), back)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def l1_sum(x: Tensor) -> Tensor:
    """Sum of absolute values; subgradient at 0 is 0."""
    sign = np.sign(x.data)
    return _record(np.abs(x.data).sum(), (x,), lambda g: (g * sign,))


# ---------------------------------------------------------------------------
# normalisation / probability


def softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction.

    ``mask`` is a boolean array broadcastable to ``x``; False entries get
    probability exactly 0.
    """
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    p = z - z.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(p, (x,), back)


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {x.shape}")
    return softmax(x)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, target, reduction: str = "mean") -> Tensor:
    """Cross-entropy of ``[n,k]`` logits against class ids or soft labels.

    Soft labels are constants. ``reduction`` is "mean" or "sum" over rows.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n,k] logits, got {logits.shape}")
    n, k = logits.shape
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if target.ndim == 1:
        ids = target.astype(np.int64)
        if ids.shape[0] != n:
            raise ShapeError(f"{n} rows of logits but {ids.shape[0]} labels")
        if np.any(ids < 0) or np.any(ids >= k):
            raise IndexError(f"label out of range [0,{k}): {ids.tolist()}")
        soft = np.zeros((n, k), dtype=DTYPE)
        soft[np.arange(n), ids] = 1.0
    else:
        soft = np.asarray(target, dtype=DTYPE)
        if soft.shape != (n, k):
            raise ShapeError(f"soft labels {soft.shape} do not match logits {logits.shape}")
        # non-finite labels propagate as a non-finite loss instead of failing here
        if np.all(np.isfinite(soft)) and not np.allclose(soft.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("soft-label rows must sum to 1")
    logp = log_softmax(logits.data)
    scale = 1.0 / n if reduction == "mean" else 1.0
    loss = -(soft * logp).sum() * scale
    p = np.exp(logp)
    return _record(np.asarray(loss), (logits,), lambda g: (g * scale * (p - soft),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """LayerNorm over the last axis with affine parameters."""
    xd = x.data
    xc = xd - xd.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    d = xd.shape[-1]

    def back(g):
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _record(xhat * gd + beta.data, (x, gamma, beta), back)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each vector along the last axis to unit length."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True)) + eps
    y = xd / norm
    return _record(y, (x,), lambda g: ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,))


# ---------------------------------------------------------------------------
# HTEN binary blobs


def pack_tensor(x) -> bytes:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype="<f8", order="C")
    head = HTEN_MAGIC + struct.pack("<II", HTEN_VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def unpack_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one HTEN blob starting at ``offset``; returns (array, end offset)."""
    if buf[offset:offset + 4] != HTEN_MAGIC:
        raise ValueError("bad HTEN magic")
    if len(buf) < offset + 12:
        raise ValueError("truncated HTEN header")
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != HTEN_VERSION:
        raise ValueError(f"unsupported HTEN version {version}")
    pos = offset + 12
    if len(buf) < pos + 8 * rank:
        raise ValueError("truncated HTEN extents")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(shape, dtype=np.int64))
    end = pos + 8 * count
    if len(buf) < end:
        raise ValueError(f"truncated HTEN payload: expected {8 * count} bytes, got {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(DTYPE).reshape(shape)
    return arr, end


def save_tensor(x, path) -> None:
    with open(path, "wb") as fh:
        fh.write(pack_tensor(x))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = unpack_tensor(buf)
    if end != len(buf):
        raise ValueError(f"{len(buf) - end} trailing bytes after HTEN blob")
    return arr
