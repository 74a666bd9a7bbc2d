"""Minimal define-by-run reverse-mode automatic differentiation.

Tensors wrap immutable float64 numpy arrays. Operations executed while a
:class:`Tape` is active are recorded on it whenever at least one input is
tracked (a ``requires_grad`` leaf or the output of a recorded operation);
everything else runs as plain numpy with no graph bookkeeping, which is how
frozen model parameters avoid gradient buffers entirely.

There is no broadcasting: binary elementwise ops require identical shapes.
Use :func:`expand`, :func:`reshape` or the purpose-built ops
(:func:`linear`, :func:`layer_norm`, :func:`masked_add`) instead.

Example::

    x = Tensor(np.arange(3.0), requires_grad=True)
    with Tape() as tape:
        y = sum_(mul(x, x))
    (gx,) = tape.gradient(y, [x])      # 2 * x
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "DegenerateInputError", "backward", "grad_check",
    "add", "sub", "mul", "scale", "neg", "matmul", "linear", "bmm", "reshape",
    "transpose", "expand", "sum_", "mean", "exp", "log", "tanh", "gelu",
    "softmax", "log_softmax", "layer_norm", "concat", "embedding", "index",
    "masked_add", "pad2d", "token_nll", "softmax_cross_entropy", "l2_norm",
    "cosine_similarity", "square_sum",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class DegenerateInputError(ValueError):
    """Raised for inputs where an op is undefined (e.g. zero-norm vectors)."""


class Tensor:
    """Immutable dense float64 array that can participate in a tape."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal fast path: takes ownership of a fresh array without copying
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> list[float]:
        """Flat row-major value sequence."""
        return self.data.ravel().tolist()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray, tuple[bool, ...]], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    tensor: Tensor
    parents: tuple[Optional[int], ...]
    backward: Optional[BackwardFn]  # None for leaves


@dataclass
class Tape:
    """Append-only record of operations; parents always precede children."""

    nodes: list[Node] = field(default_factory=list)

    def __post_init__(self):
        self._index: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def node_id(self, t: Tensor) -> Optional[int]:
        return self._index.get(id(t))

    def _track(self, t: Tensor) -> Optional[int]:
        nid = self._index.get(id(t))
        if nid is None and t.requires_grad:
            nid = self._append(t, (), None)
        return nid

    def _append(self, t: Tensor, parents, fn) -> int:
        nid = len(self.nodes)
        self.nodes.append(Node(t, tuple(parents), fn))
        self._index[id(t)] = nid
        return nid

    def gradient(self, seed: Tensor, sources: Sequence[Tensor]) -> list[Tensor]:
        """Gradients of ``seed`` w.r.t. each source (zeros if unreachable)."""
        grads = backward(self, seed)
        out = []
        for s in sources:
            nid = self.node_id(s)
            g = grads.get(nid) if nid is not None else None
            out.append(Tensor._wrap(np.zeros(s.shape) if g is None else g.data))
        return out


_TAPES: list[Tape] = []


def _record(data: np.ndarray, parents: Sequence[Tensor], fn: BackwardFn) -> Tensor:
    out = Tensor._wrap(data)
    if _TAPES:
        tape = _TAPES[-1]
        ids = [tape._track(p) for p in parents]
        if any(i is not None for i in ids):
            out.requires_grad = True
            tape._append(out, ids, fn)
    return out


def backward(tape: Tape, seed: Tensor) -> dict[int, Tensor]:
    """Reverse accumulation from a scalar seed; returns node_id -> gradient."""
    if seed.size != 1 or seed.ndim > 1:
        raise ShapeError(f"backward seed must be scalar, got shape {seed.shape}")
    sid = tape.node_id(seed)
    if sid is None:
        raise ShapeError("backward seed is not recorded on this tape")
    acc: dict[int, np.ndarray] = {sid: np.ones(seed.shape)}
    for nid in range(sid, -1, -1):
        g = acc.get(nid)
        node = tape.nodes[nid]
        if g is None or node.backward is None:
            continue
        needs = tuple(p is not None for p in node.parents)
        pgrads = node.backward(g, needs)
        for pid, pg in zip(node.parents, pgrads):
            if pid is None or pg is None:
                continue
            if pid in acc:
                acc[pid] = acc[pid] + pg
            else:
                acc[pid] = pg
    return {k: Tensor._wrap(v) for k, v in acc.items()}


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g, n: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g, n: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g, n: (g * bd if n[0] else None, g * ad if n[1] else None))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.data * c, (a,), lambda g, n: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _record(y, (a,), lambda g, n: (g * y,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.log(ad), (a,), lambda g, n: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g, n: (g * (1.0 - y * y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def bw(g, n):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record(y, (a,), bw)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b),
                   lambda g, n: (g @ bd.T if n[0] else None, ad.T @ g if n[1] else None))


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x[..., k] @ w[k, n] (+ b[n])`` applied over all leading axes."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, wd.shape[0])
    y = x2 @ wd
    if b is not None:
        y = y + b.data
    out_shape = xd.shape[:-1] + (wd.shape[1],)

    def bw(g, n):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if n[0] else None
        gw = x2.T @ g2 if n[1] else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if n[2] else None)

    parents = (x, w) if b is None else (x, w, b)
    return _record(y.reshape(out_shape), parents, bw)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product ``a[..., m, k] @ b[..., k, n]`` with equal leading axes."""
    if a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record(
        ad @ bd, (a, b),
        lambda g, n: (g @ np.swapaxes(bd, -1, -2) if n[0] else None,
                      np.swapaxes(ad, -1, -2) @ g if n[1] else None))


# --------------------------------------------------------------------------
# shape manipulation
# --------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from err
    return _record(y, (a,), lambda g, n: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g, n: (np.transpose(g, inv),))


def expand(a: Tensor, leading: Sequence[int]) -> Tensor:
    """Repeat ``a`` over new leading axes: result shape ``leading + a.shape``."""
    leading = tuple(leading)
    y = np.broadcast_to(a.data, leading + a.shape).copy()
    k = len(leading)
    return _record(y, (a,), lambda g, n: (g.sum(axis=tuple(range(k))),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    arrs = [t.data for t in tensors]
    ax = axis % arrs[0].ndim
    for t in tensors[1:]:
        if t.ndim != arrs[0].ndim or any(
                d1 != d2 for i, (d1, d2) in enumerate(zip(t.shape, arrs[0].shape)) if i != ax):
            raise ShapeError(f"concat: shapes {[x.shape for x in arrs]} mismatch off axis {axis}")
    bounds = np.cumsum([0] + [x.shape[ax] for x in arrs])

    def bw(g, n):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if n[i] else None
                     for i in range(len(arrs)))

    return _record(np.concatenate(arrs, axis=ax), tuple(tensors), bw)


def index(a: Tensor, idx) -> Tensor:
    """Numpy-style (fancy) indexing; gradient scatters back with accumulation."""
    src = a.shape

    def bw(g, n):
        out = np.zeros(src)
        np.add.at(out, idx, g)
        return (out,)

    return _record(np.array(a.data[idx]), (a,), bw)


def pad2d(a: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the last two axes."""
    pads = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
    h, w = a.shape[-2:]
    return _record(np.pad(a.data, pads), (a,),
                   lambda g, n: (g[..., top:top + h, left:left + w],))


def masked_add(base: Tensor, delta: Tensor, mask: np.ndarray) -> Tensor:
    """``base + mask * delta`` with ``delta``/``mask`` repeated over base's leading axes."""
    mask = np.asarray(mask, dtype=np.float64)
    if delta.shape != mask.shape or base.shape[base.ndim - delta.ndim:] != delta.shape:
        raise ShapeError(f"masked_add: base {base.shape}, delta {delta.shape}, mask {mask.shape}")
    md = mask * delta.data
    k = base.ndim - delta.ndim

    def bw(g, n):
        gd = (g.sum(axis=tuple(range(k))) if k else g) * mask if n[1] else None
        return g, gd

    return _record(base.data + md, (base, delta), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: ids outside [0, {table.shape[0]})")
    return index(table, ids)


# --------------------------------------------------------------------------
# reductions and normalisation
# --------------------------------------------------------------------------

def sum_(a: Tensor, axis=None) -> Tensor:
    src = a.shape
    y = a.data.sum(axis=axis)

    def bw(g, n):
        if axis is None:
            return (np.full(src, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _record(np.asarray(y), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis), 1.0 / count)


def square_sum(a: Tensor) -> Tensor:
    """Sum of squares as a scalar."""
    ad = a.data
    return _record(np.asarray(np.sum(ad * ad)), (a,), lambda g, n: (2.0 * float(g) * ad,))


def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _record(y, (a,), lambda g, n: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _record(y, (a,), lambda g, n: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply per-feature gain and bias."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape}/beta {beta.shape} for input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    y = xhat * gd + beta.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g, n):
        gx = None
        if n[0]:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggam = (g * xhat).sum(axis=lead) if n[1] else None
        gbet = g.sum(axis=lead) if n[2] else None
        return gx, ggam, gbet

    return _record(y, (x, gamma, beta), bw)


# --------------------------------------------------------------------------
# losses and geometry
# --------------------------------------------------------------------------

def token_nll(logits: Tensor, targets) -> Tensor:
    """Per-row negative log-likelihood ``-log softmax(logits[i])[targets[i]]``.

    ``logits`` is (N, V); ``targets`` an int array of length N. Uses the
    log-sum-exp stabilised form.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"token_nll: logits {logits.shape}, targets {targets.shape}")
    v = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"token_nll: target outside vocabulary of size {v}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]
    rows = np.arange(len(targets))
    y = lse - z[rows, targets]

    def bw(g, n):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * g[:, None],)

    return _record(y, (logits,), bw)


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """``-log softmax(logits)[target]`` for a 1-D logit vector, as a scalar."""
    if logits.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy expects a vector, got {logits.shape}")
    if not 0 <= target < logits.shape[0]:
        raise IndexError(f"target {target} outside [0, {logits.shape[0]})")
    nll = token_nll(reshape(logits, (1, -1)), [target])
    return reshape(nll, ())


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm of all entries; gradient at the zero tensor is zero."""
    xd = x.data
    r = float(np.sqrt(np.sum(xd * xd)))

    def bw(g, n):
        if r == 0.0:
            return (np.zeros_like(xd),)
        return (float(g) * xd / r,)

    return _record(np.asarray(r), (x,), bw)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity along the last axis (scalar for 1-D inputs)."""
    _same_shape(u, v, "cosine_similarity")
    ud, vd = u.data, v.data
    nu = np.sqrt((ud * ud).sum(axis=-1, keepdims=True))
    nv = np.sqrt((vd * vd).sum(axis=-1, keepdims=True))
    if np.any(nu == 0) or np.any(nv == 0):
        raise DegenerateInputError("cosine_similarity: zero-norm input")
    c = (ud * vd).sum(axis=-1, keepdims=True) / (nu * nv)

    def bw(g, n):
        gk = np.asarray(g)[..., None]
        gu = gk * (vd / (nu * nv) - c * ud / (nu * nu)) if n[0] else None
        gv = gk * (ud / (nu * nv) - c * vd / (nv * nv)) if n[1] else None
        return gu, gv

    return _record(c[..., 0], (u, v), bw)


# --------------------------------------------------------------------------
# finite-difference checking
# --------------------------------------------------------------------------

def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5,
               coords: Optional[Sequence[int]] = None) -> float:
    """Worst relative error between autodiff and central differences.

    ``fn`` maps a Tensor to a scalar Tensor. Every coordinate is checked
    unless ``coords`` (flat indices) restricts the set. The relative error
    uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        y = fn(x)
    if not np.isfinite(y.data).all():
        raise FloatingPointError("grad_check: non-finite function value")
    analytic = tape.gradient(y, [x])[0].data.ravel()
    flat = x0.ravel()
    worst = 0.0
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        xp = flat.copy()
        xp[i] += step
        xm = flat.copy()
        xm[i] -= step
        fp = fn(Tensor(xp.reshape(x0.shape))).item()
        fm = fn(Tensor(xm.reshape(x0.shape))).item()
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"grad_check: non-finite value at coordinate {i}")
        num = (fp - fm) / (2 * step)
        den = max(abs(analytic[i]), abs(num), 1e-8)
        worst = max(worst, abs(analytic[i] - num) / den)
    return worst
