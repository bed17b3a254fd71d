"""Dense float32 tensors with tape-based reverse-mode differentiation.

Design notes
------------
* Storage is row-major float32; every op computes in float64 internally
  (reductions, dot products, softmax sums) and rounds the result back to
  the storage dtype.  This keeps desk-scale training stable without a
  mixed-precision story.
* The tape is define-by-run: entering a `Tape` context records every op
  whose inputs require gradients, in execution order.  `Tape.backward`
  walks the records once, in reverse, which is a valid topological order
  by construction.
* No broadcasting, with one exception: `add` accepts a 1-D bias whose
  length matches the trailing axis.  Every other shape mix raises
  `ShapeError`.  Ops that need structured broadcasts (`rowscale`,
  `expand_slots`) exist as explicit primitives instead.
* Tapes are thread-confined (thread-local active-tape stack).  Tensors
  may move between threads once no live tape references them.
* `float64_mode` switches op outputs to float64.  It exists so that the
  finite-difference oracle in `gradient_check` can evaluate functions
  without float32 rounding noise; normal forward/backward never uses it.
"""

from __future__ import annotations

import threading

import numpy as np


class NumericsError(Exception):
    """Base class for engine failures."""


class ShapeError(NumericsError):
    """Operands have incompatible or unsupported shapes."""


class VocabularyError(NumericsError):
    """A classification target id falls outside the logit axis."""


class EvaluationError(NumericsError):
    """A checked function produced a non-finite value."""


_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = []
        _STATE.tapes = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _float64_on() -> bool:
    return getattr(_STATE, "float64", False)


def _store_dtype():
    return np.float64 if _float64_on() else np.float32


class float64_mode:
    """Context manager: ops keep float64 outputs while active."""

    def __enter__(self):
        self._prev = _float64_on()
        _STATE.float64 = True
        return self

    def __exit__(self, *exc):
        _STATE.float64 = self._prev
        return False


def _contiguous(arr: np.ndarray) -> np.ndarray:
    # ascontiguousarray would promote 0-d scalars to shape (1,)
    if arr.ndim == 0 or arr.flags["C_CONTIGUOUS"]:
        return arr
    return np.ascontiguousarray(arr)


class Tensor:
    """A dense array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _store_dtype():
            arr = arr.astype(_store_dtype())
        self.data = _contiguous(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def assert_finite(self, what: str = "tensor") -> None:
        if not np.all(np.isfinite(self.data)):
            raise EvaluationError(f"non-finite values in {what}")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Records ops for one reverse sweep.  Rebuilt every step."""

    def __init__(self):
        self.ops: list = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        if popped is not self:
            raise NumericsError("tape stack corrupted")
        return False

    def backward(self, out: Tensor, grad=None) -> None:
        """Accumulate gradients of `out` into every leaf that wants them.

        `grad` seeds the sweep (defaults to ones).  Each recorded op is
        visited exactly once, in reverse execution order.
        """
        if grad is None:
            seed = np.ones(out.shape, dtype=np.float64)
        else:
            seed = np.asarray(grad, dtype=np.float64)
            if seed.shape != out.data.shape:
                raise ShapeError(
                    f"seed gradient shape {seed.shape} != output shape {out.data.shape}"
                )
        pending: dict[int, list] = {id(out): [out, seed]}
        for t, inputs, bwd in reversed(self.ops):
            entry = pending.pop(id(t), None)
            if entry is None:
                continue
            gout = entry[1]
            for inp, gin in zip(inputs, bwd(gout)):
                if gin is None or not inp.requires_grad:
                    continue
                held = pending.get(id(inp))
                if held is None:
                    pending[id(inp)] = [inp, gin]
                else:
                    held[1] = held[1] + gin
        for t, g in pending.values():
            if not t.requires_grad:
                continue
            g32 = np.ascontiguousarray(g.astype(t.data.dtype))
            t.grad = g32 if t.grad is None else t.grad + g32


def _record(arr: np.ndarray, inputs: tuple, bwd) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _contiguous(np.asarray(arr).astype(_store_dtype()))
    out.grad = None
    out.requires_grad = any(i.requires_grad for i in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.ops.append((out, inputs, bwd))
    return out


def _d64(t: Tensor) -> np.ndarray:
    return t.data.astype(np.float64, copy=False)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Same-shape addition, or trailing-axis bias when b is 1-D."""
    bias = False
    if a.shape != b.shape:
        if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
            bias = True
        else:
            raise ShapeError(f"add: {a.shape} vs {b.shape}")
    arr = _d64(a) + _d64(b)
    if bias:
        lead = tuple(range(a.ndim - 1))

        def bwd(g):
            return g, g.sum(axis=lead) if lead else g
    else:

        def bwd(g):
            return g, g

    return _record(arr, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    return _record(_d64(a) - _d64(b), (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    a64, b64 = _d64(a), _d64(b)
    return _record(a64 * b64, (a, b), lambda g: (g * b64, g * a64))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(_d64(a) * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def rowscale(v: Tensor, s: Tensor) -> Tensor:
    """Scale each trailing-axis row of v by a scalar from s.

    v: [..., d, k], s: [..., d]; every k-vector v[..., i, :] is multiplied
    by s[..., i].  Explicit primitive so no generic broadcasting leaks in.
    """
    if v.shape[:-1] != s.shape:
        raise ShapeError(f"rowscale: {v.shape} vs {s.shape}")
    v64, s64 = _d64(v), _d64(s)
    arr = v64 * s64[..., None]

    def bwd(g):
        return g * s64[..., None], (g * v64).sum(axis=-1)

    return _record(arr, (v, s), bwd)


def expand_slots(a: Tensor, reps: int) -> Tensor:
    """Tile [..., c] to [..., reps, c]; backward sums over the new axis."""
    if reps < 1:
        raise ShapeError("expand_slots: reps must be >= 1")
    a64 = _d64(a)
    arr = np.repeat(a64[..., None, :], reps, axis=-2)
    return _record(arr, (a,), lambda g: (g.sum(axis=-2),))


def relu(a: Tensor) -> Tensor:
    a64 = _d64(a)
    mask = a64 > 0.0
    return _record(np.where(mask, a64, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-_d64(a)))
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    arr = _d64(a).reshape(shape)
    return _record(arr, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    arr = _d64(a).transpose(axes)
    return _record(arr, (a,), lambda g: (g.transpose(inv),))


def concat(parts, axis: int) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat: no inputs")
    arrs = [_d64(p) for p in parts]
    sizes = [arr.shape[axis] for arr in arrs]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate(arrs, axis=axis), parts, bwd)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup table[ids]; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError("gather_rows: ids must be 1-D")
    if table.ndim != 2:
        raise ShapeError("gather_rows: table must be 2-D")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise VocabularyError(f"gather_rows: id outside [0, {n})")
    arr = _d64(table)[ids]

    def bwd(g):
        gt = np.zeros(table.shape, dtype=np.float64)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(arr, (table,), bwd)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if rate < 0.0 or rate >= 1.0:
        raise NumericsError(f"dropout rate {rate} outside [0, 1)")
    if rate == 0.0:
        return scale(a, 1.0)
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    a64 = _d64(a)
    return _record(a64 * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# contractions and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    a64, b64 = _d64(a), _d64(b)
    return _record(a64 @ b64, (a, b), lambda g: (g @ b64.T, a64.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul on stacks of matrices: [n,p,q] @ [n,q,r]."""
    if (
        a.ndim != 3
        or b.ndim != 3
        or a.shape[0] != b.shape[0]
        or a.shape[2] != b.shape[1]
    ):
        raise ShapeError(f"bmm: {a.shape} @ {b.shape}")
    a64, b64 = _d64(a), _d64(b)
    return _record(
        a64 @ b64,
        (a, b),
        lambda g: (g @ b64.transpose(0, 2, 1), a64.transpose(0, 2, 1) @ g),
    )


def tsum(a: Tensor, axis=None) -> Tensor:
    a64 = _d64(a)
    if axis is None:
        arr = np.asarray(a64.sum())

        def bwd(g):
            return (np.broadcast_to(g, a.shape).astype(np.float64),)
    else:

        def bwd(g):
            return (np.repeat(np.expand_dims(g, axis), a.shape[axis], axis=axis),)

        arr = a64.sum(axis=axis)
    return _record(arr, (a,), bwd)


def tmean(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]
    a64 = _d64(a)

    def bwd(g):
        return (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,)

    return _record(a64.mean(axis=axis), (a,), bwd)


def amax(a: Tensor, axis: int) -> Tensor:
    """Max along an axis; backward routes to the first argmax."""
    a64 = _d64(a)
    arr = a64.max(axis=axis)
    idx = a64.argmax(axis=axis)

    def bwd(g):
        ga = np.zeros(a.shape, dtype=np.float64)
        np.put_along_axis(
            ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis
        )
        return (ga,)

    return _record(arr, (a,), bwd)


def vec_norm(a: Tensor) -> Tensor:
    """L2 norm along the last axis.  Exact at zero; backward is guarded."""
    a64 = _d64(a)
    y = np.sqrt((a64 * a64).sum(axis=-1))

    def bwd(g):
        denom = np.maximum(y, 1e-12)
        return (g[..., None] * a64 / denom[..., None],)

    return _record(y, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a64 = _d64(a)
    shifted = a64 - a64.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(y, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: affine shapes {gain.shape}/{bias.shape} vs {n}")
    x64, g64, b64 = _d64(x), _d64(gain), _d64(bias)
    mu = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * inv
    arr = xhat * g64 + b64
    lead = tuple(range(x.ndim - 1))

    def bwd(g):
        dxhat = g * g64
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        dgain = (g * xhat).sum(axis=lead) if lead else g * xhat
        dbias = g.sum(axis=lead) if lead else g
        return dx, dgain, dbias

    return _record(arr, (x, gain, bias), bwd)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean masked cross-entropy over rows of [T, V] logits.

    Masked rows contribute nothing; an all-masked call returns 0 with
    zero gradients.  Unmasked targets must be valid ids.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    nrows, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (nrows,):
        raise ShapeError(f"cross_entropy: targets shape {targets.shape} vs {nrows}")
    if mask is None:
        m = np.ones(nrows, dtype=np.float64)
    else:
        m = np.asarray(mask, dtype=np.float64)
        if m.shape != (nrows,):
            raise ShapeError(f"cross_entropy: mask shape {m.shape} vs {nrows}")
    live = m > 0.0
    if np.any(live):
        bad = targets[live]
        if bad.min() < 0 or bad.max() >= vocab:
            raise VocabularyError(
                f"cross_entropy: target id outside [0, {vocab})"
            )
    z = _d64(logits)
    z = z - z.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    count = m.sum()
    safe_targets = np.where(live, targets, 0)
    if count > 0.0:
        arr = np.asarray(-(logp[np.arange(nrows), safe_targets] * m).sum() / count)
    else:
        arr = np.asarray(0.0)

    def bwd(g):
        if count <= 0.0:
            return (np.zeros(logits.shape, dtype=np.float64),)
        p = np.exp(logp)
        p[np.arange(nrows), safe_targets] -= 1.0
        return (float(np.asarray(g).reshape(())) * p * (m[:, None] / count),)

    return _record(arr, (logits,), bwd)


# ---------------------------------------------------------------------------
# gradient checking


def gradient_check(f, params, n_samples: int = 64, step: float = 1e-3, seed: int = 0):
    """Max relative error between tape gradients and central differences.

    `f` is a nullary function returning a scalar Tensor; it must read
    `params` (a list of Tensors) at call time.  Finite differences are
    evaluated under `float64_mode` so the oracle is limited by the step,
    not by float32 rounding.  Relative error uses denominator
    max(|g_fd|, |g_ad|, 1e-8) per sampled coordinate.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    if loss.data.size != 1:
        raise ShapeError("gradient_check: f must return a scalar")
    loss.assert_finite("gradient_check loss")
    tape.backward(loss)
    grads = []
    for p in params:
        g = p.grad if p.grad is not None else np.zeros(p.shape, p.data.dtype)
        grads.append(np.asarray(g, dtype=np.float64).ravel())

    sizes = [p.data.size for p in params]
    total = int(np.sum(sizes))
    rng = np.random.default_rng(seed)
    if total <= n_samples:
        flat_ids = np.arange(total)
    else:
        flat_ids = rng.choice(total, size=n_samples, replace=False)
    bounds = np.cumsum([0] + sizes)

    worst = 0.0
    with float64_mode():
        for fid in flat_ids:
            pi = int(np.searchsorted(bounds, fid, side="right") - 1)
            ci = int(fid - bounds[pi])
            p = params[pi]
            orig = p.data
            vals = []
            for sgn in (+1.0, -1.0):
                shadow = orig.astype(np.float64)
                shadow.flat[ci] += sgn * step
                p.data = shadow
                out = f()
                out.assert_finite("gradient_check probe")
                vals.append(out.item())
                p.data = orig
            g_fd = (vals[0] - vals[1]) / (2.0 * step)
            g_ad = grads[pi][ci]
            denom = max(abs(g_fd), abs(g_ad), 1e-8)
            worst = max(worst, abs(g_ad - g_fd) / denom)
    return worst
