"""Layers, parameter plumbing, and optimization on top of the engine.

Components register parameters into an insertion-ordered dict under
hierarchical names, so checkpoints and the optimizer see a stable,
deterministic layout.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .numerics import Tensor


class ParamSet:
    """Named parameter registry with deterministic iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        self._params[name] = tensor
        return tensor

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __len__(self):
        return len(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self._params.items():
            if k not in arrays:
                raise KeyError(f"missing parameter '{k}'")
            arr = np.asarray(arrays[k], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"parameter '{k}': shape {arr.shape} != expected {t.data.shape}"
                )
            t.data = np.ascontiguousarray(arr.copy())


def normal_init(ps: ParamSet, rng, name: str, shape, std: float) -> Tensor:
    return ps.add(name, Tensor(rng.normal(0.0, std, size=shape), requires_grad=True))


def const_init(ps: ParamSet, name: str, shape, value: float) -> Tensor:
    return ps.add(name, Tensor(np.full(shape, value, dtype=np.float32), requires_grad=True))


class Linear:
    """Affine map; accepts any leading shape over the feature axis."""

    def __init__(self, ps: ParamSet, rng, name: str, n_in: int, n_out: int, std=None):
        if std is None:
            std = 0.02
        self.n_in = n_in
        self.n_out = n_out
        self.w = normal_init(ps, rng, f"{name}.w", (n_in, n_out), std)
        self.b = const_init(ps, f"{name}.b", (n_out,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = nm.reshape(x, (-1, self.n_in)) if x.ndim != 2 else x
        out = nm.add(nm.matmul(flat, self.w), self.b)
        if x.ndim != 2:
            out = nm.reshape(out, lead + (self.n_out,))
        return out


class LayerNorm:
    def __init__(self, ps: ParamSet, name: str, dim: int):
        self.g = const_init(ps, f"{name}.g", (dim,), 1.0)
        self.b = const_init(ps, f"{name}.b", (dim,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return nm.layer_norm(x, self.g, self.b)


class Mlp:
    """Two affine maps with a ReLU between them."""

    def __init__(self, ps: ParamSet, rng, name: str, n_in: int, hidden: int, n_out: int, std=None):
        self.fc1 = Linear(ps, rng, f"{name}.fc1", n_in, hidden, std)
        self.fc2 = Linear(ps, rng, f"{name}.fc2", hidden, n_out, std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nm.relu(self.fc1(x)))


class MultiHeadAttention:
    def __init__(self, ps: ParamSet, rng, name: str, dim: int, heads: int):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(ps, rng, f"{name}.q", dim, dim)
        self.wk = Linear(ps, rng, f"{name}.k", dim, dim)
        self.wv = Linear(ps, rng, f"{name}.v", dim, dim)
        self.wo = Linear(ps, rng, f"{name}.o", dim, dim)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        t = x.shape[0]

        def split(z):
            return nm.transpose(nm.reshape(z, (t, self.heads, self.head_dim)), (1, 0, 2))

        q = split(self.wq(x))
        k = split(self.wk(x))
        v = split(self.wv(x))
        att = nm.scale(nm.bmm(q, nm.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.head_dim))
        if mask is not None:
            if mask.shape != (t, t):
                raise nm.ShapeError(f"attention mask {mask.shape} vs rows {t}")
            add_mask = np.broadcast_to(mask, (self.heads, t, t)).astype(np.float32)
            att = nm.add(att, Tensor(add_mask))
        w = nm.softmax(att, axis=-1)
        o = nm.bmm(w, v)
        merged = nm.reshape(nm.transpose(o, (1, 0, 2)), (t, self.dim))
        return self.wo(merged)


class TransformerBlock:
    """Pre-norm residual block: attention then position-wise MLP."""

    def __init__(self, ps: ParamSet, rng, name: str, dim: int, heads: int, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(ps, f"{name}.ln1", dim)
        self.attn = MultiHeadAttention(ps, rng, f"{name}.attn", dim, heads)
        self.ln2 = LayerNorm(ps, f"{name}.ln2", dim)
        self.mlp = Mlp(ps, rng, f"{name}.mlp", dim, mlp_ratio * dim, dim)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = nm.add(x, self.attn(self.ln1(x), mask))
        return nm.add(x, self.mlp(self.ln2(x)))


def causal_mask(n: int, prefix_bidirectional: int = 0) -> np.ndarray:
    """Additive mask: -1e9 above the diagonal.

    With prefix_bidirectional = L > 0, the first L rows may also attend
    to each other freely (prefix-LM variant)."""
    m = np.triu(np.full((n, n), -1e9, dtype=np.float32), k=1)
    if prefix_bidirectional > 0:
        p = min(prefix_bidirectional, n)
        m[:p, :p] = 0.0
    return m


# ---------------------------------------------------------------------------
# optimization


def lr_at(step: int, total: int, peak: float, warmup_frac: float) -> float:
    """Linear warmup to `peak`, then cosine decay to zero."""
    if total <= 0:
        return peak
    warm = max(1, int(round(warmup_frac * total)))
    if step < warm:
        return peak * (step + 1) / warm
    if total <= warm:
        return peak
    frac = (step - warm) / (total - warm)
    return peak * 0.5 * (1.0 + np.cos(np.pi * frac))


def global_grad_norm(tensors) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            g = t.grad.astype(np.float64)
            total += float((g * g).sum())
    return float(np.sqrt(total))


class Adam:
    """Adam with global-norm clipping; moments are float32 state."""

    def __init__(self, params: ParamSet, beta1=0.9, beta2=0.999, eps=1e-8, clip=1.0,
                 skip: set | None = None):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip = clip
        self.step_count = 0
        self.skip = skip or set()
        self.m = {k: np.zeros(v.shape, dtype=np.float32) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape, dtype=np.float32) for k, v in params.items()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        live = [(k, t) for k, t in self.params.items() if k not in self.skip]
        if self.clip and self.clip > 0:
            norm = global_grad_norm(t for _, t in live)
            scale_f = self.clip / norm if norm > self.clip else 1.0
        else:
            scale_f = 1.0
        b1t = 1.0 - self.beta1 ** self.step_count
        b2t = 1.0 - self.beta2 ** self.step_count
        for k, t in live:
            g = (t.grad if t.grad is not None else np.zeros(t.shape, np.float32)).astype(np.float64)
            g = g * scale_f
            m = self.m[k].astype(np.float64) * self.beta1 + (1 - self.beta1) * g
            v = self.v[k].astype(np.float64) * self.beta2 + (1 - self.beta2) * g * g
            self.m[k] = m.astype(np.float32)
            self.v[k] = v.astype(np.float32)
            update = lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            t.data = (t.data.astype(np.float64) - update).astype(np.float32)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params.names():
            out[f"m/{k}"] = self.m[k].copy()
            out[f"v/{k}"] = self.v[k].copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k in self.params.names():
            self.m[k] = np.asarray(arrays[f"m/{k}"], dtype=np.float32).copy()
            self.v[k] = np.asarray(arrays[f"v/{k}"], dtype=np.float32).copy()
