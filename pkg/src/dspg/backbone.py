"""Backbone geometry encoding.

Per-residue features come in two flavors that transform differently
under rigid motion: scalar channels (torsion sines/cosines, a radial
distance expansion) are invariant, and vector channels (local frame
directions) rotate with the structure.  Stacked geometric layers mix the
two while preserving those transformation rules; only rotation-invariant
readouts (row norms) cross from vectors back into scalars.  A token-wise
bidirectional attention stack then yields one embedding row per residue.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .config import RunConfig
from .nn import Linear, ParamSet, TransformerBlock, normal_init, const_init
from .numerics import Tensor

RBF_BINS = 16
RBF_LO = 2.0
RBF_HI = 22.0
SCALAR_RAW = 6 + RBF_BINS  # torsion sin/cos pairs + distance expansion
VECTOR_RAW = 4


class GeometryError(Exception):
    pass


@dataclass
class GeomFeatures:
    s: np.ndarray  # [L, d_s] float32, rotation invariant
    v: np.ndarray  # [L, d_v, 3] float32, rotation equivariant rows


def dihedral_angles(p0, p1, p2, p3):
    """Signed dihedrals (radians) for stacked point quadruples."""
    b0 = p1 - p0
    b1 = p2 - p1
    b2 = p3 - p2
    b1n = b1 / np.linalg.norm(b1, axis=-1, keepdims=True)
    v = b0 - (b0 * b1n).sum(-1, keepdims=True) * b1n
    w = b2 - (b2 * b1n).sum(-1, keepdims=True) * b1n
    x = (v * w).sum(-1)
    y = (np.cross(b1n, v) * w).sum(-1)
    return np.arctan2(y, x)


def _unit(d):
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    return d / np.maximum(n, 1e-12)


def featurize_residues(coords: np.ndarray, d_s: int = 128, d_v: int = 16) -> GeomFeatures:
    """Raw geometry to padded scalar/vector channels.

    coords: [L, 3, 3] float (N, CA, C per residue).  Chain ends zero-pad
    the torsions and neighbor directions they lack.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 3 or coords.shape[1:] != (3, 3):
        raise GeometryError(f"expected [L, 3, 3] backbone coords, got {coords.shape}")
    L = coords.shape[0]
    if L < 2:
        raise GeometryError("need at least 2 residues")
    if d_s < SCALAR_RAW or d_v < VECTOR_RAW:
        raise GeometryError(f"d_s/d_v too small for raw features ({SCALAR_RAW}/{VECTOR_RAW})")
    n_xyz, ca, c_xyz = coords[:, 0], coords[:, 1], coords[:, 2]

    ca_steps = np.linalg.norm(ca[1:] - ca[:-1], axis=-1)
    if np.any(ca_steps < 1e-6):
        raise GeometryError("coincident consecutive CA atoms (degenerate geometry)")

    s = np.zeros((L, d_s), dtype=np.float64)
    # phi(i): C(i-1) N(i) CA(i) C(i)
    phi = dihedral_angles(c_xyz[:-1], n_xyz[1:], ca[1:], c_xyz[1:])
    s[1:, 0] = np.sin(phi)
    s[1:, 1] = np.cos(phi)
    # psi(i): N(i) CA(i) C(i) N(i+1)
    psi = dihedral_angles(n_xyz[:-1], ca[:-1], c_xyz[:-1], n_xyz[1:])
    s[:-1, 2] = np.sin(psi)
    s[:-1, 3] = np.cos(psi)
    # omega between i and i+1: CA(i) C(i) N(i+1) CA(i+1)
    omega = dihedral_angles(ca[:-1], c_xyz[:-1], n_xyz[1:], ca[1:])
    s[:-1, 4] = np.sin(omega)
    s[:-1, 5] = np.cos(omega)
    # Gaussian expansion of the forward CA-CA distance
    centers = np.linspace(RBF_LO, RBF_HI, RBF_BINS)
    sigma = (RBF_HI - RBF_LO) / (RBF_BINS - 1)
    s[:-1, 6 : 6 + RBF_BINS] = np.exp(
        -((ca_steps[:, None] - centers[None, :]) ** 2) / (2.0 * sigma * sigma)
    )

    v = np.zeros((L, d_v, 3), dtype=np.float64)
    v[:, 0] = _unit(n_xyz - ca)
    v[:, 1] = _unit(c_xyz - ca)
    v[:-1, 2] = _unit(ca[1:] - ca[:-1])
    v[1:, 3] = _unit(ca[:-1] - ca[1:])

    return GeomFeatures(s=s.astype(np.float32), v=v.astype(np.float32))


class GvpLayer:
    """One geometric layer over (scalar, vector) residue channels.

    Vector channels are mixed strictly along the channel axis, so a
    rotation applied to the input 3-vectors commutes with the layer;
    scalars see vectors only through row norms.
    """

    def __init__(self, ps: ParamSet, rng, name: str, d_s: int, d_v: int, h_v: int):
        self.d_s, self.d_v, self.h_v = d_s, d_v, h_v
        self.wh = normal_init(ps, rng, f"{name}.wh", (h_v, d_v), 1.0 / np.sqrt(d_v))
        self.wmu = normal_init(ps, rng, f"{name}.wmu", (d_v, h_v), 1.0 / np.sqrt(h_v))
        self.wm = normal_init(ps, rng, f"{name}.wm", (d_s + h_v, d_s), 1.0 / np.sqrt(d_s + h_v))
        self.b = const_init(ps, f"{name}.b", (d_s,), 0.0)

    def _channel_map(self, w: Tensor, vec: Tensor, n_out: int) -> Tensor:
        # [L, c_in, 3] -> [L, n_out, 3] by a matrix on the channel axis
        L = vec.shape[0]
        flat = nm.reshape(nm.transpose(vec, (1, 0, 2)), (vec.shape[1], L * 3))
        out = nm.matmul(w, flat)
        return nm.transpose(nm.reshape(out, (n_out, L, 3)), (1, 0, 2))

    def __call__(self, s: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
        vh = self._channel_map(self.wh, v, self.h_v)
        sh = nm.vec_norm(vh)
        vmu = self._channel_map(self.wmu, vh, self.d_v)
        nmu = nm.vec_norm(vmu)
        s_out = nm.relu(nm.add(nm.matmul(nm.concat([s, sh], axis=1), self.wm), self.b))
        v_out = nm.rowscale(vmu, nm.sigmoid(nmu))
        return s_out, v_out


class BackboneEncoder:
    """featurize -> geometric layers -> flatten -> bidirectional attention."""

    def __init__(self, cfg: RunConfig, ps: ParamSet, rng, prefix: str = "backbone"):
        self.cfg = cfg
        self.gvps = [
            GvpLayer(ps, rng, f"{prefix}.gvp{i}", cfg.d_s, cfg.d_v, cfg.gvp_hidden)
            for i in range(cfg.gvp_layers)
        ]
        self.proj = Linear(ps, rng, f"{prefix}.proj", cfg.d_s + cfg.d_v, cfg.h_s)
        self.blocks = [
            TransformerBlock(ps, rng, f"{prefix}.block{i}", cfg.h_s, cfg.enc_heads)
            for i in range(cfg.enc_layers)
        ]
        from .nn import LayerNorm

        self.ln_out = LayerNorm(ps, f"{prefix}.ln_out", cfg.h_s)

    def encode(self, coords: np.ndarray) -> Tensor:
        feats = featurize_residues(coords, self.cfg.d_s, self.cfg.d_v)
        s = Tensor(feats.s)
        v = Tensor(feats.v)
        for layer in self.gvps:
            s, v = layer(s, v)
        flat = nm.concat([s, nm.vec_norm(v)], axis=1)
        h = self.proj(flat)
        for block in self.blocks:
            h = block(h, mask=None)
        return self.ln_out(h)
