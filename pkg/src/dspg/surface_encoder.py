"""Surface cloud encoder: point patches to per-residue context rows.

Farthest point sampling picks patch centers and k nearest neighbors
form each patch.  Every point that lands in a patch gets a chemical
embedding of its 16 nearest atoms (mean-field message rounds over the
atom slots) fused with its curvature scalars.  Patches max-pool to
tokens, two attention blocks mix the tokens, and the elementwise max
over tokens becomes one global descriptor repeated for every residue.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .nn import Linear, Mlp, ParamSet, TransformerBlock
from .numerics import Tensor
from .surface import SurfaceCloud, SurfaceError

CHEM_DIM = 6
FUSE_DIM = CHEM_DIM + 10  # chemistry + (H, K) at five probe radii
MESSAGE_ROUNDS = 3
SURF_BLOCKS = 2
PAD_POOL_BIAS = -1e30


def farthest_point_sample(points: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    """Greedy max-min selection of k center indices.

    The first center is drawn from a seeded stream; afterwards the point
    farthest from the chosen set wins, ties going to the lowest index."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if k < 1 or k > n:
        raise SurfaceError(f"cannot pick {k} centers from {n} points")
    rng = np.random.default_rng([seed, 2])
    centers = np.empty(k, dtype=np.int64)
    centers[0] = int(rng.integers(n))
    d2 = ((pts - pts[centers[0]]) ** 2).sum(-1)
    for i in range(1, k):
        nxt = int(np.argmax(d2))
        centers[i] = nxt
        d2 = np.minimum(d2, ((pts - pts[nxt]) ** 2).sum(-1))
    return centers


def knn_patches(points: np.ndarray, center_idx: np.ndarray, k: int) -> np.ndarray:
    """[G, k] point indices nearest each center.

    Ascending distance, exact ties broken by point index; each center is
    a member of its own patch (distance zero)."""
    pts = np.asarray(points, dtype=np.float64)
    if k > len(pts):
        raise SurfaceError(f"patch size {k} exceeds {len(pts)} points")
    diff = pts[np.asarray(center_idx)][:, None, :] - pts[None, :, :]
    d = np.sqrt((diff * diff).sum(-1))
    order = np.argsort(d, axis=1, kind="stable")
    return order[:, :k]


class ChemEmbed:
    """Embeds a point's 16 nearest atoms into a small chemistry vector.

    Atom rows are encoded independently, then refined by message rounds
    that add a transform of the slot mean back onto every slot, and
    finally mean-pooled.  The result is invariant to slot order."""

    def __init__(self, ps: ParamSet, rng, prefix: str):
        self.atom = Mlp(ps, rng, f"{prefix}.atom", 7, 32, CHEM_DIM)
        self.rounds = [
            Mlp(ps, rng, f"{prefix}.round{i}", CHEM_DIM, 32, CHEM_DIM)
            for i in range(MESSAGE_ROUNDS)
        ]

    def __call__(self, neigh: np.ndarray) -> Tensor:
        slots = neigh.shape[1]
        h = self.atom(Tensor(np.asarray(neigh, dtype=np.float32)))
        for mlp in self.rounds:
            msg = mlp(nm.tmean(h, axis=1))
            h = nm.add(h, nm.expand_slots(msg, slots))
        return nm.tmean(h, axis=1)


class FeatureFuser:
    """Joins chemistry with curvature scalars, then two residual blocks."""

    def __init__(self, ps: ParamSet, rng, prefix: str):
        self.block0 = Mlp(ps, rng, f"{prefix}.res0", FUSE_DIM, 32, FUSE_DIM)
        self.block1 = Mlp(ps, rng, f"{prefix}.res1", FUSE_DIM, 32, FUSE_DIM)

    def __call__(self, chem: Tensor, curv: np.ndarray) -> Tensor:
        x = nm.concat([chem, Tensor(np.asarray(curv, dtype=np.float32))], axis=1)
        x = nm.add(x, self.block0(x))
        return nm.add(x, self.block1(x))


class SurfaceEncoder:
    """Whole-surface descriptor, one copy per residue row."""

    def __init__(self, cfg, ps: ParamSet, rng, prefix: str = "surface"):
        self.cfg = cfg
        self.chem = ChemEmbed(ps, rng, f"{prefix}.chem")
        self.fuse = FeatureFuser(ps, rng, f"{prefix}.fuse")
        self.lift = Linear(ps, rng, f"{prefix}.lift", FUSE_DIM, cfg.surf_d)
        self.blocks = [
            TransformerBlock(ps, rng, f"{prefix}.block{i}", cfg.surf_d, cfg.enc_heads)
            for i in range(SURF_BLOCKS)
        ]
        self.head1 = Linear(ps, rng, f"{prefix}.head1", cfg.surf_d, cfg.h_g)
        self.head2 = Linear(ps, rng, f"{prefix}.head2", cfg.h_g, cfg.h_s)

    def encode(self, cloud: SurfaceCloud, length: int, seed: int = 0, centers=None) -> Tensor:
        """[length, h_s] context rows, identical across rows.

        `centers` overrides farthest point sampling; tests use it to pin
        patch composition."""
        cfg = self.cfg
        if centers is None:
            centers = farthest_point_sample(cloud.points, cfg.surf_g, seed)
        patches = knn_patches(cloud.points, centers, cfg.surf_k)
        # only points some patch actually contains need features
        used = np.unique(patches)
        local = np.searchsorted(used, patches)
        fused = self.fuse(self.chem(cloud.neighborhoods[used]), cloud.curv[used])
        grid = nm.reshape(
            nm.gather_rows(fused, local.reshape(-1)),
            (len(patches), cfg.surf_k, FUSE_DIM),
        )
        # padded duplicates never win the patch max; a patch made purely
        # of padding keeps all members instead
        pad = cloud.pad_mask[patches]
        pad = pad & ~pad.all(axis=1)[:, None]
        if pad.any():
            bias = np.where(pad, PAD_POOL_BIAS, 0.0).astype(np.float32)[:, :, None]
            grid = nm.add(grid, Tensor(np.broadcast_to(bias, grid.shape).copy()))
        tokens = nm.amax(grid, axis=1)
        x = self.lift(tokens)
        for block in self.blocks:
            x = block(x)
        x = self.head2(nm.relu(self.head1(x)))
        pooled = nm.amax(x, axis=0)
        return nm.expand_slots(pooled, length)
