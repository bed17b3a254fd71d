"""Molecular surface extraction from atom coordinates.

The protein is modeled as a smooth union of van der Waals spheres: a
soft-min signed distance field

    D(x) = -tau * ln sum_i exp(-(|x - a_i| - r_i) / tau)

whose zero level set is the surface.  Points are found by seeding
candidates on per-atom shells and running a damped Newton projection
onto D = 0, then thinned to a minimum spacing, capped or padded to a
fixed budget, and annotated with normals, two curvature scalars at five
probe radii, and the 16 nearest atoms (element one-hot + distance).

Thinning uses a true minimum-distance rule (first kept point wins)
rather than axis-aligned grid cells, so the accepted subset commutes
with rigid motions of the input; the hash grid below is only an exact
accelerator for the distance queries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .structure_io import ELEMENTS, ProteinRecord

TAU_DEFAULT = 0.3
VDW_RADII = {"C": 1.70, "N": 1.55, "O": 1.52, "S": 1.80, "Se": 1.90, "H": 1.10}
POINT_BUDGET = 8192
MIN_SPACING = 0.4
CURVATURE_RADII = (1.0, 2.0, 3.0, 5.0, 10.0)
NEIGHBOR_ATOMS = 16
NEWTON_MAX_ITERS = 50
NEWTON_TOL = 1e-3
NEWTON_MAX_STEP = 0.5
MIN_CONVERGED = 32
MIN_FIT_NEIGHBORS = 5


class SurfaceError(Exception):
    pass


class DegenerateSurfaceError(SurfaceError):
    """Too few points converged onto the zero level set."""


class SingularGradientError(SurfaceError):
    """The field gradient vanished where a normal was requested."""


def _stream(seed, channel: int) -> np.random.Generator:
    """Substream generator; seed may be an int or a sequence of ints."""
    parts = [int(s) for s in seed] if isinstance(seed, (list, tuple)) else [int(seed)]
    return np.random.default_rng(parts + [channel])


@dataclass
class VdwField:
    """Soft-min union of atom spheres."""

    centers: np.ndarray  # [M, 3] float64
    radii: np.ndarray    # [M] float64
    tau: float = TAU_DEFAULT

    @classmethod
    def from_atoms(cls, atom_xyz, atom_elems, tau=TAU_DEFAULT, radii_by_element=None):
        table = dict(VDW_RADII)
        if radii_by_element:
            table.update(radii_by_element)
        radii = np.array([table[ELEMENTS[e]] for e in np.asarray(atom_elems)], dtype=np.float64)
        return cls(
            centers=np.asarray(atom_xyz, dtype=np.float64),
            radii=radii,
            tau=float(tau),
        )

    def _z(self, x: np.ndarray) -> np.ndarray:
        # per-atom sphere distances, [K, M]
        diff = x[:, None, :] - self.centers[None, :, :]
        return np.sqrt((diff * diff).sum(-1)) - self.radii[None, :]

    def value(self, x: np.ndarray) -> np.ndarray:
        """D at points [K, 3] (or a single [3] point)."""
        single = x.ndim == 1
        pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty(len(pts))
        for lo in range(0, len(pts), 4096):
            chunk = pts[lo : lo + 4096]
            z = self._z(chunk)
            zmin = z.min(axis=1, keepdims=True)
            s = np.exp(-(z - zmin) / self.tau).sum(axis=1)
            out[lo : lo + 4096] = zmin[:, 0] - self.tau * np.log(s)
        return out[0] if single else out

    def value_and_grad(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """D and its gradient at points [K, 3]."""
        pts = np.asarray(x, dtype=np.float64)
        vals = np.empty(len(pts))
        grads = np.empty((len(pts), 3))
        for lo in range(0, len(pts), 4096):
            chunk = pts[lo : lo + 4096]
            diff = chunk[:, None, :] - self.centers[None, :, :]
            dist = np.sqrt((diff * diff).sum(-1))
            z = dist - self.radii[None, :]
            zmin = z.min(axis=1, keepdims=True)
            w = np.exp(-(z - zmin) / self.tau)
            wsum = w.sum(axis=1)
            vals[lo : lo + 4096] = zmin[:, 0] - self.tau * np.log(wsum)
            unit = diff / np.maximum(dist, 1e-12)[..., None]
            grads[lo : lo + 4096] = (w[..., None] * unit).sum(axis=1) / wsum[:, None]
        return vals, grads


def shell_candidates(field: VdwField, rng: np.random.Generator, total: int) -> np.ndarray:
    """Stratified seeds: per atom, random directions on a 1 A thick shell
    straddling the atom's vdW radius."""
    m = len(field.centers)
    per_atom = int(np.ceil(total / m))
    dirs = rng.normal(size=(m, per_atom, 3))
    dirs /= np.maximum(np.linalg.norm(dirs, axis=-1, keepdims=True), 1e-12)
    rad = field.radii[:, None] - 0.5 + rng.random((m, per_atom))
    pts = field.centers[:, None, :] + dirs * rad[..., None]
    return pts.reshape(-1, 3)


def project_to_surface(field: VdwField, candidates: np.ndarray) -> np.ndarray:
    """Damped Newton projection onto D = 0; diverged seeds are dropped.

    Candidate order is preserved in the output."""
    x = np.asarray(candidates, dtype=np.float64).copy()
    n = len(x)
    done = np.zeros(n, dtype=bool)
    dead = np.zeros(n, dtype=bool)
    for _ in range(NEWTON_MAX_ITERS):
        active = ~(done | dead)
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        vals, grads = field.value_and_grad(x[idx])
        conv = np.abs(vals) < NEWTON_TOL
        done[idx[conv]] = True
        gn2 = (grads * grads).sum(-1)
        sing = (~conv) & (gn2 < 1e-16)
        dead[idx[sing]] = True
        move = (~conv) & (~sing)
        if move.any():
            step = -(vals[move] / gn2[move])[:, None] * grads[move]
            norms = np.linalg.norm(step, axis=-1)
            big = norms > NEWTON_MAX_STEP
            step[big] *= (NEWTON_MAX_STEP / norms[big])[:, None]
            x[idx[move]] += step
    return x[done]


def thin_points(points: np.ndarray, spacing: float = MIN_SPACING) -> np.ndarray:
    """Greedy minimum-distance thinning, first point in wins.

    Decisions use true Euclidean distances, so the survivors of a
    rigidly moved candidate list are the same candidates, rigidly moved."""
    points = np.asarray(points, dtype=np.float64)
    inv = 1.0 / spacing
    sq = spacing * spacing
    cells: dict[tuple, list] = {}
    kept: list[int] = []
    offsets = [
        (dx, dy, dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
    ]
    keys = np.floor(points * inv).astype(np.int64)
    for i in range(len(points)):
        kx, ky, kz = keys[i]
        p = points[i]
        ok = True
        for dx, dy, dz in offsets:
            bucket = cells.get((kx + dx, ky + dy, kz + dz))
            if not bucket:
                continue
            q = points[bucket]
            d2 = ((q - p) ** 2).sum(-1)
            if (d2 < sq).any():
                ok = False
                break
        if ok:
            cells.setdefault((kx, ky, kz), []).append(i)
            kept.append(i)
    return points[kept]


def sample_surface(
    field: VdwField,
    seed: int = 0,
    target: int = POINT_BUDGET,
    candidates: np.ndarray | None = None,
) -> np.ndarray:
    """Surface points before budget enforcement, [P, 3] float64.

    `candidates` overrides seed-point generation; tests use it to feed
    rigidly transformed seeds when checking motion equivariance."""
    if candidates is None:
        rng = _stream(seed, 0)
        candidates = shell_candidates(field, rng, max(3 * target, 24 * len(field.centers)))
    pts = project_to_surface(field, candidates)
    pts = thin_points(pts)
    if len(pts) < MIN_CONVERGED:
        raise DegenerateSurfaceError(
            f"only {len(pts)} surface points converged (need {MIN_CONVERGED})"
        )
    return pts


def surface_normals(field: VdwField, points: np.ndarray, drop_singular: bool = False):
    """Unit outward normals grad D / |grad D|.

    With drop_singular, returns (normals, keep_mask) instead of raising."""
    _, grads = field.value_and_grad(np.asarray(points, dtype=np.float64))
    norms = np.linalg.norm(grads, axis=-1)
    bad = norms < 1e-8
    if drop_singular:
        safe = np.maximum(norms, 1e-12)
        return grads / safe[:, None], ~bad
    if bad.any():
        raise SingularGradientError(f"{int(bad.sum())} point(s) with vanishing gradient")
    return grads / norms[:, None]


def enforce_budget(n_points: int, budget: int, seed: int):
    """Index plan to hit the fixed point budget.

    Returns (rows, pad_mask): `rows` indexes the input points (subsample
    without replacement when over budget, append resampled copies when
    under), `pad_mask` flags appended copies."""
    if n_points < MIN_CONVERGED:
        raise DegenerateSurfaceError(f"{n_points} points below minimum {MIN_CONVERGED}")
    rng = _stream(seed, 1)
    if n_points > budget:
        rows = np.sort(rng.choice(n_points, size=budget, replace=False))
        pad_mask = np.zeros(budget, dtype=bool)
    elif n_points < budget:
        extra = rng.integers(0, n_points, size=budget - n_points)
        rows = np.concatenate([np.arange(n_points), extra])
        pad_mask = np.zeros(budget, dtype=bool)
        pad_mask[n_points:] = True
    else:
        rows = np.arange(budget)
        pad_mask = np.zeros(budget, dtype=bool)
    return rows, pad_mask


def _tangent_basis(normal: np.ndarray):
    axis = np.zeros(3)
    axis[np.argmin(np.abs(normal))] = 1.0
    e1 = np.cross(normal, axis)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(normal, e1)


def curvatures(points: np.ndarray, normals: np.ndarray, radius: float, eval_idx=None):
    """Mean and Gaussian curvature per point from a local quadric fit.

    Neighbors come from the whole cloud; `eval_idx` restricts which
    points are fitted (callers exploit it to skip exact duplicates).
    The sign convention makes a sphere with outward normals have
    H = +1/rho.  Points with fewer than MIN_FIT_NEIGHBORS neighbors
    inside `radius` fall back to (0, 0) and are flagged.
    """
    points = np.asarray(points, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    if eval_idx is None:
        eval_idx = np.arange(len(points))
    n = len(eval_idx)
    h_out = np.zeros(n)
    k_out = np.zeros(n)
    fallback = np.zeros(n, dtype=bool)
    if len(points) == 0:
        return h_out, k_out, fallback
    tree = cKDTree(points)
    neighbor_lists = tree.query_ball_point(points[eval_idx], r=radius)
    for row, i in enumerate(eval_idx):
        idx = [j for j in neighbor_lists[row] if j != i]
        if len(idx) < MIN_FIT_NEIGHBORS:
            fallback[row] = True
            continue
        off = points[idx] - points[i]
        e1, e2 = _tangent_basis(normals[i])
        u = off @ e1
        v = off @ e2
        w = off @ normals[i]
        design = np.stack([u * u, u * v, v * v], axis=1)
        coef, *_ = np.linalg.lstsq(design, w, rcond=None)
        alpha, beta, gamma = coef
        # w = alpha u^2 + beta uv + gamma v^2; curvature of the height
        # field against the outward normal flips the sign
        h_out[row] = -(alpha + gamma)
        k_out[row] = 4.0 * alpha * gamma - beta * beta
    return h_out, k_out, fallback


def curvature_profile(points: np.ndarray, normals: np.ndarray, radii=CURVATURE_RADII, eval_idx=None):
    """[N, 2 * len(radii)] scalars ordered (H, K) per radius, plus flags."""
    n = len(points) if eval_idx is None else len(eval_idx)
    u = np.zeros((n, 2 * len(radii)), dtype=np.float64)
    flags = np.zeros((n, len(radii)), dtype=bool)
    for j, r in enumerate(radii):
        h, k, fb = curvatures(points, normals, r, eval_idx=eval_idx)
        u[:, 2 * j] = h
        u[:, 2 * j + 1] = k
        flags[:, j] = fb
    return u, flags


def chemical_neighborhood(points: np.ndarray, atom_xyz: np.ndarray, atom_elems: np.ndarray):
    """[N, 16, 7] rows: element one-hot (C, N, O, S, Se, H) + distance.

    Rows are sorted by ascending distance, ties broken by atom index;
    with fewer than 16 atoms the sorted list repeats cyclically."""
    points = np.asarray(points, dtype=np.float64)
    atom_xyz = np.asarray(atom_xyz, dtype=np.float64)
    atom_elems = np.asarray(atom_elems)
    n, m = len(points), len(atom_xyz)
    if m == 0:
        raise SurfaceError("no atoms for neighborhood extraction")
    out = np.zeros((n, NEIGHBOR_ATOMS, 7), dtype=np.float32)
    for lo in range(0, n, 2048):
        chunk = points[lo : lo + 2048]
        diff = chunk[:, None, :] - atom_xyz[None, :, :]
        dist = np.sqrt((diff * diff).sum(-1))
        order = np.argsort(dist, axis=1, kind="stable")
        if m >= NEIGHBOR_ATOMS:
            pick = order[:, :NEIGHBOR_ATOMS]
        else:
            reps = int(np.ceil(NEIGHBOR_ATOMS / m))
            pick = np.tile(order, (1, reps))[:, :NEIGHBOR_ATOMS]
        rowsel = np.arange(len(chunk))[:, None]
        d_sel = dist[rowsel, pick]
        elem_sel = atom_elems[pick]
        block = np.zeros((len(chunk), NEIGHBOR_ATOMS, 7), dtype=np.float32)
        for e in range(len(ELEMENTS)):
            block[:, :, e] = (elem_sel == e).astype(np.float32)
        block[:, :, 6] = d_sel.astype(np.float32)
        out[lo : lo + 2048] = block
    return out


@dataclass
class SurfaceCloud:
    """Fixed-budget surface annotation for one protein."""

    points: np.ndarray        # [N, 3] float32
    normals: np.ndarray       # [N, 3] float32
    curv: np.ndarray          # [N, 10] float32, (H, K) at radii 1,2,3,5,10
    neighborhoods: np.ndarray # [N, 16, 7] float32
    pad_mask: np.ndarray      # [N] bool, True on appended copies
    curv_fallback: np.ndarray # [N, 5] bool
    few_atoms: bool = False   # True when atoms repeat to fill 16 slots


def build_surface(
    record: ProteinRecord,
    seed: int = 0,
    budget: int = POINT_BUDGET,
    tau: float = TAU_DEFAULT,
    radii_by_element: dict | None = None,
    candidates: np.ndarray | None = None,
) -> SurfaceCloud:
    """sample -> normals -> budget -> curvature x5 -> atom neighborhoods."""
    field = VdwField.from_atoms(record.atom_xyz, record.atom_elems, tau, radii_by_element)
    pts = sample_surface(field, seed=seed, target=budget, candidates=candidates)
    nrm, keep = surface_normals(field, pts, drop_singular=True)
    pts, nrm = pts[keep], nrm[keep]
    rows, pad_mask = enforce_budget(len(pts), budget, seed)
    # quantize to storage precision first so every stored annotation is
    # exactly recomputable from the stored coordinates
    pts_b = pts[rows].astype(np.float32).astype(np.float64)
    nrm_b = nrm[rows].astype(np.float32).astype(np.float64)
    # budgeted cloud may repeat rows; compute per unique row against the
    # full budgeted cloud and copy results onto the duplicates
    uniq, inverse = np.unique(rows, return_inverse=True)
    seen: dict[int, int] = {}
    for pos, r in enumerate(rows):
        seen.setdefault(int(r), pos)
    first_pos = np.array([seen[int(r)] for r in uniq], dtype=np.int64)
    u_uniq, flags_uniq = curvature_profile(pts_b, nrm_b, eval_idx=first_pos)
    u_all = u_uniq[inverse]
    flags_all = flags_uniq[inverse]
    nbr_unique = chemical_neighborhood(pts_b[first_pos], record.atom_xyz, record.atom_elems)
    nbr = nbr_unique[inverse]
    return SurfaceCloud(
        points=pts_b.astype(np.float32),
        normals=nrm_b.astype(np.float32),
        curv=u_all.astype(np.float32),
        neighborhoods=nbr,
        pad_mask=pad_mask,
        curv_fallback=flags_all,
        few_atoms=len(record.atom_xyz) < NEIGHBOR_ATOMS,
    )


def cloud_to_chunks(cloud: SurfaceCloud) -> dict:
    """Flatten a cloud into named arrays for container storage."""
    return {
        "points": cloud.points,
        "normals": cloud.normals,
        "curv": cloud.curv,
        "neighborhoods": cloud.neighborhoods,
        "pad_mask": cloud.pad_mask,
        "curv_fallback": cloud.curv_fallback,
        "few_atoms": np.array(cloud.few_atoms, dtype=bool),
    }


def cloud_from_chunks(chunks: dict) -> SurfaceCloud:
    """Inverse of cloud_to_chunks."""
    try:
        return SurfaceCloud(
            points=chunks["points"],
            normals=chunks["normals"],
            curv=chunks["curv"],
            neighborhoods=chunks["neighborhoods"],
            pad_mask=chunks["pad_mask"],
            curv_fallback=chunks["curv_fallback"],
            few_atoms=bool(chunks["few_atoms"]),
        )
    except KeyError as exc:
        raise SurfaceError(f"surface cache missing chunk {exc}") from None


def write_ply(cloud: SurfaceCloud, path) -> None:
    """ASCII point cloud with normals, for external viewers."""
    n = len(cloud.points)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {n}\n")
        for prop in ("x", "y", "z", "nx", "ny", "nz"):
            fh.write(f"property float {prop}\n")
        fh.write("end_header\n")
        for p, m in zip(cloud.points, cloud.normals):
            fh.write(f"{p[0]:.4f} {p[1]:.4f} {p[2]:.4f} {m[0]:.4f} {m[1]:.4f} {m[2]:.4f}\n")
