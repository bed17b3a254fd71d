"""Surface extraction: analytic sphere/plane/cylinder curvature oracles,
soft-min distance bounds, brute-force thinning and neighbor references,
budget bookkeeping, and rigid-motion equivariance of the full builder."""

import numpy as np
import pytest

from dspg.structure_io import ELEMENTS, ProteinRecord
from dspg.surface import (
    CURVATURE_RADII,
    MIN_SPACING,
    NEIGHBOR_ATOMS,
    DegenerateSurfaceError,
    SingularGradientError,
    VdwField,
    build_surface,
    chemical_neighborhood,
    curvature_profile,
    curvatures,
    enforce_budget,
    sample_surface,
    shell_candidates,
    surface_normals,
    thin_points,
)
from helpers import random_rotation

C, N, O = 0, 1, 2


def make_record(atom_xyz, atom_elems, name="synthetic"):
    return ProteinRecord(
        id=name,
        atom_xyz=np.asarray(atom_xyz, dtype=np.float32),
        atom_elems=np.asarray(atom_elems, dtype=np.int8),
    )


def three_atom_record():
    # bent triatomic, gives a mildly non-convex union
    xyz = [[0.0, 0.0, 0.0], [2.2, 0.0, 0.0], [1.1, 1.9, 0.0]]
    return make_record(xyz, [C, N, O])


def fibonacci_sphere(n: int, rho: float) -> np.ndarray:
    i = np.arange(n, dtype=np.float64)
    golden = (1.0 + 5.0 ** 0.5) / 2.0
    z = 1.0 - (2.0 * i + 1.0) / n
    theta = 2.0 * np.pi * i / golden
    s = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    pts = np.stack([s * np.cos(theta), s * np.sin(theta), z], axis=1)
    return rho * pts


# ---------------------------------------------------------------------------
# signed distance field


def test_single_atom_field_is_exact_sphere_distance():
    field = VdwField.from_atoms([[1.0, -2.0, 0.5]], [C])
    rng = np.random.default_rng(0)
    x = rng.normal(scale=3.0, size=(50, 3))
    want = np.linalg.norm(x - np.array([1.0, -2.0, 0.5]), axis=1) - 1.70
    got = field.value(x)
    assert np.allclose(got, want, atol=1e-12)


def test_soft_min_bounds():
    # -tau ln sum exp(-z/tau) lies in [min z - tau ln M, min z]
    rec = three_atom_record()
    field = VdwField.from_atoms(rec.atom_xyz, rec.atom_elems)
    rng = np.random.default_rng(1)
    x = rng.normal(scale=2.5, size=(200, 3))
    d = field.value(x)
    z = np.linalg.norm(x[:, None, :] - field.centers[None], axis=-1) - field.radii[None]
    zmin = z.min(axis=1)
    assert np.all(d <= zmin + 1e-12)
    assert np.all(d >= zmin - field.tau * np.log(len(field.centers)) - 1e-12)


def test_smaller_tau_tracks_hard_min():
    rec = three_atom_record()
    rng = np.random.default_rng(2)
    x = rng.normal(scale=2.0, size=(100, 3))
    z = np.linalg.norm(x[:, None, :] - rec.atom_xyz.astype(np.float64)[None], axis=-1)
    zmin = (z - np.array([1.70, 1.55, 1.52])[None]).min(axis=1)
    loose = VdwField.from_atoms(rec.atom_xyz, rec.atom_elems, tau=1.0)
    tight = VdwField.from_atoms(rec.atom_xyz, rec.atom_elems, tau=0.01)
    err_loose = np.abs(loose.value(x) - zmin).max()
    err_tight = np.abs(tight.value(x) - zmin).max()
    assert err_tight < err_loose
    assert err_tight < 0.01 * np.log(3) + 1e-9


def test_field_gradient_matches_finite_difference():
    rec = three_atom_record()
    field = VdwField.from_atoms(rec.atom_xyz, rec.atom_elems)
    rng = np.random.default_rng(3)
    x = rng.normal(scale=2.0, size=(20, 3)) + np.array([1.0, 0.5, 0.0])
    _, grads = field.value_and_grad(x)
    h = 1e-6
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        fd = (field.value(x + e) - field.value(x - e)) / (2.0 * h)
        assert np.abs(fd - grads[:, axis]).max() < 1e-6


def test_value_and_grad_value_agrees_with_value():
    rec = three_atom_record()
    field = VdwField.from_atoms(rec.atom_xyz, rec.atom_elems)
    x = np.random.default_rng(4).normal(scale=3.0, size=(30, 3))
    v1 = field.value(x)
    v2, _ = field.value_and_grad(x)
    assert np.array_equal(v1, v2)


def test_radius_override():
    field = VdwField.from_atoms([[0.0, 0.0, 0.0]], [C], radii_by_element={"C": 2.5})
    assert field.radii[0] == 2.5


# ---------------------------------------------------------------------------
# sampling and thinning


def test_single_atom_points_land_on_sphere():
    field = VdwField.from_atoms([[0.0, 0.0, 0.0]], [C])
    pts = sample_surface(field, seed=0, target=128)
    r = np.linalg.norm(pts, axis=1)
    assert len(pts) >= 32
    assert np.abs(r - 1.70).max() < 1.1e-3


def test_surface_points_outside_every_atom():
    # D <= min_i z_i, so |D| < tol at convergence forces z_min > -tol
    rec = three_atom_record()
    field = VdwField.from_atoms(rec.atom_xyz, rec.atom_elems)
    pts = sample_surface(field, seed=0, target=256)
    z = np.linalg.norm(pts[:, None, :] - field.centers[None], axis=-1) - field.radii[None]
    assert z.min() > -1.1e-3


def test_candidate_injection_reproduces_default_path():
    rec = three_atom_record()
    field = VdwField.from_atoms(rec.atom_xyz, rec.atom_elems)
    total = max(3 * 256, 24 * len(field.centers))
    cand = shell_candidates(field, np.random.default_rng([7, 0]), total)
    a = sample_surface(field, seed=7, target=256)
    b = sample_surface(field, seed=7, target=256, candidates=cand)
    assert np.array_equal(a, b)


def test_distant_candidates_never_converge():
    field = VdwField.from_atoms([[0.0, 0.0, 0.0]], [C])
    cand = np.random.default_rng(0).normal(size=(100, 3)) + 200.0
    with pytest.raises(DegenerateSurfaceError):
        sample_surface(field, candidates=cand)


def brute_thin(points, spacing):
    kept = []
    for i, p in enumerate(points):
        if all(np.linalg.norm(p - points[j]) >= spacing for j in kept):
            kept.append(i)
    return points[kept]


def test_thinning_matches_brute_reference():
    rng = np.random.default_rng(5)
    pts = rng.random((300, 3)) * 3.0 - 1.5
    got = thin_points(pts, spacing=0.4)
    want = brute_thin(pts, 0.4)
    assert np.array_equal(got, want)


def test_thinning_respects_min_spacing():
    rec = three_atom_record()
    field = VdwField.from_atoms(rec.atom_xyz, rec.atom_elems)
    pts = sample_surface(field, seed=1, target=256)
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    d[np.arange(len(pts)), np.arange(len(pts))] = np.inf
    assert d.min() >= MIN_SPACING


# ---------------------------------------------------------------------------
# normals


def test_normals_unit_length_and_radial():
    field = VdwField.from_atoms([[0.0, 0.0, 0.0]], [C])
    pts = sample_surface(field, seed=0, target=128)
    nrm = surface_normals(field, pts)
    assert np.abs(np.linalg.norm(nrm, axis=1) - 1.0).max() < 1e-12
    radial = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    assert np.abs(nrm - radial).max() < 1e-9


def test_singular_gradient_raises():
    # midpoint of two equal spheres: opposing unit vectors cancel exactly
    field = VdwField.from_atoms([[-2.0, 0.0, 0.0], [2.0, 0.0, 0.0]], [C, C])
    with pytest.raises(SingularGradientError):
        surface_normals(field, np.array([[0.0, 0.0, 0.0]]))


def test_drop_singular_returns_keep_mask():
    field = VdwField.from_atoms([[-2.0, 0.0, 0.0], [2.0, 0.0, 0.0]], [C, C])
    pts = np.array([[0.0, 0.0, 0.0], [4.0, 0.0, 0.0]])
    nrm, keep = surface_normals(field, pts, drop_singular=True)
    assert keep.tolist() == [False, True]
    assert np.abs(nrm[1] - np.array([1.0, 0.0, 0.0])).max() < 1e-9


# ---------------------------------------------------------------------------
# budget


def test_budget_subsamples_when_over():
    rows, pad = enforce_budget(5000, 2048, seed=0)
    assert len(rows) == 2048 and not pad.any()
    assert len(np.unique(rows)) == 2048
    assert np.all(np.diff(rows) > 0)


def test_budget_pads_when_under():
    rows, pad = enforce_budget(100, 256, seed=0)
    assert len(rows) == 256
    assert np.array_equal(rows[:100], np.arange(100))
    assert not pad[:100].any() and pad[100:].all()
    assert rows[100:].min() >= 0 and rows[100:].max() < 100


def test_budget_exact_is_identity():
    rows, pad = enforce_budget(512, 512, seed=3)
    assert np.array_equal(rows, np.arange(512)) and not pad.any()


def test_budget_below_minimum_raises():
    with pytest.raises(DegenerateSurfaceError):
        enforce_budget(31, 8192, seed=0)


def test_budget_deterministic():
    a = enforce_budget(300, 128, seed=9)[0]
    b = enforce_budget(300, 128, seed=9)[0]
    c = enforce_budget(300, 128, seed=10)[0]
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


# ---------------------------------------------------------------------------
# curvature


def test_sphere_curvature():
    # outward-oriented sphere of radius 5: H = 1/5, K = 1/25
    pts = fibonacci_sphere(2000, 5.0)
    nrm = pts / 5.0
    sub = np.arange(0, 2000, 10)
    h, k, fb = curvatures(pts, nrm, radius=2.0, eval_idx=sub)
    assert not fb.any()
    assert abs(np.median(h) - 0.2) < 0.02
    assert abs(np.median(k) - 0.04) < 0.006


def test_inward_normals_flip_mean_curvature_sign():
    pts = fibonacci_sphere(1000, 5.0)
    sub = np.arange(0, 1000, 10)
    h_out, _, _ = curvatures(pts, pts / 5.0, radius=2.0, eval_idx=sub)
    h_in, _, _ = curvatures(pts, -pts / 5.0, radius=2.0, eval_idx=sub)
    assert abs(np.median(h_out) - 0.2) < 0.02
    assert abs(np.median(h_in) + 0.2) < 0.02


def test_plane_curvature_is_zero():
    xs = np.arange(-5.0, 5.0, 0.25)
    gx, gy = np.meshgrid(xs, xs)
    pts = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    nrm = np.tile([0.0, 0.0, 1.0], (len(pts), 1))
    inner = np.nonzero(np.abs(pts[:, :2]).max(axis=1) < 2.0)[0]
    h, k, fb = curvatures(pts, nrm, radius=1.0, eval_idx=inner)
    assert not fb.any()
    assert np.abs(h).max() < 1e-8
    assert np.abs(k).max() < 1e-8


def test_cylinder_curvature():
    # radius-2 cylinder: H = 1/(2 rho) = 0.25, K = 0
    theta = np.linspace(0.0, 2.0 * np.pi, 120, endpoint=False)
    z = np.arange(-3.0, 3.0, 0.2)
    gt, gz = np.meshgrid(theta, z)
    pts = np.stack(
        [2.0 * np.cos(gt).ravel(), 2.0 * np.sin(gt).ravel(), gz.ravel()], axis=1
    )
    nrm = pts.copy()
    nrm[:, 2] = 0.0
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    inner = np.nonzero(np.abs(pts[:, 2]) < 1.0)[0][::7]
    h, k, fb = curvatures(pts, nrm, radius=1.5, eval_idx=inner)
    assert not fb.any()
    assert abs(np.median(h) - 0.25) < 0.025
    assert np.abs(np.median(k)) < 0.01


def test_sparse_points_fall_back_to_zero():
    pts = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [20.0, 0.0, 0.0]])
    nrm = np.tile([0.0, 0.0, 1.0], (3, 1))
    h, k, fb = curvatures(pts, nrm, radius=1.0)
    assert fb.all()
    assert np.all(h == 0.0) and np.all(k == 0.0)


def test_curvature_profile_layout():
    pts = fibonacci_sphere(2000, 5.0)
    nrm = pts / 5.0
    sub = np.arange(0, 2000, 40)
    u, flags = curvature_profile(pts, nrm, eval_idx=sub)
    assert u.shape == (len(sub), 2 * len(CURVATURE_RADII))
    assert flags.shape == (len(sub), len(CURVATURE_RADII))
    # columns alternate H, K per probe radius; check the first two radii
    assert abs(np.median(u[:, 0]) - 0.2) < 0.03
    assert abs(np.median(u[:, 1]) - 0.04) < 0.008
    assert abs(np.median(u[:, 2]) - 0.2) < 0.02
    assert abs(np.median(u[:, 3]) - 0.04) < 0.006


def test_curvature_eval_idx_matches_full_pass():
    pts = fibonacci_sphere(400, 5.0)
    nrm = pts / 5.0
    h_all, k_all, fb_all = curvatures(pts, nrm, radius=2.0)
    sub = np.array([3, 17, 200, 399])
    h_sub, k_sub, fb_sub = curvatures(pts, nrm, radius=2.0, eval_idx=sub)
    assert np.array_equal(h_sub, h_all[sub])
    assert np.array_equal(k_sub, k_all[sub])
    assert np.array_equal(fb_sub, fb_all[sub])


# ---------------------------------------------------------------------------
# chemical neighborhoods


def brute_neighborhood(point, atom_xyz, atom_elems):
    d = np.linalg.norm(atom_xyz.astype(np.float64) - point, axis=1)
    order = sorted(range(len(d)), key=lambda j: (d[j], j))
    if len(order) >= NEIGHBOR_ATOMS:
        pick = order[:NEIGHBOR_ATOMS]
    else:
        pick = (order * NEIGHBOR_ATOMS)[:NEIGHBOR_ATOMS]
    rows = np.zeros((NEIGHBOR_ATOMS, 7), dtype=np.float32)
    for slot, j in enumerate(pick):
        rows[slot, atom_elems[j]] = 1.0
        rows[slot, 6] = np.float32(d[j])
    return rows


def test_neighborhood_matches_brute_force():
    rng = np.random.default_rng(11)
    atom_xyz = rng.normal(scale=5.0, size=(40, 3))
    atom_elems = rng.integers(0, len(ELEMENTS), size=40)
    pts = rng.normal(scale=6.0, size=(25, 3))
    got = chemical_neighborhood(pts, atom_xyz, atom_elems)
    for i in range(len(pts)):
        want = brute_neighborhood(pts[i], atom_xyz, atom_elems)
        assert np.array_equal(got[i], want)


def test_neighborhood_distance_ties_break_by_atom_index():
    # four atoms at exactly equal distance from the origin
    atom_xyz = np.array(
        [[1.0, 0, 0], [0, 1.0, 0], [-1.0, 0, 0], [0, -1.0, 0]], dtype=np.float64
    )
    atom_elems = np.array([O, N, C, O], dtype=np.int8)
    got = chemical_neighborhood(np.zeros((1, 3)), atom_xyz, atom_elems)[0]
    # cyclic repetition of the index-ordered list 0,1,2,3
    want_elems = [atom_elems[j % 4] for j in range(NEIGHBOR_ATOMS)]
    for slot in range(NEIGHBOR_ATOMS):
        assert got[slot, want_elems[slot]] == 1.0
        assert got[slot, 6] == np.float32(1.0)


def test_neighborhood_cyclic_repeat_with_few_atoms():
    atom_xyz = np.array([[0.0, 0, 0], [3.0, 0, 0], [6.0, 0, 0]])
    atom_elems = np.array([C, N, O], dtype=np.int8)
    got = chemical_neighborhood(np.array([[0.5, 0.0, 0.0]]), atom_xyz, atom_elems)[0]
    base = got[:3]
    assert np.array_equal(got, np.tile(base, (6, 1))[:NEIGHBOR_ATOMS])
    assert np.abs(base[:, 6] - [0.5, 2.5, 5.5]).max() < 1e-6


# ---------------------------------------------------------------------------
# full builder


def test_build_surface_shapes_and_dtypes():
    cloud = build_surface(three_atom_record(), seed=0, budget=256)
    assert cloud.points.shape == (256, 3) and cloud.points.dtype == np.float32
    assert cloud.normals.shape == (256, 3) and cloud.normals.dtype == np.float32
    assert cloud.curv.shape == (256, 10) and cloud.curv.dtype == np.float32
    assert cloud.neighborhoods.shape == (256, 16, 7)
    assert cloud.neighborhoods.dtype == np.float32
    assert cloud.pad_mask.shape == (256,) and cloud.pad_mask.dtype == np.bool_
    assert cloud.curv_fallback.shape == (256, 5)


def test_build_surface_deterministic():
    a = build_surface(three_atom_record(), seed=4, budget=128)
    b = build_surface(three_atom_record(), seed=4, budget=128)
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(a.normals, b.normals)
    assert np.array_equal(a.curv, b.curv)
    assert np.array_equal(a.neighborhoods, b.neighborhoods)
    assert np.array_equal(a.pad_mask, b.pad_mask)
    c = build_surface(three_atom_record(), seed=5, budget=128)
    assert not np.array_equal(a.points, c.points)


def test_build_surface_pad_rows_duplicate_originals():
    cloud = build_surface(three_atom_record(), seed=0, budget=2048)
    pads = np.nonzero(cloud.pad_mask)[0]
    assert len(pads) > 0
    originals = cloud.points[~cloud.pad_mask]
    for p in pads:
        hits = np.nonzero((originals == cloud.points[p]).all(axis=1))[0]
        assert len(hits) >= 1
        j = hits[0]
        assert np.array_equal(cloud.curv[~cloud.pad_mask][j], cloud.curv[p])
        assert np.array_equal(
            cloud.neighborhoods[~cloud.pad_mask][j], cloud.neighborhoods[p]
        )


def test_build_surface_single_atom_curvature():
    # budgeted sphere of radius 1.70: H = 1/1.70, K = 1/1.70^2 at probe 1
    rec = make_record([[0.0, 0.0, 0.0]], [C])
    cloud = build_surface(rec, seed=0, budget=128)
    ok = ~cloud.curv_fallback[:, 0]
    assert ok.sum() > 64
    h1 = np.median(cloud.curv[ok, 0])
    k1 = np.median(cloud.curv[ok, 1])
    assert abs(h1 - 1.0 / 1.70) < 0.1 * (1.0 / 1.70)
    assert abs(k1 - 1.0 / 1.70 ** 2) < 0.25 * (1.0 / 1.70 ** 2)
    assert cloud.few_atoms
    # every neighborhood row points at the lone carbon, distance ~ 1.70
    assert np.all(cloud.neighborhoods[:, :, 0] == 1.0)
    assert np.abs(cloud.neighborhoods[:, :, 6] - 1.70).max() < 2e-3


def test_build_surface_few_atoms_flag_clear_for_large_input():
    rng = np.random.default_rng(8)
    xyz = rng.normal(scale=3.0, size=(20, 3))
    cloud = build_surface(make_record(xyz, [C] * 20), seed=0, budget=256)
    assert not cloud.few_atoms


def test_build_surface_stored_distances_recomputable():
    # neighborhoods computed after float32 quantization: recomputing from
    # the stored arrays reproduces them bit for bit
    rec = three_atom_record()
    cloud = build_surface(rec, seed=2, budget=128)
    again = chemical_neighborhood(cloud.points, rec.atom_xyz, rec.atom_elems)
    assert np.array_equal(cloud.neighborhoods, again)


def test_build_surface_rigid_motion_equivariance():
    rec = three_atom_record()
    field = VdwField.from_atoms(rec.atom_xyz, rec.atom_elems)
    total = max(3 * 128, 24 * len(field.centers))
    cand = shell_candidates(field, np.random.default_rng([0, 0]), total)
    rot = random_rotation(np.random.default_rng(13))
    shift = np.array([3.0, -7.0, 11.0])
    moved = make_record(rec.atom_xyz.astype(np.float64) @ rot.T + shift, [C, N, O])

    a = build_surface(rec, seed=0, budget=128, candidates=cand)
    b = build_surface(moved, seed=0, budget=128, candidates=cand @ rot.T + shift)

    assert np.array_equal(a.pad_mask, b.pad_mask)
    assert np.abs(a.points @ rot.T + shift - b.points).max() < 1e-3
    assert np.abs(a.normals @ rot.T - b.normals).max() < 1e-3
    assert np.abs(a.curv - b.curv).max() < 1e-3
    assert np.array_equal(a.neighborhoods[:, :, :6], b.neighborhoods[:, :, :6])
    assert np.abs(a.neighborhoods[:, :, 6] - b.neighborhoods[:, :, 6]).max() < 1e-3
