"""Sequence and structure comparison metrics plus grouped data splits.

Structure scores work on matched coordinate rows: the i-th row of the
mobile structure is compared with the i-th row of the target after a
least-squares superposition.  That fixed correspondence makes the
TM-style score a lower bound on the alignment-optimized original.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import EvaluationError

LENGTH_BANDS = (
    (0, 100, "0-99"),
    (100, 300, "100-299"),
    (300, 500, "300-499"),
    (500, None, "500+"),
)


def recovery_rate(pred, ref) -> float:
    """Fraction of positions with identical ids; lengths must match."""
    p = np.asarray(pred)
    r = np.asarray(ref)
    if p.shape != r.shape or p.ndim != 1:
        raise EvaluationError(f"recovery_rate: shapes {p.shape} vs {r.shape}")
    if len(r) == 0:
        raise EvaluationError("recovery_rate: empty sequences")
    return float((p == r).mean())


def padded_recovery(pred, ref) -> float:
    """Identity over the reference length.

    The prediction is truncated to the reference length before scoring;
    missing positions count as mismatches.  Length disagreement itself
    is reported separately (see EvalRow.length_match)."""
    p = np.asarray(pred)
    r = np.asarray(ref)
    if len(r) == 0:
        raise EvaluationError("padded_recovery: empty reference")
    m = min(len(p), len(r))
    return float((p[:m] == r[:m]).sum() / len(r))


def sequence_identity(pred, ref) -> float:
    """Position-wise identity on equal lengths.

    Numerically the same rule as recovery_rate; kept as its own name so
    reports can carry both columns."""
    return recovery_rate(pred, ref)


def kabsch(mobile: np.ndarray, target: np.ndarray):
    """Least-squares superposition: returns (rot, shift) with
    mobile @ rot.T + shift matching target.

    The rotation is proper (det +1); mirror solutions are rejected."""
    p = np.asarray(mobile, dtype=np.float64)
    q = np.asarray(target, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 3:
        raise EvaluationError(f"kabsch: shapes {p.shape} vs {q.shape}")
    if len(p) < 3:
        raise EvaluationError("kabsch: need at least 3 points")
    pc = p.mean(axis=0)
    qc = q.mean(axis=0)
    h = (p - pc).T @ (q - qc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, qc - rot @ pc


def kabsch_rmsd(mobile: np.ndarray, target: np.ndarray) -> float:
    rot, shift = kabsch(mobile, target)
    moved = np.asarray(mobile, dtype=np.float64) @ rot.T + shift
    diff = moved - np.asarray(target, dtype=np.float64)
    return float(np.sqrt((diff * diff).sum(axis=1).mean()))


def tm_d0(n: int) -> float:
    """Length-normalized distance scale, clamped below at 0.5."""
    return max(0.5, 1.24 * np.cbrt(n - 15.0) - 1.8)


def tm_score_fixed(mobile: np.ndarray, target: np.ndarray) -> float:
    """TM-style score under fixed row correspondence.

    Superposition minimizes RMSD rather than the score itself, so this
    is a deterministic lower bound on the alignment-optimized score."""
    p = np.asarray(mobile, dtype=np.float64)
    q = np.asarray(target, dtype=np.float64)
    rot, shift = kabsch(p, q)
    d = np.linalg.norm(p @ rot.T + shift - q, axis=1)
    d0 = tm_d0(len(p))
    return float(np.mean(1.0 / (1.0 + (d / d0) ** 2)))


def length_band(n: int) -> str:
    for lo, hi, label in LENGTH_BANDS:
        if n >= lo and (hi is None or n < hi):
            return label
    raise EvaluationError(f"length_band: bad length {n}")


def grouped_kfold(groups: dict, k: int = 10, seed: int = 0) -> dict:
    """Assign ids to k folds without splitting any group.

    Groups go largest first onto the currently lightest fold; equal
    sizes are ordered by a seeded shuffle, equal loads by fold index.
    Returns id -> fold."""
    if k < 1:
        raise EvaluationError(f"grouped_kfold: k must be positive, got {k}")
    if not groups:
        return {}
    members: dict = {}
    for pid, g in groups.items():
        members.setdefault(g, []).append(pid)
    if k > len(members):
        raise EvaluationError(
            f"grouped_kfold: k={k} exceeds number of groups ({len(members)})"
        )
    names = sorted(members)
    rng = np.random.default_rng([seed, 5])
    names = [names[i] for i in rng.permutation(len(names))]
    order = sorted(names, key=lambda g: -len(members[g]))  # stable on ties
    loads = [0] * k
    fold_of: dict = {}
    for g in order:
        f = int(np.argmin(loads))
        for pid in members[g]:
            fold_of[pid] = f
        loads[f] += len(members[g])
    return fold_of


@dataclass
class EvalRow:
    """Per-protein outcome of a generation run."""

    id: str
    n_ref: int
    n_gen: int
    recovery: float
    length_match: bool
    identity: float = None
    rmsd: float = None
    tm: float = None


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


def _stats(label: str, vals: list) -> list:
    if not vals:
        return []
    return [
        f"# mean_{label}\t{float(np.mean(vals)):.4f}",
        f"# median_{label}\t{float(np.median(vals)):.4f}",
    ]


def evaluation_report(rows: list, missing=()) -> str:
    """Tab-separated per-protein table plus '#' summary lines.

    rmsd/tm columns appear only when some row carries them.  Ids listed
    in `missing` were requested but had no prediction; they are excluded
    from every aggregate and echoed at the end of the report."""
    have_rmsd = any(r.rmsd is not None for r in rows)
    have_tm = any(r.tm is not None for r in rows)
    lines = []
    if have_tm:
        lines.append("# tm assumes fixed residue correspondence (lower bound)")
    header = "id\tlength\tgenerated\tlength_match\trecovery\tidentity"
    if have_rmsd:
        header += "\trmsd"
    if have_tm:
        header += "\ttm"
    lines.append(header)
    for r in rows:
        cells = [
            r.id,
            str(r.n_ref),
            str(r.n_gen),
            str(int(r.length_match)),
            f"{r.recovery:.4f}",
            _fmt(r.identity),
        ]
        if have_rmsd:
            cells.append(_fmt(r.rmsd))
        if have_tm:
            cells.append(_fmt(r.tm))
        lines.append("\t".join(cells))
    n = len(rows)
    lines.append(f"# proteins\t{n}")
    if n:
        match = float(np.mean([1.0 if r.length_match else 0.0 for r in rows]))
        lines += _stats("recovery", [r.recovery for r in rows])
        lines += _stats("identity", [r.identity for r in rows if r.identity is not None])
        lines += _stats("rmsd", [r.rmsd for r in rows if r.rmsd is not None])
        lines += _stats("tm", [r.tm for r in rows if r.tm is not None])
        lines.append(f"# length_match_rate\t{match:.4f}")
        for lo, hi, label in LENGTH_BANDS:
            sel = [r for r in rows if r.n_ref >= lo and (hi is None or r.n_ref < hi)]
            if sel:
                band_rec = float(np.mean([r.recovery for r in sel]))
                lines.append(f"# band {label}\tn={len(sel)}\trecovery={band_rec:.4f}")
            else:
                lines.append(f"# band {label}\tn=0\trecovery=-")
    for pid in missing:
        lines.append(f"# missing\t{pid}")
    return "\n".join(lines) + "\n"
