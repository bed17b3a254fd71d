"""Shared fixtures: synthetic backbones built from internal coordinates,
PDB text emission, and small geometry utilities for oracle checks."""

from __future__ import annotations

import numpy as np

# idealized backbone geometry (lengths in angstroms, angles in degrees)
B_N_CA = 1.458
B_CA_C = 1.525
B_C_N = 1.329
B_C_O = 1.231
A_N_CA_C = 111.2
A_CA_C_N = 116.2
A_C_N_CA = 121.7
A_CA_C_O = 120.8

AA20 = "ARNDCQEGHILKMFPSTWYV"
AA1_TO_3 = {
    "A": "ALA", "R": "ARG", "N": "ASN", "D": "ASP", "C": "CYS",
    "Q": "GLN", "E": "GLU", "G": "GLY", "H": "HIS", "I": "ILE",
    "L": "LEU", "K": "LYS", "M": "MET", "F": "PHE", "P": "PRO",
    "S": "SER", "T": "THR", "W": "TRP", "Y": "TYR", "V": "VAL",
}


def place_atom(a, b, c, bond, angle_deg, torsion_deg):
    """Next atom from three predecessors plus internal coordinates."""
    ang = np.deg2rad(angle_deg)
    tor = np.deg2rad(torsion_deg + 180.0)
    bc = c - b
    bc = bc / np.linalg.norm(bc)
    n = np.cross(b - a, bc)
    n = n / np.linalg.norm(n)
    m = np.cross(n, bc)
    d_local = np.array(
        [
            -bond * np.cos(ang),
            bond * np.sin(ang) * np.cos(tor),
            bond * np.sin(ang) * np.sin(tor),
        ]
    )
    return c + d_local[0] * bc + d_local[1] * m + d_local[2] * n


def measure_dihedral(p0, p1, p2, p3):
    """Signed dihedral in degrees (trans = +-180)."""
    b0, b1, b2 = p1 - p0, p2 - p1, p3 - p2
    b1u = b1 / np.linalg.norm(b1)
    v = b0 - np.dot(b0, b1u) * b1u
    w = b2 - np.dot(b2, b1u) * b1u
    x = np.dot(v, w)
    y = np.dot(np.cross(b1u, v), w)
    return np.rad2deg(np.arctan2(y, x))


def build_chain(phis, psis, omegas=None):
    """Backbone [L, 3, 3] (N, CA, C rows) from torsion lists.

    phis[0] and psis[-1] are ignored (undefined at chain ends);
    omegas[i] is the peptide torsion between residues i and i+1.
    """
    L = len(phis)
    assert len(psis) == L
    if omegas is None:
        omegas = [180.0] * (L - 1)
    coords = np.zeros((L, 3, 3))
    n0 = np.array([0.0, 0.0, 0.0])
    ca0 = np.array([B_N_CA, 0.0, 0.0])
    ang = np.deg2rad(A_N_CA_C)
    c0 = ca0 + B_CA_C * np.array([-np.cos(ang), np.sin(ang), 0.0])
    coords[0] = [n0, ca0, c0]
    for i in range(1, L):
        n_prev, ca_prev, c_prev = coords[i - 1]
        n_i = place_atom(n_prev, ca_prev, c_prev, B_C_N, A_CA_C_N, psis[i - 1])
        ca_i = place_atom(ca_prev, c_prev, n_i, B_N_CA, A_C_N_CA, omegas[i - 1])
        c_i = place_atom(c_prev, n_i, ca_i, B_CA_C, A_N_CA_C, phis[i])
        coords[i] = [n_i, ca_i, c_i]
    return coords


def helix_torsions(L, rng=None, wobble=0.0):
    phis = np.full(L, -57.0)
    psis = np.full(L, -47.0)
    if rng is not None and wobble > 0:
        phis = phis + rng.uniform(-wobble, wobble, L)
        psis = psis + rng.uniform(-wobble, wobble, L)
    return list(phis), list(psis)


def random_coil_torsions(L, rng):
    """Alternate helix/strand-like torsions for conformational variety."""
    phis, psis = [], []
    for _ in range(L):
        if rng.random() < 0.5:
            phis.append(rng.uniform(-70, -50))
            psis.append(rng.uniform(-60, -35))
        else:
            phis.append(rng.uniform(-150, -90))
            psis.append(rng.uniform(90, 150))
    return phis, psis


def synthesize_protein(L, seed, coil=False):
    """(sequence, backbone coords [L,3,3]) with seeded torsion wobble."""
    rng = np.random.default_rng(seed)
    seq = "".join(rng.choice(list(AA20)) for _ in range(L))
    if coil:
        phis, psis = random_coil_torsions(L, rng)
    else:
        phis, psis = helix_torsions(L, rng, wobble=12.0)
    return seq, build_chain(phis, psis)


def carbonyl_oxygens(coords):
    """Place O on each residue anti to the following N (approximate)."""
    L = coords.shape[0]
    oxy = np.zeros((L, 3))
    for i in range(L):
        n_i, ca_i, c_i = coords[i]
        if i + 1 < L:
            torsion = measure_dihedral(coords[i + 1][0], n_i, ca_i, c_i)
            psi_o = torsion + 180.0
        else:
            psi_o = -35.0
        oxy[i] = place_atom(n_i, ca_i, c_i, B_C_O, A_CA_C_O, psi_o)
    return oxy


def _pdb_atom_line(serial, name, res3, chain, resseq, xyz, element):
    padded = name if len(name) >= 4 else f" {name:<3s}"
    return (
        f"ATOM  {serial:5d} {padded:<4s} {res3:<3s} {chain}{resseq:4d}    "
        f"{xyz[0]:8.3f}{xyz[1]:8.3f}{xyz[2]:8.3f}  1.00  0.00          {element:>2s}"
    )


def to_pdb(seq, coords, chain="A", with_oxygen=True):
    """Spell out a backbone as minimal well-formed PDB text."""
    lines = []
    serial = 1
    oxy = carbonyl_oxygens(coords) if with_oxygen else None
    for i, aa in enumerate(seq):
        res3 = AA1_TO_3.get(aa, "UNK")
        for name, pos, elem in (
            ("N", coords[i, 0], "N"),
            ("CA", coords[i, 1], "C"),
            ("C", coords[i, 2], "C"),
        ):
            lines.append(_pdb_atom_line(serial, name, res3, chain, i + 1, pos, elem))
            serial += 1
        if with_oxygen:
            lines.append(_pdb_atom_line(serial, "O", res3, chain, i + 1, oxy[i], "O"))
            serial += 1
    lines.append("TER")
    lines.append("END")
    return "\n".join(lines) + "\n"


def random_rotation(rng):
    """Haar-ish random proper rotation via QR with sign fix."""
    m = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(m)
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
