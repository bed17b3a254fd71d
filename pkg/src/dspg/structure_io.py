"""PDB ingestion and sequence tokenization.

Parsing is deliberately narrow: ATOM records only (HETATM ligands and
waters are ignored), fixed-column coordinates, first chain when several
are present, first altLoc conformer.  A residue enters the model only if
its N, CA, and C atoms are all present; every accepted atom feeds the
surface no matter how its residue fared.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

# one-letter codes in vocabulary id order, then unknown, then the two
# sequence delimiters
VOCAB_TOKENS = "ARNDCQEGHILKMFPSTWYVX12"
UNK_ID = 20
BOS_ID = 21
EOS_ID = 22
VOCAB_SIZE = 23

AA3_TO_1 = {
    "ALA": "A", "ARG": "R", "ASN": "N", "ASP": "D", "CYS": "C",
    "GLN": "Q", "GLU": "E", "GLY": "G", "HIS": "H", "ILE": "I",
    "LEU": "L", "LYS": "K", "MET": "M", "PHE": "F", "PRO": "P",
    "SER": "S", "THR": "T", "TRP": "W", "TYR": "Y", "VAL": "V",
    # selenomethionine shows up as ATOM records in Se-MAD structures
    "MSE": "M",
}

ELEMENTS = ("C", "N", "O", "S", "Se", "H")
_ELEMENT_INDEX = {e.upper(): i for i, e in enumerate(ELEMENTS)}


class StructureError(Exception):
    pass


class ElementError(StructureError):
    """An atom's element falls outside the supported alphabet."""


class EmptyStructureError(StructureError):
    """No usable residues were found."""


class TokenizationError(StructureError):
    """A sequence character has no vocabulary id."""


class Vocabulary:
    """23 tokens: 20 amino acids, unknown 'X', and delimiters '1'/'2'."""

    def __init__(self):
        self.tokens = VOCAB_TOKENS
        self.token_to_id = {c: i for i, c in enumerate(VOCAB_TOKENS)}

    def encode(self, seq: str) -> np.ndarray:
        """Wrap a residue string in begin/end markers and map to ids."""
        ids = [BOS_ID]
        for ch in seq:
            tid = self.token_to_id.get(ch)
            if tid is None:
                raise TokenizationError(f"character '{ch}' is not in the vocabulary")
            ids.append(tid)
        ids.append(EOS_ID)
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids) -> str:
        """Inverse of encode: drop a leading begin marker, stop at end."""
        ids = list(np.asarray(ids, dtype=np.int64))
        if ids and ids[0] == BOS_ID:
            ids = ids[1:]
        out = []
        for tid in ids:
            if tid == EOS_ID:
                break
            if not (0 <= tid < VOCAB_SIZE):
                raise TokenizationError(f"id {tid} is not in the vocabulary")
            out.append(self.tokens[tid])
        return "".join(out)


VOCAB = Vocabulary()


@dataclass
class Residue:
    name3: str
    aa: str
    n: np.ndarray
    ca: np.ndarray
    c: np.ndarray


@dataclass
class ProteinRecord:
    id: str
    residues: list = field(default_factory=list)
    sequence: str = ""
    atom_xyz: np.ndarray = None        # [M, 3] float32
    atom_elems: np.ndarray = None      # [M] int8, index into ELEMENTS
    dropped_residues: int = 0

    def __len__(self) -> int:
        return len(self.residues)


def _parse_element(line: str) -> str:
    """Element from columns 77-78, falling back to the atom-name field."""
    sym = line[76:78].strip() if len(line) >= 78 else ""
    if not sym:
        name = line[12:16]
        # PDB right-justifies one-letter elements: col 13 blank or a digit
        # means the element is the single letter at col 14
        if name[0] in " 0123456789":
            sym = name[1].strip()
        else:
            sym = name[:2].strip()
    return sym.strip().upper()


def parse_pdb(text: str, pdb_id: str = "?") -> ProteinRecord:
    """Build a ProteinRecord from PDB file text.

    Raises ElementError for atoms outside {C, N, O, S, Se, H} and
    EmptyStructureError when fewer than two complete residues survive.
    """
    chain_wanted = None
    atoms_xyz: list = []
    atoms_elem: list = []
    residue_order: list = []
    residue_atoms: dict = {}
    residue_name: dict = {}

    for line in text.splitlines():
        if not line.startswith("ATOM"):
            continue
        if len(line) < 54:
            raise StructureError(f"{pdb_id}: ATOM record shorter than coordinate columns")
        altloc = line[16]
        if altloc not in (" ", "A"):
            continue
        chain = line[21]
        if chain_wanted is None:
            chain_wanted = chain
        elif chain != chain_wanted:
            continue
        elem = _parse_element(line)
        idx = _ELEMENT_INDEX.get(elem)
        if idx is None:
            raise ElementError(
                f"{pdb_id}: element '{elem.capitalize()}' not supported "
                f"(allowed: {', '.join(ELEMENTS)})"
            )
        xyz = np.array(
            [float(line[30:38]), float(line[38:46]), float(line[46:54])],
            dtype=np.float32,
        )
        atoms_xyz.append(xyz)
        atoms_elem.append(idx)
        key = (line[22:26], line[26] if len(line) > 26 else " ")
        if key not in residue_atoms:
            residue_atoms[key] = {}
            residue_name[key] = line[17:20].strip()
            residue_order.append(key)
        name = line[12:16].strip()
        residue_atoms[key].setdefault(name, xyz)

    if not atoms_xyz:
        raise EmptyStructureError(f"{pdb_id}: no ATOM records in the first chain")

    residues: list = []
    seq_chars: list = []
    dropped = 0
    for key in residue_order:
        atoms = residue_atoms[key]
        if not all(a in atoms for a in ("N", "CA", "C")):
            dropped += 1
            continue
        name3 = residue_name[key]
        aa = AA3_TO_1.get(name3, "X")
        residues.append(Residue(name3, aa, atoms["N"], atoms["CA"], atoms["C"]))
        seq_chars.append(aa)
    if dropped:
        log.warning("%s: dropped %d residue(s) with incomplete backbone", pdb_id, dropped)
    if len(residues) < 2:
        raise EmptyStructureError(
            f"{pdb_id}: only {len(residues)} complete residue(s); need at least 2"
        )

    return ProteinRecord(
        id=pdb_id,
        residues=residues,
        sequence="".join(seq_chars),
        atom_xyz=np.stack(atoms_xyz).astype(np.float32),
        atom_elems=np.asarray(atoms_elem, dtype=np.int8),
        dropped_residues=dropped,
    )


def load_pdb(path) -> ProteinRecord:
    from pathlib import Path

    p = Path(path)
    return parse_pdb(p.read_text(), pdb_id=p.stem)


def backbone_coords(record: ProteinRecord) -> np.ndarray:
    """[L, 3, 3] float32: N, CA, C positions per residue, chain order."""
    out = np.empty((len(record.residues), 3, 3), dtype=np.float32)
    for i, res in enumerate(record.residues):
        out[i, 0] = res.n
        out[i, 1] = res.ca
        out[i, 2] = res.c
    return out
