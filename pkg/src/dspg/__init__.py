"""Inverse protein folding from dual structure representations.

Backbone geometry and molecular surface chemistry are encoded separately,
fused per residue, and decoded autoregressively into an amino-acid
sequence.  Everything runs on a small tape-based autodiff engine over
numpy arrays; no deep-learning framework is involved.
"""

__version__ = "0.1.0"
