"""Autoregressive sequence decoder over stacked context and token rows.

Per-residue context rows form a prefix.  The token sequence is wrapped
in start and end markers, embedded, appended after the prefix, and the
whole stack shares one learned position table.  A causal mask keeps
token rows from looking ahead; the first token row (the start marker)
predicts the first residue, each residue row predicts its successor,
and the last residue row predicts the end marker.  Context rows are
never scored.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .nn import LayerNorm, Linear, ParamSet, TransformerBlock, causal_mask, normal_init
from .numerics import Tensor
from .structure_io import BOS_ID, EOS_ID, VOCAB_SIZE


def sample_token(logits: np.ndarray, rng, temperature: float, top_k: int) -> int:
    """Temperature + top-k draw from one logit row.

    Candidate ranking breaks exact logit ties toward the lower token id,
    so a near-zero temperature reduces to deterministic argmax."""
    z = np.asarray(logits, dtype=np.float64)
    k = max(1, min(int(top_k), len(z)))
    order = np.argsort(-z, kind="stable")
    keep = order[:k]
    zk = z[keep] / max(float(temperature), 1e-8)
    zk -= zk.max()
    p = np.exp(zk)
    p /= p.sum()
    r = rng.random()
    idx = int(np.searchsorted(np.cumsum(p), r, side="right"))
    return int(keep[min(idx, k - 1)])


class Decoder:
    """Transformer over [context rows; token embeddings]."""

    def __init__(self, cfg, ps: ParamSet, rng, prefix: str = "decoder"):
        self.cfg = cfg
        n_pos = 2 * cfg.max_len + 2
        self.tok = normal_init(ps, rng, f"{prefix}.tok", (VOCAB_SIZE, cfg.h_s), 0.02)
        self.pos = normal_init(ps, rng, f"{prefix}.pos", (n_pos, cfg.h_s), 0.02)
        self.blocks = [
            TransformerBlock(ps, rng, f"{prefix}.block{i}", cfg.h_s, cfg.dec_heads)
            for i in range(cfg.dec_layers)
        ]
        self.ln_f = LayerNorm(ps, f"{prefix}.ln_f", cfg.h_s)
        self.out = Linear(ps, rng, f"{prefix}.out", cfg.h_s, VOCAB_SIZE)

    def forward(self, context: Tensor, tokens) -> Tensor:
        """Logits [n_ctx + len(tokens), vocab] over the stacked rows."""
        toks = np.asarray(tokens, dtype=np.int64)
        n_ctx = context.shape[0]
        total = n_ctx + len(toks)
        if total > self.pos.shape[0]:
            raise nm.ShapeError(
                f"{total} rows exceed the {self.pos.shape[0]}-entry position table"
            )
        emb = nm.gather_rows(self.tok, toks)
        x = nm.concat([context, emb], axis=0)
        x = nm.add(x, nm.gather_rows(self.pos, np.arange(total)))
        mask = causal_mask(total, n_ctx if self.cfg.prefix_bidirectional else 0)
        for block in self.blocks:
            x = block(x, mask)
        return self.out(self.ln_f(x))

    def sequence_loss(self, context: Tensor, residue_ids) -> Tensor:
        """Mean next-token cross entropy; only token rows are scored."""
        ids = np.asarray(residue_ids, dtype=np.int64)
        tokens = np.concatenate([[BOS_ID], ids, [EOS_ID]])
        n_ctx = context.shape[0]
        t = len(tokens)
        logits = self.forward(context, tokens)
        targets = np.zeros(n_ctx + t, dtype=np.int64)
        mask = np.zeros(n_ctx + t, dtype=np.float32)
        targets[n_ctx : n_ctx + t - 1] = tokens[1:]
        mask[n_ctx : n_ctx + t - 1] = 1.0
        return nm.cross_entropy(logits, targets, mask)

    def generate(self, context: Tensor, seed=0, temperature=None, top_k=None,
                 max_new=None) -> np.ndarray:
        """Sampled residue ids (markers stripped); call outside any tape.

        Stops at the end marker or after max_new tokens."""
        cfg = self.cfg
        temperature = cfg.temperature if temperature is None else temperature
        top_k = cfg.top_k if top_k is None else top_k
        cap = cfg.max_len if max_new is None else int(max_new)
        rng = np.random.default_rng(seed)
        tokens = [BOS_ID]
        out: list[int] = []
        while len(out) < cap:
            logits = self.forward(context, np.asarray(tokens))
            nxt = sample_token(logits.data[-1], rng, temperature, top_k)
            if nxt == EOS_ID:
                break
            tokens.append(nxt)
            out.append(nxt)
        return np.asarray(out, dtype=np.int64)
