"""Ties the two structure encoders to the sequence decoder.

The decoder prefix is the elementwise sum of the backbone rows and the
broadcast surface descriptor; single-branch modes drop the other
encoder entirely, which also starves its parameters of gradient.
Includes the Adam training loop with warmup/cosine learning rate,
divergence detection, and container-backed checkpoints that round-trip
optimizer state bit for bit.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .backbone import BackboneEncoder
from .config import RunConfig, parse_config, render_config
from .container import chunk_text, read_container, text_chunk, write_container
from .decoder import Decoder
from .nn import Adam, ParamSet, global_grad_norm, lr_at
from .surface import SurfaceCloud
from .surface_encoder import SurfaceEncoder

log = logging.getLogger(__name__)

MODES = ("full", "backbone_only", "surface_only")


class ModelError(Exception):
    pass


class CheckpointMismatchError(ModelError):
    """Checkpoint was produced under a different config or mode."""


class TrainingDiverged(ModelError):
    def __init__(self, step: int, message: str):
        super().__init__(message)
        self.step = step


class DualModel:
    """Backbone encoder + surface encoder + autoregressive decoder."""

    def __init__(self, cfg: RunConfig, mode: str = "full"):
        if mode not in MODES:
            raise ModelError(f"unknown mode '{mode}', expected one of {MODES}")
        self.cfg = cfg
        self.mode = mode
        self.ps = ParamSet()
        rng = np.random.default_rng(cfg.seed)
        self.backbone = BackboneEncoder(cfg, self.ps, rng)
        self.surface = SurfaceEncoder(cfg, self.ps, rng)
        self.decoder = Decoder(cfg, self.ps, rng)

    def context(self, coords: np.ndarray, cloud: SurfaceCloud | None) -> nm.Tensor:
        """[L, h_s] decoder prefix rows for one protein."""
        n = len(coords)
        if self.mode == "backbone_only":
            return self.backbone.encode(coords)
        surf = self.surface.encode(cloud, n, seed=self.cfg.seed)
        if self.mode == "surface_only":
            return surf
        return nm.add(self.backbone.encode(coords), surf)

    def loss(self, coords, cloud, residue_ids) -> nm.Tensor:
        return self.decoder.sequence_loss(self.context(coords, cloud), residue_ids)

    def generate(self, coords, cloud, seed=0, temperature=None, top_k=None,
                 max_new=None) -> np.ndarray:
        return self.decoder.generate(
            self.context(coords, cloud), seed, temperature, top_k, max_new
        )


@dataclass
class TrainItem:
    """One training example: geometry, surface, and residue ids."""

    id: str
    coords: np.ndarray
    cloud: SurfaceCloud | None
    tokens: np.ndarray


@dataclass
class TrainState:
    model: DualModel
    adam: Adam
    step: int
    rng: np.random.Generator


def make_train_state(cfg: RunConfig, mode: str = "full") -> TrainState:
    model = DualModel(cfg, mode)
    skip = set()
    if cfg.freeze_backbone:
        skip = {name for name in model.ps.names() if name.startswith("backbone.")}
    adam = Adam(model.ps, clip=cfg.clip, skip=skip)
    return TrainState(
        model=model, adam=adam, step=0, rng=np.random.default_rng([cfg.seed, 4])
    )


def planned_steps(cfg: RunConfig, n_items: int) -> int:
    """cfg.steps if set, otherwise epochs over the round-robin schedule."""
    per_epoch = int(np.ceil(n_items / cfg.batch))
    return cfg.steps if cfg.steps > 0 else cfg.epochs * per_epoch


def train(state: TrainState, items: list, total_steps: int, on_step=None,
          checkpoint_path=None, until=None) -> list[float]:
    """Run the optimizer from state.step up to total_steps.

    Items are visited round-robin in id order; each step averages the
    loss over cfg.batch consecutive items.  The learning rate schedule
    always spans total_steps; `until` stops earlier without shortening
    the schedule, so an interrupted run resumes exactly.  A non-finite
    loss or gradient aborts: the pre-step state is checkpointed (when a
    path is given) and TrainingDiverged is raised.  Returns per-step
    losses.
    """
    cfg = state.model.cfg
    items = sorted(items, key=lambda it: it.id)
    if not items:
        raise ModelError("no training items")
    stop = total_steps if until is None else min(total_steps, until)
    losses: list[float] = []
    while state.step < stop:
        lr = lr_at(state.step, total_steps, cfg.lr, cfg.warmup_frac)
        state.model.ps.zero_grad()
        with nm.Tape() as tape:
            total = None
            for b in range(cfg.batch):
                item = items[(state.step * cfg.batch + b) % len(items)]
                part = state.model.loss(item.coords, item.cloud, item.tokens)
                total = part if total is None else nm.add(total, part)
            loss = nm.scale(total, 1.0 / cfg.batch)
        loss_val = loss.item()
        if np.isfinite(loss_val):
            tape.backward(loss)
        grad_norm = global_grad_norm(state.model.ps.tensors())
        if not (np.isfinite(loss_val) and np.isfinite(grad_norm)):
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, state)
            raise TrainingDiverged(
                state.step,
                f"non-finite loss or gradient at step {state.step}",
            )
        state.adam.step(lr)
        state.step += 1
        losses.append(loss_val)
        if on_step is not None:
            on_step(state.step, lr, loss_val)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state)
    return losses


def save_checkpoint(path, state: TrainState) -> None:
    chunks: dict[str, np.ndarray] = {}
    for name, arr in state.model.ps.state_arrays().items():
        chunks[f"param/{name}"] = arr
    for name, arr in state.adam.state_arrays().items():
        chunks[f"adam/{name}"] = arr
    chunks["step"] = np.array(state.step, dtype=np.int64)
    chunks["adam_steps"] = np.array(state.adam.step_count, dtype=np.int64)
    chunks["mode"] = text_chunk(state.model.mode)
    chunks["config"] = text_chunk(render_config(state.model.cfg))
    chunks["rng"] = text_chunk(json.dumps(state.rng.bit_generator.state))
    write_container(path, chunks)


def load_checkpoint(path, cfg: RunConfig | None = None, mode: str | None = None) -> TrainState:
    """Restore model + optimizer.

    With cfg=None the run settings are taken from the checkpoint itself;
    an explicit cfg (or mode) must match what was stored."""
    chunks = read_container(path)
    stored_cfg = chunk_text(chunks["config"])
    if cfg is None:
        cfg = parse_config(stored_cfg)
    elif render_config(cfg) != stored_cfg:
        raise CheckpointMismatchError(
            "config does not match the checkpoint; re-run with the original settings"
        )
    stored_mode = chunk_text(chunks["mode"])
    if mode is not None and mode != stored_mode:
        raise CheckpointMismatchError(
            f"checkpoint was trained in mode '{stored_mode}', not '{mode}'"
        )
    state = make_train_state(cfg, stored_mode)
    state.model.ps.load_state_arrays(
        {k[len("param/"):]: v for k, v in chunks.items() if k.startswith("param/")}
    )
    state.adam.load_state_arrays(
        {k[len("adam/"):]: v for k, v in chunks.items() if k.startswith("adam/")}
    )
    state.step = int(chunks["step"])
    state.adam.step_count = int(chunks["adam_steps"])
    state.rng.bit_generator.state = json.loads(chunk_text(chunks["rng"]))
    return state
