"""Command line entry points.

Five subcommands cover the pipeline: `build-surface` parses structure
files and caches backbone coordinates, the native sequence, and the
molecular surface arrays per protein; `train` fits a model from those
caches; `generate` samples sequences as FASTA; `eval` scores a FASTA
against the cached natives; `split` assigns grouped cross-validation
folds.

Machine-readable output goes to stdout (training TSV, FASTA, fold
table) unless an --out flag redirects it to a file; diagnostics go to
stderr.  Exit codes: 0 on success, 1 on usage or data errors, 2 when
training diverges (a checkpoint of the last good state is kept).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .container import (
    ContainerError,
    chunk_text,
    read_container,
    text_chunk,
    write_container,
)
from .metrics import (
    EvalRow,
    EvaluationError,
    evaluation_report,
    grouped_kfold,
    padded_recovery,
    sequence_identity,
)
from .model import (
    ModelError,
    TrainingDiverged,
    TrainItem,
    load_checkpoint,
    make_train_state,
    planned_steps,
    train,
)
from .structure_io import VOCAB, StructureError, backbone_coords, load_pdb
from .surface import (
    SurfaceError,
    build_surface,
    cloud_from_chunks,
    cloud_to_chunks,
    write_ply,
)

log = logging.getLogger("dspg")

LOG_EVERY = 50
CACHE_SUFFIX = ".dspg"


class CliError(Exception):
    """Unusable arguments or inputs; maps to exit code 1."""


def file_seed(base: int, stem: str) -> list[int]:
    """Per-file seed material: run seed plus a checksum of the file stem."""
    return [int(base), zlib.crc32(stem.encode("utf-8"))]


def _load_cfg(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return load_config(path)


def _radii(cfg: RunConfig) -> dict:
    return {
        "C": cfg.radius_c,
        "N": cfg.radius_n,
        "O": cfg.radius_o,
        "S": cfg.radius_s,
        "Se": cfg.radius_se,
        "H": cfg.radius_h,
    }


# ---------------------------------------------------------------------------
# per-protein cache files


def cache_chunks(rec, cloud) -> dict:
    """Everything the pipeline needs downstream of the PDB parser."""
    chunks = {
        "id": text_chunk(rec.id),
        "sequence": text_chunk(rec.sequence),
        "coords": backbone_coords(rec).astype(np.float32),
    }
    for key, arr in cloud_to_chunks(cloud).items():
        chunks[f"cloud/{key}"] = arr
    return chunks


def read_cache(path, with_cloud: bool = True):
    """Return (id, sequence, coords, cloud or None) from a cache file."""
    chunks = read_container(path)
    try:
        pid = chunk_text(chunks["id"])
        seq = chunk_text(chunks["sequence"])
        coords = chunks["coords"]
    except KeyError as exc:
        raise CliError(f"{path}: not a protein cache (missing chunk {exc})")
    cloud = None
    if with_cloud:
        cloud = cloud_from_chunks(
            {k[len("cloud/"):]: v for k, v in chunks.items() if k.startswith("cloud/")}
        )
    return pid, seq, coords, cloud


def _cache_paths(cache_dir) -> list:
    root = Path(cache_dir)
    if not root.is_dir():
        raise CliError(f"not a directory: {root}")
    paths = sorted(root.glob(f"*{CACHE_SUFFIX}"))
    if not paths:
        raise CliError(f"no {CACHE_SUFFIX} caches in {root}; run build-surface first")
    return paths


def _train_items(cache_dir, need_cloud: bool) -> list:
    items = []
    for path in _cache_paths(cache_dir):
        pid, seq, coords, cloud = read_cache(path, with_cloud=need_cloud)
        items.append(
            TrainItem(
                id=pid,
                coords=coords,
                cloud=cloud,
                tokens=VOCAB.encode(seq)[1:-1],
            )
        )
    return items


# ---------------------------------------------------------------------------
# build-surface


def _build_one(task):
    """Worker body: parse, render, and cache one structure.

    Never raises; failures come back as a message so the parent can log
    them in deterministic order."""
    path, out_dir, seed, cfg, ply = task
    try:
        rec = load_pdb(path)
        cloud = build_surface(
            rec,
            seed=file_seed(seed, rec.id),
            budget=cfg.surface_points,
            tau=cfg.tau,
            radii_by_element=_radii(cfg),
        )
        write_container(Path(out_dir) / f"{rec.id}{CACHE_SUFFIX}", cache_chunks(rec, cloud))
        if ply:
            write_ply(cloud, Path(out_dir) / f"{rec.id}.ply")
        return rec.id, len(cloud.points), None
    except (StructureError, SurfaceError, ContainerError) as exc:
        return Path(path).stem, 0, str(exc)


def cmd_build_surface(args) -> int:
    cfg = _load_cfg(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    if args.workers < 1:
        raise CliError(f"--workers must be positive, got {args.workers}")
    root = Path(args.pdb_dir)
    if not root.is_dir():
        raise CliError(f"not a directory: {root}")
    paths = sorted(root.glob("*.pdb"))
    if not paths:
        raise CliError(f"no .pdb files in {root}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(p, out, seed, cfg, args.ply) for p in paths]
    if args.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_build_one, tasks))
    else:
        results = [_build_one(t) for t in tasks]
    built = 0
    for pid, n_points, err in sorted(results):  # id order, not completion order
        if err is not None:
            log.warning("skipping %s: %s", pid, err)
        else:
            log.info("built surface for %s (%d points)", pid, n_points)
            built += 1
    if built == 0:
        raise CliError("no surfaces could be built")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = _load_cfg(args.config)
    if args.backbone_only:
        mode = "backbone_only"
    elif args.surface_only:
        mode = "surface_only"
    else:
        mode = "full"
    items = _train_items(args.cache_dir, need_cloud=mode != "backbone_only")
    out = Path(args.out_checkpoint)
    if args.resume and out.is_file():
        state = load_checkpoint(out, cfg, mode)
        log.info("resuming from %s at step %d", out, state.step)
    else:
        state = make_train_state(cfg, mode)
    total = planned_steps(cfg, len(items))
    log_fh = None
    header = "step\tlr\tloss"
    print(header, flush=True)
    if args.log is not None:
        fresh = not (args.resume and Path(args.log).is_file())
        log_fh = open(args.log, "w" if fresh else "a")
        if fresh:
            log_fh.write(header + "\n")

    def on_step(step, lr, loss):
        line = f"{step}\t{lr:.8g}\t{loss:.6f}"
        print(line, flush=True)
        if log_fh is not None:
            log_fh.write(line + "\n")
        if step % LOG_EVERY == 0 or step == total:
            log.info("step %d/%d lr %.3g loss %.4f", step, total, lr, loss)

    try:
        train(state, items, total, on_step=on_step, checkpoint_path=out,
              until=args.until)
    finally:
        if log_fh is not None:
            log_fh.close()
    log.info("saved checkpoint %s", out)
    return 0


# ---------------------------------------------------------------------------
# generate


def _gen_cache_paths(cache_arg) -> list:
    p = Path(cache_arg)
    if p.is_file():
        return [p]
    return _cache_paths(p)


def cmd_generate(args) -> int:
    if args.n < 1:
        raise CliError(f"--n must be positive, got {args.n}")
    # settings travel inside the checkpoint; an explicit --config must agree
    cfg = load_config(args.config) if args.config is not None else None
    model = load_checkpoint(args.checkpoint, cfg).model
    temperature = model.cfg.temperature if args.temperature is None else args.temperature
    top_k = model.cfg.top_k if args.top_k is None else args.top_k
    need_cloud = model.mode != "backbone_only"
    pieces = []
    n_seqs = 0
    for path in _gen_cache_paths(args.cache):
        pid, _seq, coords, cloud = read_cache(path, with_cloud=need_cloud)
        for i in range(args.n):
            ids = model.generate(
                coords,
                cloud,
                seed=file_seed(args.seed, pid) + [i],
                temperature=temperature,
                top_k=top_k,
            )
            seq = "".join(VOCAB.tokens[t] for t in ids)
            pieces.append(f">{pid}|sample{i}|seed{args.seed}\n{seq}\n")
            n_seqs += 1
    text = "".join(pieces)
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
        log.info("wrote %d sequences to %s", n_seqs, args.out)
    return 0


# ---------------------------------------------------------------------------
# eval


def parse_fasta(path) -> dict:
    """Protein id -> list of sequences.

    The id is the header text before the first '|', so sample and seed
    decorations added by `generate` group back onto their protein."""
    p = Path(path)
    if not p.is_file():
        raise CliError(f"no such FASTA file: {p}")
    by_id: dict = {}
    header = None
    parts: list = []

    def flush():
        if header is None:
            return
        seq = "".join(parts)
        if not seq:
            raise CliError(f"{p}: record '{header}' has no sequence")
        by_id.setdefault(header, []).append(seq)

    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            flush()
            header = line[1:].split("|", 1)[0].strip()
            if not header:
                raise CliError(f"{p}:{lineno}: empty FASTA header")
            parts = []
        elif header is None:
            raise CliError(f"{p}:{lineno}: sequence data before any header")
        else:
            parts.append(line)
    flush()
    if not by_id:
        raise CliError(f"{p}: no FASTA records")
    return by_id


def cmd_eval(args) -> int:
    preds = parse_fasta(args.fasta)
    natives = {}
    for path in _cache_paths(args.cache_dir):
        pid, seq, _coords, _cloud = read_cache(path, with_cloud=False)
        natives[pid] = seq
    missing = sorted(set(preds) - set(natives))
    rows = []
    for pid in sorted(set(preds) & set(natives)):
        ref = np.array(list(natives[pid]))
        samples = [np.array(list(s)) for s in preds[pid]]
        recoveries = [padded_recovery(s, ref) for s in samples]
        matched = [s for s in samples if len(s) == len(ref)]
        identities = [sequence_identity(s, ref) for s in matched]
        rows.append(
            EvalRow(
                id=pid,
                n_ref=len(ref),
                n_gen=len(samples[0]),
                recovery=float(np.mean(recoveries)),
                length_match=len(matched) == len(samples),
                identity=float(np.mean(identities)) if identities else None,
            )
        )
    Path(args.out_report).write_text(evaluation_report(rows, missing=missing))
    log.info("wrote report for %d proteins to %s", len(rows), args.out_report)
    if missing:
        log.warning("%d FASTA ids had no cache and were excluded", len(missing))
    return 0


# ---------------------------------------------------------------------------
# split


def cmd_split(args) -> int:
    path = Path(args.labels)
    if not path.is_file():
        raise CliError(f"no such labels file: {path}")
    groups: dict = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise CliError(f"{path}:{lineno}: expected 'protein_id<TAB>label'")
        pid, label = parts
        if pid in groups:
            raise CliError(f"{path}:{lineno}: duplicate protein id '{pid}'")
        groups[pid] = label
    if not groups:
        raise CliError(f"no labeled proteins in {path}")
    folds = grouped_kfold(groups, k=args.k, seed=args.seed)
    lines = [f"{folds[pid]}\t{pid}" for pid in sorted(folds, key=lambda p: (folds[p], p))]
    text = "\n".join(lines) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
        log.info("assigned %d proteins to %d folds in %s", len(folds), args.k, args.out)
    return 0


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dspg",
        description="Structure-conditioned protein sequence design pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-surface", help="parse structures and cache per-protein arrays")
    p.add_argument("--pdb-dir", required=True, help="directory of input .pdb files")
    p.add_argument("--out", required=True, help="output directory for cache files")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--config", default=None, help="key = value settings file")
    p.add_argument("--workers", type=int, default=min(4, os.cpu_count() or 1),
                   help="parallel surface builds")
    p.add_argument("--ply", action="store_true", help="also write viewable .ply point clouds")
    p.set_defaults(func=cmd_build_surface)

    p = sub.add_parser("train", help="train a model on cached proteins")
    p.add_argument("--cache-dir", required=True, help="directory of build-surface output")
    p.add_argument("--config", default=None)
    p.add_argument("--out-checkpoint", required=True, help="checkpoint path")
    branch = p.add_mutually_exclusive_group()
    branch.add_argument("--backbone-only", action="store_true",
                        help="zero the surface branch")
    branch.add_argument("--surface-only", action="store_true",
                        help="zero the backbone branch")
    p.add_argument("--resume", action="store_true", help="continue from an existing checkpoint")
    p.add_argument("--until", type=int, default=None,
                   help="stop after this step without shortening the lr schedule")
    p.add_argument("--log", default=None, help="also append the stdout TSV to this file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample sequences for cached proteins as FASTA")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--cache", required=True, help="cache file or directory of caches")
    p.add_argument("--n", type=int, default=1, help="sequences per protein")
    p.add_argument("--temperature", type=float, default=None, help="override config temperature")
    p.add_argument("--top-k", type=int, default=None, help="override config top_k")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="cross-check against the checkpoint")
    p.add_argument("--out", default=None, help="FASTA path (default: stdout)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score a FASTA against cached native sequences")
    p.add_argument("--fasta", required=True, help="generated sequences")
    p.add_argument("--cache-dir", required=True)
    p.add_argument("--out-report", required=True, help="report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("split", help="grouped k-fold assignment from a label table")
    p.add_argument("--labels", required=True, help="TSV of protein_id<TAB>label")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="fold table path (default: stdout)")
    p.set_defaults(func=cmd_split)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; fold that into the error code
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return 2
    except (CliError, ConfigError, ContainerError, EvaluationError, ModelError,
            StructureError, SurfaceError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
