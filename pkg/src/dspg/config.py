"""Run configuration: flat `key = value` files with `#` comments.

Unknown keys are hard errors so typos cannot silently fall back to
defaults.  `render` produces a canonical text form that is echoed into
checkpoints and caches.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    # residue-level embedding width shared by both encoders and the decoder
    h_s: int = 256
    # backbone geometry channels
    d_s: int = 128
    d_v: int = 16
    gvp_layers: int = 4
    gvp_hidden: int = 16
    enc_layers: int = 2
    enc_heads: int = 8
    # decoder stack
    dec_layers: int = 4
    dec_heads: int = 8
    max_len: int = 512
    dropout: float = 0.0
    prefix_bidirectional: bool = False
    # surface encoder
    surf_g: int = 32
    surf_k: int = 16
    surf_d: int = 64
    h_g: int = 512
    # surface geometry
    tau: float = 0.3
    surface_points: int = 8192
    radius_c: float = 1.70
    radius_n: float = 1.55
    radius_o: float = 1.52
    radius_s: float = 1.80
    radius_se: float = 1.90
    radius_h: float = 1.10
    # optimization
    lr: float = 1e-3
    epochs: int = 10
    steps: int = 0
    batch: int = 1
    warmup_frac: float = 0.05
    clip: float = 1.0
    seed: int = 0
    freeze_backbone: bool = False
    # sampling
    temperature: float = 0.1
    top_k: int = 10


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(name: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key '{name}': cannot parse '{raw}' as {typ.__name__}") from exc


def parse_config(text: str) -> RunConfig:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{line.rstrip()}'")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        field = _FIELDS.get(key)
        if field is None:
            raise ConfigError(f"line {lineno}: unknown config key '{key}'")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key '{key}'")
        values[key] = _parse_value(key, raw, _FIELD_TYPES[key])
    cfg = RunConfig(**values)
    validate_config(cfg)
    return cfg


_FIELD_TYPES = {
    f.name: (bool if isinstance(f.default, bool) else type(f.default))
    for f in dataclasses.fields(RunConfig)
}


def validate_config(cfg: RunConfig) -> None:
    positive = [
        "h_s", "d_s", "d_v", "gvp_layers", "gvp_hidden", "enc_layers", "enc_heads",
        "dec_layers", "dec_heads", "max_len", "surf_g", "surf_k", "surf_d", "h_g",
        "surface_points", "batch", "top_k",
    ]
    for name in positive:
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"config key '{name}' must be positive")
    if cfg.h_s % cfg.enc_heads or cfg.h_s % cfg.dec_heads:
        raise ConfigError("h_s must be divisible by enc_heads and dec_heads")
    if cfg.surf_d % 4:
        raise ConfigError("surf_d must be divisible by 4 (attention heads)")
    if cfg.tau <= 0:
        raise ConfigError("tau must be positive")
    if not (0.0 <= cfg.warmup_frac < 1.0):
        raise ConfigError("warmup_frac must lie in [0, 1)")
    if cfg.temperature < 0:
        raise ConfigError("temperature must be non-negative")
    if not (0.0 <= cfg.dropout < 1.0):
        raise ConfigError("dropout must lie in [0, 1)")


def render_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
