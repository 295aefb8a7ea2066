"""Run configuration: model presets, overrides, and the text config format.

Config files are plain ``key = value`` lines ('#' starts a comment); keys
mirror RunConfig fields and values are coerced to the field's type. The
dataset root falls back to the LESS_DATA_DIR environment variable when no
explicit path is given.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .hypermae import HyperMaeConfig

__all__ = ["RunConfig", "MODEL_PRESETS", "parse_config_file", "DATA_DIR_ENV"]

DATA_DIR_ENV = "LESS_DATA_DIR"

# encoder/decoder geometry; decoder heads keep head_dim 64 so the d1/d2
# split stays integral at ratio 16
MODEL_PRESETS = {
    "small": dict(dim=384, num_heads=6, depth=12, dec_dim=256, dec_num_heads=4, dec_depth=4),
    "base": dict(dim=768, num_heads=12, depth=12, dec_dim=512, dec_num_heads=8, dec_depth=8),
}


@dataclass
class RunConfig:
    model: str = "small"
    enc_depth: int | None = None  # override preset depth
    dec_depth: int | None = None
    ratio: int = 16
    rank: int = 1
    combine: str = "mean"
    patch: int = 16
    spatial_mask_ratio: float = 0.75
    channel_mask_ratio: float = 0.5
    use_perception_mask: bool = True
    threshold_pitches: float = 2.0
    threshold_m: float | None = None  # absolute override of the pitch rule
    epochs: int = 30
    batch_size: int = 16
    base_lr: float = 1.5e-4
    warmup_frac: float = 0.05
    weight_decay: float = 5e-2
    seed: int = 0
    precision: str = "f64"
    threads: int = 0  # 0 = library default
    data_dir: str | None = None

    def resolved_data_dir(self) -> str | None:
        return self.data_dir or os.environ.get(DATA_DIR_ENV)

    def hypermae_config(self) -> HyperMaeConfig:
        if self.model not in MODEL_PRESETS:
            raise ValueError(f"unknown model preset {self.model!r}")
        preset = MODEL_PRESETS[self.model]
        return HyperMaeConfig(
            dim=preset["dim"],
            depth=self.enc_depth or preset["depth"],
            num_heads=preset["num_heads"],
            dec_dim=preset["dec_dim"],
            dec_depth=self.dec_depth or preset["dec_depth"],
            dec_num_heads=preset["dec_num_heads"],
            ratio=self.ratio,
            rank=self.rank,
            combine=self.combine,
            patch=self.patch,
            spatial_mask_ratio=self.spatial_mask_ratio,
            channel_mask_ratio=self.channel_mask_ratio,
            use_perception_mask=self.use_perception_mask,
            threshold_pitches=self.threshold_pitches,
            threshold_m_override=self.threshold_m,
        )


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_config_file(path: str) -> dict:
    """Read ``key = value`` lines into RunConfig-typed values."""
    types = {f.name: f.type for f in fields(RunConfig)}
    out: dict = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in types:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = _coerce(key, val, types[key])
    return out


def _coerce(key: str, val: str, ftype) -> object:
    text = str(ftype)
    if "bool" in text:
        if val.lower() not in _BOOL_WORDS:
            raise ValueError(f"{key}: expected a boolean, got {val!r}")
        return _BOOL_WORDS[val.lower()]
    if "int" in text:
        return int(val)
    if "float" in text:
        return float(val)
    return val
