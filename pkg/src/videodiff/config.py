"""Run configuration: plain-text `key = value` files, canonical form, and
a stable 64-bit FNV-1a hash used to match checkpoints against configs."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data / geometry
    height: int = 32
    width: int = 32
    past_frames: int = 2
    future_frames: int = 4
    clip_frames: int = 16
    # codec
    codec_mode: str = "identity"          # identity | learned
    downsample_factor: int = 4
    latent_channels: int = 4
    codec_train_steps: int = 2000
    codec_lr: float = 2e-3
    # model
    embed_dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    backbone_widths: tuple[int, ...] = (64, 128, 128)
    time_embed_dim: int = 64
    # diffusion
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    n_train_sigmas: int = 50
    n_sample_steps: int = 35
    sigma_dist: str = "karras-grid"       # karras-grid | log-uniform
    loss_weight_rule: str = "edm"         # edm | uniform
    canonical_edm_cin: bool = False
    # training
    p_self_cond: float = 0.9
    lr: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 4
    train_steps: int = 20000
    checkpoint_every: int = 500
    seed: int = 0
    # evaluation
    n_trajectories: int = 10

    def __post_init__(self):
        if not 0.0 <= self.p_self_cond <= 1.0:
            raise ConfigError(f"p_self_cond must be in [0,1], got {self.p_self_cond}")
        if self.codec_mode not in ("identity", "learned"):
            raise ConfigError(f"unknown codec_mode {self.codec_mode!r}")
        if self.sigma_dist not in ("karras-grid", "log-uniform"):
            raise ConfigError(f"unknown sigma_dist {self.sigma_dist!r}")
        if self.loss_weight_rule not in ("edm", "uniform"):
            raise ConfigError(f"unknown loss_weight_rule {self.loss_weight_rule!r}")
        if self.past_frames < 1:
            raise ConfigError("past_frames must be >= 1")
        if self.sigma_min <= 0 or self.sigma_max <= self.sigma_min:
            raise ConfigError("need 0 < sigma_min < sigma_max")
        self.backbone_widths = tuple(self.backbone_widths)

    # -- text form ----------------------------------------------------------

    def canonical_text(self) -> str:
        """Sorted `key = value` lines; key-order independent, hash-stable."""
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {_format_value(value)}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> int:
        return fnv1a64(self.canonical_text().encode("utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.canonical_text())

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(field: dataclasses.Field, raw: str):
    if field.type == "bool" or isinstance(field.default, bool):
        if raw not in ("true", "false"):
            raise ConfigError(f"{field.name}: expected true/false, got {raw!r}")
        return raw == "true"
    default = field.default
    if isinstance(default, tuple) or field.name == "backbone_widths":
        return tuple(int(v) for v in raw.split(","))
    if isinstance(default, int) and not isinstance(default, bool):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_text(text: str) -> RunConfig:
    """Parse `key = value` lines, `#` comments allowed; unknown keys rejected."""
    known = {f.name: f for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(known[key], raw)
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text())


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h
