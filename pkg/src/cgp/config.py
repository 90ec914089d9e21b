"""Flat key=value experiment configuration.

Precedence: command-line flags > config file > defaults. Unknown keys are
rejected, every value is range-checked on resolve, and the fully resolved
configuration is written next to the outputs so a run directory is
self-describing.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .cnn import CnnConfig
from .errors import ConfigError
from .objectives import OBJECTIVES
from .train import CgpHyper
from .vit import ViTConfig


@dataclass
class ExperimentConfig:
    dataset: str = ""
    out_dir: str = "runs"
    objective: str = "erm"
    cgp: bool = True
    seeds: tuple[int, ...] = (0,)
    # perturbation / loss weights
    sigma_noise: float = 0.5
    tau: float = 0.75
    steepness: float = 8.0
    lambda_vit: float = 0.1
    # optimization
    stage1_epochs: int = 20
    stage2_epochs: int = 5
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    # architectures
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    conv_channels: tuple[int, ...] = (16, 32)
    num_classes: int = 2
    # objective hyperparameters
    irm_weight: float = 100.0
    irm_anneal_epochs: int = 5
    vrex_weight: float = 10.0
    groupdro_eta: float = 0.01

    def hyper(self, seed: int) -> CgpHyper:
        return CgpHyper(sigma_noise=self.sigma_noise, tau=self.tau, steepness=self.steepness,
                        lambda_vit=self.lambda_vit, stage1_epochs=self.stage1_epochs,
                        stage2_epochs=self.stage2_epochs, learning_rate=self.learning_rate,
                        momentum=self.momentum, batch_size=self.batch_size, seed=seed)

    def vit_config(self) -> ViTConfig:
        return ViTConfig(image_size=self.image_size, patch_size=self.patch_size,
                         embed_dim=self.embed_dim, depth=self.depth, heads=self.heads,
                         mlp_ratio=self.mlp_ratio, num_classes=self.num_classes)

    def cnn_config(self) -> CnnConfig:
        return CnnConfig(channels=self.conv_channels, num_classes=self.num_classes,
                         image_size=self.image_size)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() in ("on", "true", "1", "yes"):
                return True
            if raw.lower() in ("off", "false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("tuple"):
            if not raw:
                return ()
            return tuple(int(v) for v in raw.split(","))
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {e}") from e


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines; '#' starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def resolve(file_values: dict | None = None, flag_values: dict | None = None) -> ExperimentConfig:
    """Merge defaults, file values, and flag overrides; validate everything."""
    merged: dict = {}
    for source in (file_values or {}), (flag_values or {}):
        for key, value in source.items():
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown configuration key {key!r}")
            if value is not None:
                merged[key] = value
    cfg = ExperimentConfig(**merged)
    if cfg.objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {cfg.objective!r}; choose from {OBJECTIVES}")
    if not cfg.seeds:
        raise ConfigError("at least one seed is required")
    cfg.hyper(cfg.seeds[0])  # range checks
    cfg.vit_config()
    cfg.cnn_config()
    return cfg


def canonical_text(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "on" if value else "off"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def fingerprint(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()[:16]


def write_resolved(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(canonical_text(cfg))


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config_text(text)
