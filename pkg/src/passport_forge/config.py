"""Flat key=value experiment configuration with CLI overrides.

The config file is line-oriented ``key = value`` text with ``#`` comments.
Unknown keys are rejected; every run records the fully resolved config and
its hash so reports are reproducible from run directories alone.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    """Unknown key or unparsable value in an experiment config."""


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "mnist"
    data_dir: str = ""
    out_dir: str = "runs"
    # model
    arch: str = "toy_alexnet"
    num_classes: int = 10
    passport_sites: str = "first2"
    # seeding
    seed: int = 0
    seeds: tuple[int, ...] = (0,)
    # embedding (baseline + protected + watermark training)
    alpha: float = 0.1
    margin: float = 0.1
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 6
    batch_size: int = 64
    # attack
    attack_block: str = "cerb"
    attack_activation: str = "leaky_relu"
    attack_depth: int = 2
    attack_fraction: float = 0.1
    attack_epochs: int = 30
    attack_lr: float = 0.05
    attack_batch_size: int = 32
    num_blocks: int = -1  # -1 substitutes a block at every passport site
    # verification and attack-success bands
    verify_acc_threshold: float = 0.5
    epsilon: float = 0.05
    delta_bdr: float = 0.2
    # sign-flip sweep
    flip_counts: tuple[int, ...] = ()
    sweep_epochs: int = 3
    sweep_lr: float = 0.02
    # watermark baseline
    wm_bits: int = 64
    wm_layer: int = 2
    wm_lambda: float = 1.0
    wm_attack_lambda: float = 5.0

    def hash(self) -> str:
        payload = "\n".join(f"{k}={v}" for k, v in sorted(self.as_dict().items()))
        return hashlib.sha256(payload.encode()).hexdigest()[:12]

    def as_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            out[f.name] = value
        return out


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    field = _FIELDS[name]
    raw = raw.strip()
    if field.type in ("int",):
        return int(raw)
    if field.type in ("float",):
        return float(raw)
    if field.type.startswith("tuple"):
        if not raw:
            return ()
        return tuple(int(tok) for tok in raw.split(",") if tok.strip() != "")
    return raw


def parse_config_text(text: str) -> dict:
    """Parse key=value lines (with # comments) into raw string values."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{line.strip()}'")
        key, _, value = body.partition("=")
        key = key.strip()
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        values[key] = value.strip()
    return values


def resolve_config(file_path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Merge a config file with override values; unknown keys are rejected."""
    merged: dict = {}
    if file_path is not None:
        merged.update(parse_config_text(Path(file_path).read_text()))
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    kwargs = {}
    for key, raw in merged.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key '{key}'")
        try:
            kwargs[key] = _coerce(key, raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"bad value for '{key}': {raw!r}") from exc
    return ExperimentConfig(**kwargs)


def write_resolved(config: ExperimentConfig, path) -> None:
    lines = [f"{k} = {v}" for k, v in sorted(config.as_dict().items())]
    lines.append(f"# config_hash = {config.hash()}")
    Path(path).write_text("\n".join(lines) + "\n")
