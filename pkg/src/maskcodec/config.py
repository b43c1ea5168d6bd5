"""Flat key=value run configuration, file parsing, and run manifests.

Config files are plain text: one `section.key=value` per line, `#` comments.
Unknown keys are rejected; every key has a default that is echoed into the
run manifest, so a manifest alone reproduces a run bit-exactly.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError

_TRUE = ("true", "1", "yes", "on")
_FALSE = ("false", "0", "no", "off")


@dataclass(frozen=True)
class RunConfig:
    """All tunables of a run, keyed by dotted names (see `key_map`)."""

    data_dir: str = ""
    out_dir: str = "runs/default"

    model_latent_channels: int = 64
    model_widths: str = "32,64"
    model_hyper_channels: int = 32
    model_hyper_widths: str = "48"
    model_kernel: int = 3
    model_seed: int = 0

    gate_keep_ratio: float = 0.75
    gate_learnable: bool = True

    mask_strategy: str = "cube"
    mask_ratio: float = 0.5

    train_loss: str = "mse"
    train_batch_size: int = 8
    train_crop: int = 64
    train_seed: int = 0
    train_weight_decay: float = 0.0
    train_augment: bool = True

    train_pretrain_lambda: float = 0.3
    train_pretrain_epochs: int = 30
    train_pretrain_lr: float = 1e-4
    train_pretrain_milestones: str = "0.3333,0.6667"
    train_pretrain_decay: float = 0.8

    train_finetune_lambda: float = 0.01
    train_finetune_epochs: int = 100
    train_finetune_lr: float = 8e-5
    train_finetune_milestones: str = "0.2,0.4,0.8"
    train_finetune_decay: float = 0.5


def key_map() -> dict:
    """dotted config key -> dataclass field name."""
    out = {}
    for f in fields(RunConfig):
        parts = f.name.split("_")
        out[f"{parts[0]}.{'_'.join(parts[1:])}"] = f.name
    return out


def _coerce(field_name: str, raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{field_name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{field_name}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{field_name}: expected a number, got {raw!r}") from None
    return raw


def parse_kv_text(text: str) -> dict:
    """key=value lines to a dict; blank lines and # comments ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def apply_overrides(cfg: RunConfig, kv: dict) -> RunConfig:
    """Apply dotted-key overrides; unknown keys are an error."""
    mapping = key_map()
    defaults = RunConfig()
    updates = {}
    for key, raw in kv.items():
        if key not in mapping:
            raise ConfigError(f"unknown config key {key!r}")
        fname = mapping[key]
        updates[fname] = _coerce(key, str(raw), getattr(defaults, fname))
    return replace(cfg, **updates)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        cfg = apply_overrides(cfg, parse_kv_text(p.read_text()))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def config_kv(cfg: RunConfig) -> dict:
    """Resolved config echo in dotted-key form, sorted."""
    mapping = key_map()
    return {key: getattr(cfg, fname) for key, fname in sorted(mapping.items())}


def write_manifest(path, cfg: RunConfig, extra: dict | None = None) -> None:
    """Resolved config + versions; enough to reproduce the run bit-exactly."""
    import numpy
    import scipy

    lines = [f"{k}={v}" for k, v in config_kv(cfg).items()]
    lines.append(f"version.maskcodec={_package_version()}")
    lines.append(f"version.numpy={numpy.__version__}")
    lines.append(f"version.scipy={scipy.__version__}")
    lines.append(f"version.python={sys.version_info.major}.{sys.version_info.minor}.{sys.version_info.micro}")
    for k, v in sorted((extra or {}).items()):
        lines.append(f"{k}={v}")
    Path(path).write_text("\n".join(lines) + "\n")


def _package_version() -> str:
    try:
        from importlib.metadata import version
        return version("maskcodec")
    except Exception:
        return "unknown"
