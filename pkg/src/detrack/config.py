"""Flat key=value configuration with typed defaults and named presets."""

from __future__ import annotations

import os

ENV_CONFIG = "DETRACK_CONFIG"

# key -> (type, default). bool values parse true/false/1/0/yes/no.
DEFAULTS = {
    "run.seed": (int, 0),
    "noise.T_max": (int, 1000),
    "noise.beta_start": (float, 1e-4),
    "noise.beta_end": (float, 0.02),
    "noise.fixed_t": (bool, False),
    "vocab.bins": (int, 100),
    "vocab.dim": (int, 128),
    "vocab.tied": (bool, True),
    "vit.depth": (int, 4),
    "vit.dim": (int, 128),
    "vit.heads": (int, 4),
    "vit.patch": (int, 16),
    "vit.ffn_ratio": (float, 4.0),
    "vit.noise_pred_mode": (str, "per_block"),
    "vit.template_pos_emb": (bool, True),
    "refiner.layers": (int, 6),
    "refiner.use_template_kv": (bool, False),
    "memory.visual_len": (int, 3),  # total templates including the fixed one
    "memory.traj_len": (int, 7),
    "memory.sigma1": (float, 0.75),
    "memory.sigma2": (float, 0.9),
    "memory.update_mode": (str, "gated"),
    "iounet.hidden": (int, 256),
    "data.dir": (str, ""),
    "data.template_size": (int, 32),
    "data.search_size": (int, 64),
    "data.template_factor": (float, 2.0),
    "data.search_factor": (float, 4.0),
    "data.jitter": (float, 0.1),
    "train.stage1_epochs": (int, 20),
    "train.stage1_decay_epoch": (int, 16),
    "train.stage2_epochs": (int, 5),
    "train.stage3_epochs": (int, 4),
    "train.stage3_decay_epoch": (int, 3),
    "train.lr_vit": (float, 1e-3),
    "train.lr_refiner": (float, 1e-3),
    "train.lr_scorer": (float, 1e-3),
    "train.stage2_lr_factor": (float, 0.05),
    "train.decay_factor": (float, 0.1),
    "train.batch": (int, 16),
    "train.clip_len": (int, 8),
    "train.samples_per_video": (int, 4),
    "train.lambda_ce": (float, 1.0),
    "train.lambda_siou": (float, 1.0),
    "train.lambda_vit_ce": (float, 1.0),
    "train.weight_decay": (float, 1e-4),
    "train.clip_norm": (float, 1.0),
    "train.teacher_forcing": (bool, False),
    "train.stage2_noise_input": (bool, False),
    "train.log_every": (int, 50),
}

# paper-scale model variants; desk-scale training keys are left untouched
PRESETS = {
    "desk": {},
    "detrack256": {
        "vit.depth": 12, "vit.dim": 768, "vit.heads": 12, "vit.patch": 16,
        "vocab.dim": 768, "vocab.bins": 800,
        "data.template_size": 128, "data.search_size": 256,
        "data.template_factor": 2.0, "data.search_factor": 4.0,
        "train.lr_vit": 8e-5, "train.lr_refiner": 8e-6, "train.lr_scorer": 1e-4,
        "train.stage1_epochs": 240, "train.stage1_decay_epoch": 192,
        "train.stage2_epochs": 60, "train.stage3_epochs": 40,
        "train.stage3_decay_epoch": 30,
    },
    "detrack384": {
        "vit.depth": 12, "vit.dim": 768, "vit.heads": 12, "vit.patch": 16,
        "vocab.dim": 768, "vocab.bins": 1200,
        "data.template_size": 192, "data.search_size": 384,
        "data.template_factor": 2.0, "data.search_factor": 5.0,
        "train.lr_vit": 8e-5, "train.lr_refiner": 8e-6, "train.lr_scorer": 1e-4,
        "train.stage1_epochs": 240, "train.stage1_decay_epoch": 192,
        "train.stage2_epochs": 60, "train.stage3_epochs": 40,
        "train.stage3_decay_epoch": 30,
    },
}

_BOOL_TRUE = ("1", "true", "yes", "on")
_BOOL_FALSE = ("0", "false", "no", "off")


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str):
    typ, _ = DEFAULTS[key]
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"key {key}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"key {key}: expected {typ.__name__}, got {raw!r}") from None


def default_config() -> dict:
    return {k: v for k, (_, v) in DEFAULTS.items()}


def apply_preset(cfg: dict, name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg.update(PRESETS[name])
    return cfg


def _apply_line(cfg: dict, line: str, where: str):
    if "=" not in line:
        raise ConfigError(f"{where}: expected KEY=VALUE, got {line!r}")
    key, raw = line.split("=", 1)
    key = key.strip()
    if key not in DEFAULTS:
        raise ConfigError(f"{where}: unknown key {key!r}")
    cfg[key] = _parse_value(key, raw)


def apply_overrides(cfg: dict, items: list, validate: bool = True) -> dict:
    for item in items or []:
        _apply_line(cfg, item, "override")
    if validate:
        validate_config(cfg)
    return cfg


def parse_config(path: str | None = None, overrides: list | None = None,
                 preset: str | None = None, use_env: bool = True) -> dict:
    """Merge defaults < preset < config file < command-line overrides."""
    cfg = default_config()
    if preset:
        apply_preset(cfg, preset)
    if path is None and use_env:
        path = os.environ.get(ENV_CONFIG) or None
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                _apply_line(cfg, line, f"{path}:{lineno}")
    for item in overrides or []:
        _apply_line(cfg, item, "override")
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    for key, value in cfg.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        typ, _ = DEFAULTS[key]
        if typ is float and isinstance(value, int) and not isinstance(value, bool):
            cfg[key] = float(value)
        elif not isinstance(value, typ) or (typ is int and isinstance(value, bool)):
            raise ConfigError(f"key {key}: expected {typ.__name__}")
    if cfg["vit.noise_pred_mode"] not in ("per_block", "total"):
        raise ConfigError("key vit.noise_pred_mode: must be per_block or total")
    if cfg["memory.update_mode"] not in ("gated", "direct"):
        raise ConfigError("key memory.update_mode: must be gated or direct")
    if cfg["vocab.dim"] != cfg["vit.dim"]:
        raise ConfigError("key vocab.dim: must equal vit.dim")
    if not 1 <= cfg["refiner.layers"] <= 6:
        raise ConfigError("key refiner.layers: must be in [1, 6]")
    if cfg["memory.visual_len"] < 1:
        raise ConfigError("key memory.visual_len: must be >= 1")
    if not 1 <= cfg["memory.traj_len"] <= 7:
        raise ConfigError("key memory.traj_len: must be in [1, 7]")
    for stage in ("stage1", "stage3"):
        epochs = cfg[f"train.{stage}_epochs"]
        decay = cfg[f"train.{stage}_decay_epoch"]
        if epochs < 1:
            raise ConfigError(f"key train.{stage}_epochs: must be >= 1")
        if not 1 <= decay <= epochs:
            raise ConfigError(f"key train.{stage}_decay_epoch: must be in [1, epochs]")


def render_config(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
