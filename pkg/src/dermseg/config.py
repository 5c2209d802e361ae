"""Flat ``module.key=value`` configuration."""

from __future__ import annotations

import os
from pathlib import Path

from .fuzzyclust import ClusterConfig

DEFAULTS = {
    "fcm.c": 5,
    "fcm.m": 2.0,
    "fcm.tol": 1e-4,
    "fcm.max_iter": 100,
    "kmeans.k": 2,
    "hair.radius": 7,
    "hair.thresh": 0.04,
    "hair.enabled": True,
    "border.lum_thresh": 0.1,
    "color.target": 250,
    "color.fwhm": 125.0,
    "unet.depth": 4,
    "unet.base_features": 16,
    "unet.dropout_p": 0.5,
    "train.lr": 0.0002,
    "train.augment": True,
    "train.checkpoint_every": 0,
    "eval.train_frac": 0.9,
    "eval.holdout_frac": 0.1,
    "eval.threshold_mode": "train-holdout",
}

THRESHOLD_MODES = ("train-holdout", "test")
ENV_VAR = "DERMSEG_CONFIG"


class ConfigError(ValueError):
    pass


def _coerce(key, raw):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return str(raw).strip()


def parse_lines(text, source="<config>"):
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = val
    return out


def resolve(path=None, overrides=()):
    """Defaults, then the config file (or $DERMSEG_CONFIG), then ``key=value`` overrides."""
    raw = {}
    path = path or os.environ.get(ENV_VAR)
    if path:
        try:
            raw.update(parse_lines(Path(path).read_text(encoding="utf-8"), str(path)))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for item in overrides:
        raw.update(parse_lines(item, "--set"))
    cfg = dict(DEFAULTS)
    for key, val in raw.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, val)
    if cfg["eval.threshold_mode"] not in THRESHOLD_MODES:
        raise ConfigError(f"eval.threshold_mode must be one of {THRESHOLD_MODES}")
    return cfg


def cluster_config(cfg, seed=0) -> ClusterConfig:
    return ClusterConfig(
        fcm_c=cfg["fcm.c"], fcm_m=cfg["fcm.m"], fcm_tol=cfg["fcm.tol"],
        fcm_max_iter=cfg["fcm.max_iter"], kmeans_k=cfg["kmeans.k"],
        hair_radius=cfg["hair.radius"], hair_thresh=cfg["hair.thresh"],
        remove_hair=cfg["hair.enabled"], border_lum_thresh=cfg["border.lum_thresh"],
        content_size=cfg["color.target"], seed=seed)


def format_config(cfg):
    return [f"{k}={cfg[k]!r}" if isinstance(cfg[k], float) else f"{k}={cfg[k]}" for k in sorted(cfg)]
