"""Flat ``key = value`` run configuration.

Every recognised key has a typed default below; files and ``-o key=value``
overrides are parsed against it and unknown keys are rejected.  The
``MATRES_SEED`` environment variable overrides ``seed``.
"""

from __future__ import annotations

import os
from dataclasses import fields
from pathlib import Path

from .tta import AdaptConfig


class ConfigError(ValueError):
    pass


_GENERAL = {
    "seed": 7,
    "model_seed": 0,
    "kind": "diffusion",
    "n_pairs": 20,
    "scene": "mixed",
    "size": 64,
    "noise_sigma": 0.1,
    "rotation": 15.0,
    "scale_min": 0.9,
    "scale_max": 1.1,
    "shift": 5.0,
    "perspective": 2e-4,
    "gain_min": 0.85,
    "gain_max": 1.15,
    "bias": 0.05,
    "matcher_steps": 300,
    "matcher_max_noise": 0.03,
    "denoiser_steps": 300,
    "restorer_steps": 2000,
    "control_grid": 5,
    "auc_max_px": 25,
}

DEFAULTS: dict[str, object] = {**_GENERAL, **{f.name: f.default for f in fields(AdaptConfig)}}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return text


def parse_lines(lines, source: str = "<config>") -> dict:
    values = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def resolve(path: str | Path | None = None, overrides=(), env=None) -> dict:
    """Defaults, then the file, then ``key=value`` overrides, then ``MATRES_SEED``."""
    cfg = dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cfg.update(parse_lines(path.read_text(encoding="utf-8").splitlines(), str(path)))
    cfg.update(parse_lines(overrides, "<override>"))
    env = os.environ if env is None else env
    if env.get("MATRES_SEED"):
        cfg["seed"] = _coerce("seed", env["MATRES_SEED"])
    return cfg


def dump(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]!r}\n" if isinstance(cfg[k], float) else f"{k} = {cfg[k]}\n"
                   for k in sorted(cfg))


def adapt_config(cfg: dict) -> AdaptConfig:
    return AdaptConfig(**{f.name: cfg[f.name] for f in fields(AdaptConfig)}).validate()


def corpus_kwargs(cfg: dict) -> dict:
    return {
        "noise_sigma": cfg["noise_sigma"], "rotation": cfg["rotation"],
        "scale": (cfg["scale_min"], cfg["scale_max"]), "shift": cfg["shift"],
        "perspective": cfg["perspective"], "gain": (cfg["gain_min"], cfg["gain_max"]),
        "bias": cfg["bias"], "scene": cfg["scene"], "size": (cfg["size"], cfg["size"]),
    }
