"""Flat ``key = value`` run configuration files.

Unknown keys are errors. The full key list is documented in the README;
every key has a default, so an empty (or absent) config is a valid toy run.
"""

from __future__ import annotations

from dataclasses import dataclass

from .data import SceneConfig
from .errors import ConfigError
from .model import ModelConfig
from .optim import OptimConfig


@dataclass
class RunSettings:
    seed: int = 0
    train_count: int = 200
    val_count: int = 50
    nsd_tol: float = 1.0
    early_stop_dsc: float | None = None
    fixed_timing: bool = False
    precision: str = "f64"


def _parse_bool(v: str) -> bool:
    lv = v.strip().lower()
    if lv in ("true", "1", "yes", "on"):
        return True
    if lv in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"bad boolean value {v!r}")


def parse_schedule(v: str) -> tuple:
    """'8,4,4' -> (8,4,4); '20x28x24,10x14x12' -> ((20,28,24),(10,14,12))."""
    out = []
    for part in str(v).split(","):
        part = part.strip()
        if not part:
            continue
        if "x" in part:
            out.append(tuple(int(p) for p in part.split("x")))
        else:
            out.append(int(part))
    if not out:
        raise ConfigError(f"empty kernel schedule {v!r}")
    return tuple(out)


def _parse_floats(v: str) -> tuple:
    return tuple(float(p) for p in str(v).split(",") if p.strip())


# key -> (section, field, parser); section "both" feeds model and scene
_SCHEMA = {
    "size": ("scene", "size", int),
    "classes": ("both", "num_classes", int),
    "blobs_min": ("scene", "_blobs_min", int),
    "blobs_max": ("scene", "_blobs_max", int),
    "radius_min": ("scene", "_radius_min", int),
    "radius_max": ("scene", "_radius_max", int),
    "noise_level": ("scene", "noise_level", float),
    "intensity_means": ("scene", "intensity_means", _parse_floats),
    "intensity_vars": ("scene", "intensity_vars", _parse_floats),
    "stages": ("model", "stages", int),
    "stem_channels": ("model", "stem_channels", int),
    "kernel_schedule": ("model", "kernel_schedule", parse_schedule),
    "state_dim": ("model", "state_dim", int),
    "rank": ("model", "rank", int),
    "use_pim": ("model", "use_pim", _parse_bool),
    "use_pam": ("model", "use_pam", _parse_bool),
    "use_bim": ("model", "use_bim", _parse_bool),
    "lr": ("optim", "lr", float),
    "weight_decay": ("optim", "weight_decay", float),
    "beta1": ("optim", "beta1", float),
    "beta2": ("optim", "beta2", float),
    "eps": ("optim", "eps", float),
    "epochs": ("optim", "epochs", int),
    "batch_size": ("optim", "batch_size", int),
    "seed": ("run", "seed", int),
    "train_count": ("run", "train_count", int),
    "val_count": ("run", "val_count", int),
    "nsd_tol": ("run", "nsd_tol", float),
    "early_stop_dsc": ("run", "early_stop_dsc", float),
    "fixed_timing": ("run", "fixed_timing", _parse_bool),
    "precision": ("run", "precision", str),
}

CONFIG_KEYS = sorted(_SCHEMA)


def read_config_file(path) -> dict:
    """Parse a flat key = value file into {key: raw string}."""
    raw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (p.strip() for p in line.split("=", 1))
            if key not in _SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            if key in raw:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            raw[key] = value
    return raw


def build_configs(raw: dict):
    """Raw key/value strings -> (ModelConfig, SceneConfig, OptimConfig, RunSettings)."""
    sections = {"model": {}, "scene": {}, "optim": {}, "run": {}}
    for key, value in raw.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        section, fieldname, parser = _SCHEMA[key]
        try:
            parsed = parser(value) if isinstance(value, str) else value
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from e
        if section == "both":
            sections["model"][fieldname] = parsed
            sections["scene"][fieldname] = parsed
        else:
            sections[section][fieldname] = parsed

    sc = sections["scene"]
    blobs = (sc.pop("_blobs_min", 1), sc.pop("_blobs_max", 3))
    radius = (sc.pop("_radius_min", 4), sc.pop("_radius_max", 10))
    scene = SceneConfig(blobs_per_class=blobs, radius_range=radius, **sc)
    model = ModelConfig(**sections["model"])
    try:
        optim = OptimConfig(**sections["optim"])
    except ValueError as e:
        raise ConfigError(str(e)) from e
    run = RunSettings(**sections["run"])
    if run.precision not in ("f32", "f64"):
        raise ConfigError(f"precision must be f32 or f64, got {run.precision!r}")
    scene.seed = run.seed
    return model, scene, optim, run
