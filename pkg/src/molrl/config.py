"""Run configuration: JSON document, schema-validated, unknown keys rejected.

Every command writes the fully resolved configuration next to its outputs so
a run can be reproduced from that file alone.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

SCHEMA_VERSION = 1

# section -> key -> (type, default); None default means required
_SCHEMA = {
    "dataset": {
        "dir": (str, None),
        "ratios": (list, [0.8, 0.1, 0.1]),
    },
    "schedule": {
        "T": (int, 50),
        "s": (float, 1e-5),
    },
    "denoiser": {
        "layers": (int, 3),
        "hidden": (int, 64),
    },
    "pretrain": {
        "steps": (int, 2000),
        "batch_size": (int, 32),
        "learning_rate": (float, 1e-4),
        "checkpoint_every": (int, 1000),
    },
    "ppo": {
        "clip_eps": (float, 3e-4),
        "learning_rate": (float, 1e-5),
        "reuse": (int, 3),
        "n_samples": (int, 128),
        "k_timesteps": (int, 8),
        "episodes": (int, 30),
        "grad_accum_batches": (int, 4),
    },
    "reward": {
        "b_valid": (float, 0.2),
        "b_unique": (float, 0.35),
        "b_novel": (float, 0.05),
        "lambda0": (float, 0.1),
        "decay_rate": (float, 0.05),
        "cutoff_mode": (str, "dynamic"),
        "ema_momentum": (float, 0.9),
        "bonus_enabled": (bool, True),
        "diversity_enabled": (bool, True),
    },
    "oracle": {
        "kind": (str, "synthetic"),
        "aleatoric_var": (dict, {}),
        "epistemic_coeff": (float, 0.1),
        "table_path": (str, ""),
    },
    "sample": {
        "n": (int, 64),
    },
}

_DEFAULT_OBJECTIVES = [
    {"name": "pseudo_qed", "direction": 1, "cutoff": 0.4},
    {"name": "pseudo_sas", "direction": -1, "cutoff": 8.0},
    {"name": "pseudo_affinity", "direction": -1, "cutoff": -4.5},
]


@dataclass
class RunConfig:
    raw: dict

    def __getitem__(self, key):
        return self.raw[key]

    def section(self, name) -> dict:
        return self.raw[name]

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def out_dir(self) -> str:
        return self.raw["out_dir"]

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"


def _coerce(value, expected, where):
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, bool):
        raise ConfigError(f"{where}: expected {expected.__name__}, got bool")
    if not isinstance(value, expected):
        raise ConfigError(f"{where}: expected {expected.__name__}, got {type(value).__name__}")
    return value


def validate_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    known_top = {"schema_version", "seed", "out_dir", "objectives", *_SCHEMA}
    for key in doc:
        if key not in known_top:
            raise ConfigError(f"unknown config key {key!r}")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    resolved = {"schema_version": SCHEMA_VERSION}
    resolved["seed"] = _coerce(doc.get("seed", 0), int, "seed")
    if "out_dir" not in doc or not doc["out_dir"]:
        raise ConfigError("out_dir is required")
    resolved["out_dir"] = _coerce(doc["out_dir"], str, "out_dir")
    for section, keys in _SCHEMA.items():
        given = doc.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"{section}: expected an object")
        for key in given:
            if key not in keys:
                raise ConfigError(f"unknown config key {section}.{key!r}")
        out = {}
        for key, (expected, default) in keys.items():
            if key in given:
                out[key] = _coerce(given[key], expected, f"{section}.{key}")
            elif default is None:
                raise ConfigError(f"{section}.{key} is required")
            else:
                out[key] = default
        resolved[section] = out
    objectives = doc.get("objectives", _DEFAULT_OBJECTIVES)
    if not isinstance(objectives, list) or not objectives:
        raise ConfigError("objectives must be a nonempty list")
    cleaned = []
    for i, obj in enumerate(objectives):
        if not isinstance(obj, dict) or set(obj) != {"name", "direction", "cutoff"}:
            raise ConfigError(f"objectives[{i}] must have exactly name/direction/cutoff")
        cleaned.append({
            "name": _coerce(obj["name"], str, f"objectives[{i}].name"),
            "direction": _coerce(obj["direction"], int, f"objectives[{i}].direction"),
            "cutoff": _coerce(obj["cutoff"], float, f"objectives[{i}].cutoff"),
        })
    resolved["objectives"] = cleaned
    ratios = resolved["dataset"]["ratios"]
    if len(ratios) != 3 or any(not isinstance(r, (int, float)) for r in ratios):
        raise ConfigError("dataset.ratios must be three numbers")
    if resolved["oracle"]["kind"] not in ("synthetic", "table"):
        raise ConfigError(f"oracle.kind must be synthetic or table, got {resolved['oracle']['kind']!r}")
    if resolved["oracle"]["kind"] == "table" and not resolved["oracle"]["table_path"]:
        raise ConfigError("oracle.table_path is required for the table oracle")
    return RunConfig(resolved)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if overrides:
        for key, value in overrides.items():
            if value is not None:
                doc[key] = value
    return validate_config(doc)


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """Named deterministic RNG stream derived from the root seed."""
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])))
