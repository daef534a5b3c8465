"""Run configuration: defaults, JSON file loading, dotted-key overrides,
deterministic seed derivation, and a content hash for reproducibility
stamps.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

__all__ = [
    "ConfigError",
    "default_config",
    "load_config",
    "apply_overrides",
    "config_hash",
    "spawn_seeds",
]


class ConfigError(ValueError):
    """Malformed configuration file or override."""


def default_config() -> dict:
    """Full default run configuration as a plain nested dict."""
    return {
        "seed": 0,
        "platform": "pendulum",
        "controller": "learning",
        "duration": 10.0,
        "trajectory": "default",
        "noise": {"angle_std": 1e-3, "rate_std": 1e-2, "accel_std": 5e-2},
        "collect": {
            "n_samples": 800,
            "excitation": {"a1": 3.0, "a2": 1.5, "omega1": 8.0, "omega2": 40.0},
        },
        "train": {"optimize_iters": 40, "hyper_subsample": 300},
        "mpc": {
            "horizon": 27,
            "dt": 0.02,
            "nu": 1.0,
            "r_w": 10.0,
            "r_uf": 10.0,
            "max_iters": 1,
            "step_size": 5e-4,
        },
        # epsilon None selects the platform default (0.1 pendulum, 0.5 bikebot)
        "stabilizer": {"k_p": 25.0, "k_d": 12.0, "epsilon": None},
        "sweep": {
            "axis": "training_size",
            "sizes": [200, 400, 600, 800],
            "nus": [0.0, 10.0, 40.0, 60.0],
            "seeds": [0, 1, 2],
            "duration": 8.0,
        },
    }


def _merge(base: dict, extra: dict, path: str = "") -> dict:
    out = dict(base)
    for key, val in extra.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown configuration key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"expected a table for key: {here}")
            out[key] = _merge(base[key], val, here)
        else:
            out[key] = val
    return out


def load_config(path=None) -> dict:
    """Defaults merged with an optional JSON config file."""
    cfg = default_config()
    if path is None:
        return cfg
    try:
        with open(path) as fh:
            user = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"invalid JSON in {path}: {err}") from err
    if not isinstance(user, dict):
        raise ConfigError("configuration root must be a JSON object")
    return _merge(cfg, user)


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``key.path=value`` strings; values parse as JSON when possible."""
    out = json.loads(json.dumps(cfg))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must look like key=value: {item!r}")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown configuration key: {key}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown configuration key: {key}")
        if isinstance(node[parts[-1]], dict):
            raise ConfigError(f"cannot assign a scalar to table: {key}")
        node[parts[-1]] = value
    return out


def config_hash(cfg: dict) -> str:
    """Stable short hash of the configuration content."""
    payload = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def spawn_seeds(root_seed: int, n: int) -> list:
    """Independent child seeds derived deterministically from the root."""
    seq = np.random.SeedSequence(root_seed)
    return [int(child.generate_state(1)[0]) for child in seq.spawn(n)]
