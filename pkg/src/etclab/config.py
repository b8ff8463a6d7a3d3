"""Plain key = value config files and their mapping onto run objects.

The format is deliberately small: one `key = value` pair per line, `#`
comments, blank lines ignored. Values are coerced to int, float, bool, or a
comma-separated tuple thereof; anything else stays a string.
"""

from __future__ import annotations

import os

import numpy as np

from .envsim import InitDistribution, Pendulum, PendulumParams
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def parse_value(text: str):
    text = text.strip()
    if "," in text:
        return tuple(parse_value(part) for part in text.split(","))
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config(path: str) -> dict:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, val = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            out[key] = parse_value(val)
    return out


def apply_overrides(cfg: dict, overrides) -> dict:
    """Merge KEY=VALUE strings (e.g. from the command line) into cfg."""
    merged = dict(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, val = item.split("=", 1)
        merged[key.strip()] = parse_value(val)
    return merged


_PLANT_KEYS = {
    "gravity": "gravity", "mass": "mass", "length": "length", "dt": "dt",
    "max_torque": "max_torque", "max_speed": "max_speed",
    "ctrl_weight": "ctrl_weight",
}


def pendulum_from_config(cfg: dict) -> Pendulum:
    params = PendulumParams(**{
        field: float(cfg[key])
        for key, field in _PLANT_KEYS.items() if key in cfg
    })
    init = InitDistribution()
    if "init_theta" in cfg:
        r = float(cfg["init_theta"])
        init.theta_range = (-r, r)
    if "init_theta_dot" in cfg:
        r = float(cfg["init_theta_dot"])
        init.theta_dot_range = (-r, r)
    return Pendulum(
        params=params,
        init=init,
        noise_std=float(cfg.get("noise_std", 0.0)),
        horizon=int(cfg.get("horizon", 200)),
    )


def train_config_from(cfg: dict) -> TrainConfig:
    defaults = TrainConfig()
    kwargs = {}
    for name in vars(defaults):
        if name in cfg:
            current = getattr(defaults, name)
            val = cfg[name]
            if isinstance(current, tuple) and not isinstance(val, tuple):
                val = (val,)
            if isinstance(current, tuple):
                val = tuple(int(v) for v in val)
            elif isinstance(current, int) and not isinstance(current, bool):
                val = int(val)
            elif isinstance(current, float):
                val = float(val)
            kwargs[name] = val
    try:
        return TrainConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def box_from_config(cfg: dict, prefix: str = "m_"):
    """Target-region box from `<prefix>theta_deg` / `<prefix>theta_dot_deg`."""
    from .verifier import BoxRegion
    theta = np.deg2rad(float(cfg.get(prefix + "theta_deg", 2.5)))
    theta_dot = np.deg2rad(float(cfg.get(prefix + "theta_dot_deg", 5.0)))
    return BoxRegion(np.array([-theta, -theta_dot]),
                     np.array([theta, theta_dot]))


def resolved_dict(obj) -> dict:
    """Dataclass-ish object to a JSON-friendly dict of its fields."""
    out = {}
    for key, val in vars(obj).items():
        if isinstance(val, np.ndarray):
            out[key] = val.tolist()
        elif isinstance(val, tuple):
            out[key] = list(val)
        else:
            out[key] = val
    return out
