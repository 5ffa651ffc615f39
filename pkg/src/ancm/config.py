"""Plain key = value run configuration.

Keys before any section header belong to ``[run]``.  Other sections
(``[cartpole]`` for physical parameters, ``[sim]`` for the integrator and
disturbance) are optional.  Example::

    scenario = drag
    alpha = 1.0
    gamma = 0.1, 1e-5

    [sim]
    dt = 0.01
    d_sup = 0.15
"""
from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .dynamics import CartPole
from .errors import ConfigError
from .sim import SimConfig


def read_config(path) -> dict:
    text = Path(path).read_text()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return {sec: dict(parser.items(sec)) for sec in parser.sections()}


def _coerce(name, raw: str, default):
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [v.strip() for v in raw.split(",") if v.strip()]
            if default and all(isinstance(v, str) for v in default):
                return tuple(items)
            return tuple(float(v) for v in items)
        if default is None:
            return tuple(int(v) for v in raw.split(",") if v.strip()) if "," in raw else raw
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name!r}: {raw!r}") from exc


def apply(obj, values: dict, section: str = "run", strict: bool = True):
    """Copy of dataclass ``obj`` with fields overridden from string ``values``."""
    fields = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in values.items():
        if key not in fields:
            if strict:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            continue
        changes[key] = _coerce(key, raw, getattr(obj, key))
    try:
        return dataclasses.replace(obj, **changes)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


RUN_ONLY_KEYS = ("scenario", "seed", "out")


def scenario_config(default, sections: dict, seed: int | None = None):
    """Scenario dataclass with [run] and [sim] overrides applied; returns (config, cartpole)."""
    run = {k: v for k, v in sections.get("run", {}).items() if k not in RUN_ONLY_KEYS}
    cfg = apply(default, run, "run")
    sim = apply(cfg.sim, sections.get("sim", {}), "sim")
    if seed is None and "seed" in sections.get("run", {}):
        seed = int(sections["run"]["seed"])
    if seed is not None:
        sim = dataclasses.replace(sim, seed=seed)
    cfg = dataclasses.replace(cfg, sim=sim)
    cp = apply(CartPole(), sections.get("cartpole", {}), "cartpole")
    return cfg, cp


def sim_config(sections: dict) -> SimConfig:
    return apply(SimConfig(), sections.get("sim", {}), "sim")
