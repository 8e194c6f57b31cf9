"""YAML experiment configuration.

Sections mirror the modules that own the settings::

    mbrl_loop:   mode, n_trial, l_step, seed, dt, hyper_schedule
    safe_limits: ln_alpha_s, ln_alpha_t, beta_s, gamma_t, u_min, u_max
    pmpc:        horizon, population, elites, iterations, seed, k_s, k_o
    lgm:         num_features, noise_var, signal_var, lengthscale, grid
    sim_env:     any ArmConfig field

Absent fields take the library defaults, so a file holding only
``mbrl_loop: {mode: safe}`` is the reference setting.  ``mbrl_loop.mode`` is
the one required field (the CLI may supply it instead).  ``null`` for a
log-alpha disables that mechanism.
"""

from __future__ import annotations

import math
from dataclasses import fields, replace
from typing import Any

import yaml

from .lgm import GridSpec
from .mbrl_loop import ExperimentConfig, Mode, ModelConfig
from .pmpc import SolverConfig
from .sim_env import ArmConfig

REQUIRED = ("mbrl_loop.mode",)


class ConfigError(ValueError):
    """Bad configuration; carries the dotted field name and source line if known."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


# keys accepted in each section
_EXP_KEYS = {"mode", "n_trial", "l_step", "seed"}
_SAFETY_KEYS = {"ln_alpha_s", "ln_alpha_t", "beta_s", "gamma_t", "u_min", "u_max"}
_SOLVER_KEYS = {f.name for f in fields(SolverConfig)} - {"dt"}
_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"grid", "hyper_schedule"}
_GRID_KEYS = {f.name for f in fields(GridSpec)} - {"num_features", "seed", "initial_lengthscales"}
_ARM_KEYS = {f.name for f in fields(ArmConfig)} - {"dt"}

SECTIONS = {
    "mbrl_loop": _EXP_KEYS | {"dt", "hyper_schedule"},
    "safe_limits": _SAFETY_KEYS,
    "pmpc": _SOLVER_KEYS | {"k_s", "k_o"},
    "lgm": _MODEL_KEYS | {"grid"},
    "sim_env": _ARM_KEYS,
}


def _line_map(text: str) -> dict[str, int]:
    """Dotted key path -> 1-based line number, from the YAML node tree."""
    out: dict[str, int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                out[path] = k.start_mark.line + 1
                walk(v, path)

    if root is not None:
        walk(root, "")
    return out


def _coerce(value, default, path: str, lines: dict[str, int]):
    """Convert a YAML scalar/list to the type of ``default``."""
    line = lines.get(path)
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise TypeError
            return value
        if isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError
            v = float(value)
            if not math.isfinite(v):
                raise ConfigError("must be finite", path, line)
            return v
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise TypeError
            proto = default[0] if default else 0.0
            return tuple(_coerce(v, proto, path, lines) for v in value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise TypeError
            return value
    except TypeError:
        kind = type(default).__name__
        raise ConfigError(f"expected {kind}, got {value!r}", path, line) from None
    return value


def _section(data: dict, name: str, lines) -> dict:
    sec = data.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError("section must be a mapping", name, lines.get(name))
    unknown = set(sec) - SECTIONS[name]
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError("unknown field", f"{name}.{key}", lines.get(f"{name}.{key}"))
    return sec


def _apply(obj, values: dict, prefix: str, lines):
    changes = {}
    defaults = {f.name: getattr(obj, f.name) for f in fields(obj)}
    for key, value in values.items():
        changes[key] = _coerce(value, defaults[key], f"{prefix}.{key}", lines)
    try:
        return replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        key = next(iter(values), None)
        raise ConfigError(str(exc), f"{prefix}.{key}" if key else prefix, lines.get(prefix)) from None


def from_dict(data: dict | None, mode: str | None = None, lines: dict[str, int] | None = None) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig`; ``mode`` overrides ``mbrl_loop.mode``."""
    lines = lines or {}
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping")
    unknown = set(data) - set(SECTIONS)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError("unknown section", key, lines.get(key))
    loop = _section(data, "mbrl_loop", lines)
    safety = _section(data, "safe_limits", lines)
    pm = _section(data, "pmpc", lines)
    lg = _section(data, "lgm", lines)
    arm_sec = _section(data, "sim_env", lines)

    mode = mode if mode is not None else loop.get("mode")
    if mode is None:
        raise ConfigError("required field missing", REQUIRED[0], lines.get("mbrl_loop"))
    try:
        mode = Mode.parse(str(mode))
    except ValueError:
        raise ConfigError(f"unknown mode {mode!r}", "mbrl_loop.mode", lines.get("mbrl_loop.mode")) from None

    base = ExperimentConfig(mode=mode)
    dt = _coerce(loop["dt"], 0.1, "mbrl_loop.dt", lines) if "dt" in loop else base.solver.dt
    if dt <= 0:
        raise ConfigError("must be positive", "mbrl_loop.dt", lines.get("mbrl_loop.dt"))

    solver = _apply(replace(base.solver, dt=dt), {k: v for k, v in pm.items() if k in _SOLVER_KEYS}, "pmpc", lines)
    grid_values = lg.get("grid") or {}
    if not isinstance(grid_values, dict) or set(grid_values) - _GRID_KEYS:
        bad = sorted(set(grid_values) - _GRID_KEYS)[0] if isinstance(grid_values, dict) else ""
        raise ConfigError("unknown field", f"lgm.grid.{bad}".rstrip("."), lines.get(f"lgm.grid.{bad}"))
    grid = _apply(base.model.grid, grid_values, "lgm.grid", lines)
    model_vals = {k: v for k, v in lg.items() if k in _MODEL_KEYS}
    if "hyper_schedule" in loop:
        model_vals["hyper_schedule"] = loop["hyper_schedule"]
        if loop["hyper_schedule"] not in ("doubling", "every", "never"):
            raise ConfigError("expected doubling, every or never", "mbrl_loop.hyper_schedule",
                              lines.get("mbrl_loop.hyper_schedule"))
    model = _apply(replace(base.model, grid=grid), model_vals, "lgm", lines)
    arm = _apply(replace(base.arm, dt=dt), arm_sec, "sim_env", lines)

    top: dict[str, Any] = {}
    for key in ("n_trial", "l_step", "seed"):
        if key in loop:
            top[key] = _coerce(loop[key], getattr(base, key), f"mbrl_loop.{key}", lines)
    for key in ("k_s", "k_o"):
        if key in pm:
            top[key] = _coerce(pm[key], getattr(base, key), f"pmpc.{key}", lines)
    for key in _SAFETY_KEYS:
        if key not in safety:
            continue
        value = safety[key]
        if key.startswith("ln_alpha") and value is None:
            top[key] = None
        else:
            top[key] = _coerce(value, 0.0 if key.startswith("ln_alpha") else getattr(base, key),
                               f"safe_limits.{key}", lines)
    try:
        cfg = replace(base, solver=solver, model=model, arm=arm, **top)
        cfg.safety()
    except ValueError as exc:
        msg = str(exc)
        given = [f"{name}.{key}" for name, sec in (("safe_limits", safety), ("mbrl_loop", loop)) for key in sec]
        path = next((p for p in given if p.split(".")[-1].split("_base")[0] in msg), None)
        raise ConfigError(msg, path, lines.get(path)) from None
    return cfg


def loads(text: str, mode: str | None = None) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                          line=mark.line + 1 if mark else None) from None
    return from_dict(data, mode, _line_map(text))


def load(path, mode: str | None = None) -> ExperimentConfig:
    with open(path) as fh:
        return loads(fh.read(), mode)


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, float):
        return float(v)
    if isinstance(v, Mode):
        return v.value
    return v


def to_dict(cfg: ExperimentConfig) -> dict:
    grid = cfg.model.grid
    return {
        "mbrl_loop": {"mode": cfg.mode.value, "n_trial": cfg.n_trial, "l_step": cfg.l_step,
                      "seed": cfg.seed, "dt": float(cfg.solver.dt),
                      "hyper_schedule": cfg.model.hyper_schedule},
        "safe_limits": {k: _plain(getattr(cfg, k)) for k in
                        ("ln_alpha_s", "ln_alpha_t", "beta_s", "gamma_t", "u_min", "u_max")},
        "pmpc": {**{k: _plain(getattr(cfg.solver, k)) for k in sorted(_SOLVER_KEYS)},
                 "k_s": cfg.k_s, "k_o": cfg.k_o},
        "lgm": {**{k: _plain(getattr(cfg.model, k)) for k in sorted(_MODEL_KEYS)},
                "grid": {k: _plain(getattr(grid, k)) for k in sorted(_GRID_KEYS)}},
        "sim_env": {k: _plain(getattr(cfg.arm, k)) for k in sorted(_ARM_KEYS)},
    }


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=None)


def save(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(cfg))
