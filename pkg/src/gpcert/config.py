"""Pipeline configuration: defaults, schema validation and dotted-path overrides."""
from __future__ import annotations

import copy
import json
import math

import jsonschema

DEFAULTS: dict = {
    "plant": "pendulum",
    "box": [[-6.0, 6.0], [-6.0, 6.0]],
    "seed": 42,
    "threads": 1,
    "out": "out",
    "data": {"step": 1.5, "noise": 0.1},
    "gp": {"budget": 100, "kappa_theta": 3.0, "theta_ini": None},
    "cost": {"R": [[1.0]]},
    "check": {"step": 0.6},
    "lqr": {"kappa_alpha": 0.001},
    "synthesis": {"kappa": 0.5e3, "kappa_grad": 1.0e-5, "iterations": 10000,
                  "eta_quad": 1.0, "eta_const": 5.0},
    "certify": {"grid_step": 0.2, "refine_depth": 6, "margin": 0.0, "compare_lqr": True},
    "simulation": {"dt": 0.005, "horizon": 20.0, "convergence_radius": 0.1,
                   "divergence_radius": 50.0, "starts_per_axis": 5},
}

_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}


def _obj(props: dict, required=None) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(props) if required is None else required}


SCHEMA = _obj({
    "plant": {"enum": ["pendulum"]},
    "box": {"type": "array", "minItems": 2, "maxItems": 2,
            "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}},
    "seed": {"type": "integer", "minimum": 0},
    "threads": {"type": "integer", "minimum": 1},
    "out": {"type": "string", "minLength": 1},
    "data": _obj({"step": _pos, "noise": _nonneg}),
    "gp": _obj({"budget": {"type": "integer", "minimum": 1}, "kappa_theta": _nonneg,
                "theta_ini": {"type": ["array", "null"], "items": {"type": "number"}}}),
    "cost": _obj({"R": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}}),
    "check": _obj({"step": _pos}),
    "lqr": _obj({"kappa_alpha": _pos}),
    "synthesis": _obj({"kappa": _nonneg, "kappa_grad": _pos,
                       "iterations": {"type": "integer", "minimum": 0},
                       "eta_quad": _nonneg, "eta_const": _nonneg}),
    "certify": _obj({"grid_step": _pos, "refine_depth": {"type": "integer", "minimum": 0, "maximum": 12},
                     "margin": _nonneg, "compare_lqr": {"type": "boolean"}}),
    "simulation": _obj({"dt": _pos, "horizon": _pos, "convergence_radius": _pos,
                        "divergence_radius": _pos, "starts_per_axis": {"type": "integer", "minimum": 1}}),
})


class ConfigError(ValueError):
    pass


def _merge(base: dict, patch: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in patch.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_overrides(cfg: dict, overrides: dict) -> dict:
    """Apply {"a.b.c": value} patches; unknown paths are rejected."""
    out = copy.deepcopy(cfg)
    for dotted, value in overrides.items():
        keys = dotted.split(".")
        node = out
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"unknown override path {dotted!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"unknown override path {dotted!r}")
        node[keys[-1]] = value
    return out


def validate(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    for lo, hi in cfg["box"]:
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise ConfigError("box: every interval needs finite lo < hi")
    sim = cfg["simulation"]
    if sim["horizon"] < sim["dt"]:
        raise ConfigError("simulation.horizon must be at least dt")
    n = len(cfg["box"])
    ti = cfg["gp"]["theta_ini"]
    if ti is not None and len(ti) != n + 2:
        raise ConfigError(f"gp.theta_ini must have {n + 2} entries")
    return cfg


def load_config(path: str | None = None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return validate(cfg)
