"""Run configuration: YAML file validated against a fixed JSON schema."""
from __future__ import annotations

import hashlib
import json

import jsonschema
import yaml


class ConfigError(ValueError):
    """Invalid configuration (maps to exit code 2)."""


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int_pos = {"type": "integer", "minimum": 1}
_vec = {"type": "array", "items": _num}

_signal = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["sinusoid", "ramps", "piecewise_linear"]},
        "n_ramps": _int_pos,
        "knots": _vec,
        "params": _vec,
    },
}

_named_params = {
    "type": "array",
    "minItems": 1,
    "items": {
        "type": "object",
        "additionalProperties": False,
        "required": ["params"],
        "properties": {"name": {"type": "string"}, "params": _vec},
    },
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["model"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "threads": _int_pos,
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"enum": ["spring_damper", "single_track_nl", "single_track_lin"]},
                "noise_var": {"type": "number", "minimum": 0},
                "c_range": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                "d_range": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                "vehicle": {"type": "object", "additionalProperties": _pos},
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"t0": _num, "tf": _num, "h": _pos, "every": _int_pos},
        },
        "engine": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["intrusive", "transport"]},
                "degree": {"type": "integer", "minimum": 0},
                "quad_order": _int_pos,
                "order": {"enum": ["first_order", "total_order"]},
                "n_samples": {"type": "integer", "minimum": 2},
                "bins": {"type": "integer", "minimum": 2},
                "strategy": {"enum": ["equiprobable", "equiwidth"]},
                "s_min": {"oneOf": [{"enum": ["noise"]}, {"type": "number", "minimum": 0}]},
                "surrogate": {"type": "string"},
                "dump_samples": {"type": "boolean"},
            },
        },
        "signal": _signal,
        "admissible": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lower": _vec, "upper": _vec,
                "u_max": {"type": "number", "minimum": 0}, "rate_max": {"type": "number", "minimum": 0},
                "u_start": _num, "u_end": _num,
            },
        },
        "weights": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "parameters": {"type": "array", "items": {"type": "string"}},
                "outputs": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "Q": {"type": "array", "items": _vec},
                "R": {"oneOf": [_num, {"type": "array", "items": _vec}]},
            },
        },
        "chance": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["y_max", "alpha"],
                "properties": {"output": {"type": "integer", "minimum": 0}, "y_max": _num,
                               "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
            },
        },
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_pop": {"type": "integer", "minimum": 4},
                "max_iter": {"type": "integer", "minimum": 0},
                "F": {"type": "number", "exclusiveMinimum": 0, "maximum": 2},
                "CR": {"type": "number", "minimum": 0, "maximum": 1},
                "penalty": _pos,
                "stagnation": {"type": "integer", "minimum": 0},
                "refine": {"type": "boolean"},
            },
        },
        "identify": {
            "type": "object",
            "additionalProperties": False,
            "required": ["theta_true", "theta0", "lower", "upper", "datasets"],
            "properties": {
                "theta_true": _vec, "theta0": _vec, "lower": _vec, "upper": _vec,
                "noise_std": {"type": "number", "minimum": 0},
                "datasets": _named_params,
                "combined": {"type": "boolean"},
            },
        },
        "rank": {
            "type": "object",
            "additionalProperties": False,
            "required": ["signals"],
            "properties": {"parameter": {"type": "string"}, "signals": _named_params},
        },
    },
}


def validate(cfg) -> dict:
    if not isinstance(cfg, dict):
        raise ConfigError("configuration must be a mapping")
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {err.message}") from None
    grid = cfg.get("grid", {})
    if "t0" in grid and "tf" in grid and grid["tf"] <= grid["t0"]:
        raise ConfigError("grid: tf must exceed t0")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err}") from None
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: invalid YAML: {err}") from None
    return validate(cfg if cfg is not None else {})


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
