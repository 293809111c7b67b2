"""Run configuration: schema validation, defaults, tolerance table.

Every number a check compares against lives in TOLERANCES, so loosening
or tightening anything is a one-line, versioned change that shows up in
reports.
"""

from __future__ import annotations

import json

import jsonschema

from .errors import ConfigError

TOLERANCES = {
    "version": 1,
    # analytic oracles
    "annulus_energy_rel": 0.03,      # H(x/|x|) on the half annulus vs 8 sigma4
    "hessian_grad4_rel": 0.03,       # H vs grad4 equality for the radial map
    "sigma_value_rel": 0.10,         # sigma(r) vs 24 sigma4
    "sigma_spread_rel": 0.05,        # sigma(r) spread across radii
    "degree_residual_max": 0.25,     # flux residual before rounding is refused
    "duality_gap_abs": 1e-6,         # matching length vs dual LP value
    "grad_check_rel": 1e-5,          # finite-difference gradient agreement
    "dirderiv_rel": 1e-3,            # directional derivative vs -|d|^2
    "roundtrip_atol": 1e-12,         # projection round-trip tolerance
    "extension_ratio_factor": 2.0,   # measured ratio vs averaging constant
    "contraction_factor": 4.0,       # perturbation distance contraction
    "descent_energy_slack_rel": 0.08,  # final H vs corrected reference energy
    "dumbbell_energy_rel": 0.02,     # H(Psi) agreement across neck lengths
    "slice_coverage_min": 0.95,      # per-slice |det| integral vs sigma4
    "theta_flag": 0.8,               # default eps0 (flag when Theta >= eps0^2)
    "monotone_slack_rel": 0.02,      # sigma(r) non-decreasing slack, times tol(h)
}

_SHAPE_SCHEMA = {
    "type": "object",
    "properties": {
        "shape": {"enum": ["ball", "annulus", "box", "dumbbell"]},
        "center": {"type": "array", "items": {"type": "number"}},
        "radius": {"type": "number", "exclusiveMinimum": 0},
        "r_inner": {"type": "number", "exclusiveMinimum": 0},
        "r_outer": {"type": "number", "exclusiveMinimum": 0},
        "lo": {"type": "array", "items": {"type": "number"}},
        "hi": {"type": "array", "items": {"type": "number"}},
        "cap_radius": {"type": "number", "exclusiveMinimum": 0},
        "neck_half_length": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["shape"],
    "additionalProperties": False,
}

RUN_SCHEMA = {
    "type": "object",
    "properties": {
        "experiment": {"enum": ["validate", "minimize", "topology",
                                "monotonicity", "dumbbell"]},
        "shape": _SHAPE_SCHEMA,
        "h": {"type": "number", "exclusiveMinimum": 0},
        "offset": {"anyOf": [{"type": "number"},
                             {"type": "array",
                              "items": {"type": "number"}}]},
        "lambda": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "field": {"type": "string"},
        "boundary": {"enum": ["radial", "dumbbell"]},
        "amplitude": {"type": "number", "minimum": 0},
        "minimize": {
            "type": "object",
            "properties": {
                "max_iters": {"type": "integer", "minimum": 0},
                "step0": {"type": "number", "exclusiveMinimum": 0},
                "backtrack": {"type": "number", "exclusiveMinimum": 0,
                              "exclusiveMaximum": 1},
                "armijo": {"type": "number", "exclusiveMinimum": 0},
                "max_backtracks": {"type": "integer", "minimum": 1},
                "grad_tol": {"type": "number", "minimum": 0},
                "dual_refresh": {"type": "integer", "minimum": 1},
                "trace_grad4": {"type": "boolean"},
                "checkpoint_every": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "thresholds": {
            "type": "object",
            "properties": {
                "eps0": {"type": "number", "exclusiveMinimum": 0},
                "radii": {"type": "array",
                          "items": {"type": "number", "exclusiveMinimum": 0}},
            },
            "additionalProperties": False,
        },
        "neck_lengths": {"type": "array",
                         "items": {"type": "number", "exclusiveMinimum": 0}},
        "centers": {"type": "integer", "minimum": 1},
        "lambda_sweep": {"type": "array",
                         "items": {"type": "number", "minimum": 0,
                                   "exclusiveMaximum": 1}},
        "figures": {"type": "boolean"},
    },
    "required": ["experiment"],
    "additionalProperties": False,
}

_DEFAULTS = {
    "validate": {
        "experiment": "validate",
        "h": 1 / 16,
        "seed": 0,
        "figures": True,
    },
    "minimize": {
        "experiment": "minimize",
        "shape": {"shape": "ball", "center": [0.0] * 5, "radius": 1.0},
        "h": 1 / 12,
        "offset": 0.5,
        "boundary": "radial",
        "amplitude": 0.2,
        "lambda": 0.0,
        "seed": 0,
        "minimize": {"max_iters": 120},
        "figures": True,
    },
    "topology": {
        "experiment": "topology",
        "shape": {"shape": "dumbbell"},
        "h": 1 / 10,
        "seed": 0,
        "figures": True,
    },
    "monotonicity": {
        "experiment": "monotonicity",
        "shape": {"shape": "ball", "center": [0.0] * 5, "radius": 1.0},
        "h": 1 / 16,
        "offset": 0.5,
        "boundary": "radial",
        "seed": 0,
        "centers": 5,
        "figures": True,
    },
    "dumbbell": {
        "experiment": "dumbbell",
        "h": 1 / 10,
        "neck_lengths": [2.0, 4.0],
        "seed": 0,
        "figures": True,
    },
}


def default_config(experiment):
    if experiment not in _DEFAULTS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    return json.loads(json.dumps(_DEFAULTS[experiment]))


def validate_config(cfg):
    try:
        jsonschema.validate(cfg, RUN_SCHEMA)
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {path}: {e.message}")
    return cfg


def load_config(path):
    """Read and schema-validate a JSON run configuration."""
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}")
    except ValueError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    return validate_config(cfg)


def merged_config(experiment, cfg_path=None, **overrides):
    """Defaults, overlaid by an optional file, overlaid by flag overrides."""
    cfg = default_config(experiment)
    if cfg_path is not None:
        file_cfg = load_config(cfg_path)
        if file_cfg.get("experiment", experiment) != experiment:
            raise ConfigError(
                f"config is for {file_cfg['experiment']!r}, not {experiment!r}")
        cfg.update(file_cfg)
    cfg["experiment"] = experiment
    for key, val in overrides.items():
        if val is not None:
            cfg[key] = val
    return validate_config(cfg)
