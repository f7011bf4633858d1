"""Run-configuration documents: a versioned JSON schema over SolverConfig.

A run document is a flat JSON object tagged with a schema string; the field
set mirrors SolverConfig exactly (weights form a nested object).  Parsing is
strict: unknown keys are rejected with their full path, types are checked
before construction, and range violations surface as ConfigError so the CLI
can map them to its config exit code.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional

from .phase_grid import WeightParams
from .solver import RUN_CONFIG_SCHEMA, SolverConfig

__all__ = [
    "RUN_CONFIG_SCHEMA",
    "OUTPUT_DIR_ENV",
    "ConfigError",
    "RunConfig",
    "load_run_config",
    "parse_run_config",
    "default_output_dir",
]

OUTPUT_DIR_ENV = "VPBKIT_OUTPUT_DIR"

# key -> expected scalar type; bool is checked first since bool < int in Python
_INT_KEYS = {
    "n_mesh",
    "n_velocity",
    "max_sweeps",
    "n_stages",
    "n_boundary_samples",
    "gamma_stride",
    "gamma_polar",
    "gamma_azimuth",
    "interp_order",
    "seed",
}
_FLOAT_KEYS = {
    "radius",
    "t_final",
    "segment_dt",
    "v_max",
    "initial_amplitude",
    "sweep_tol",
    "gamma_radius",
    "null_flux_tol",
}
_BOOL_KEYS = {"include_collisions", "force_zero_field", "record_snapshots"}
_STR_KEYS = {"domain_kind", "initial_kind"}
_WEIGHT_KEYS = {"vartheta", "vartheta_tilde"}
_ALL_KEYS = (
    {"schema", "semi_axes", "weights", "output_dir"}
    | _INT_KEYS
    | _FLOAT_KEYS
    | _BOOL_KEYS
    | _STR_KEYS
)


class ConfigError(ValueError):
    """Schema violation; `path` names the offending key ('' for the document)."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


def _require_number(doc: dict, key: str, integer: bool) -> float:
    val = doc[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(key, f"expected a number, got {type(val).__name__}")
    if integer and not float(val).is_integer():
        raise ConfigError(key, f"expected an integer, got {val!r}")
    return int(val) if integer else float(val)


@dataclass(frozen=True)
class RunConfig:
    """A validated run document; `solver` holds every numeric field."""

    solver: SolverConfig

    @classmethod
    def from_document(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("", "run config must be a JSON object")
        schema = doc.get("schema")
        if schema is None:
            raise ConfigError("schema", "missing required key")
        if schema != RUN_CONFIG_SCHEMA:
            raise ConfigError("schema", f"unsupported schema {schema!r}")
        for key in doc:
            if key not in _ALL_KEYS:
                raise ConfigError(key, "unknown key")

        kwargs: dict = {}
        for key in _INT_KEYS & doc.keys():
            kwargs[key] = _require_number(doc, key, integer=True)
        for key in _FLOAT_KEYS & doc.keys():
            kwargs[key] = _require_number(doc, key, integer=False)
        for key in _BOOL_KEYS & doc.keys():
            if not isinstance(doc[key], bool):
                raise ConfigError(key, "expected true/false")
            kwargs[key] = doc[key]
        for key in _STR_KEYS & doc.keys():
            if not isinstance(doc[key], str):
                raise ConfigError(key, "expected a string")
            kwargs[key] = doc[key]

        if doc.get("semi_axes") is not None:
            axes = doc["semi_axes"]
            if not isinstance(axes, (list, tuple)) or len(axes) != 3:
                raise ConfigError("semi_axes", "expected three numbers")
            for i, a in enumerate(axes):
                if isinstance(a, bool) or not isinstance(a, (int, float)) or a <= 0:
                    raise ConfigError(f"semi_axes[{i}]", "expected a positive number")
            kwargs["semi_axes"] = tuple(float(a) for a in axes)

        if "weights" in doc:
            w = doc["weights"]
            if not isinstance(w, dict):
                raise ConfigError("weights", "expected an object")
            for key in w:
                if key not in _WEIGHT_KEYS:
                    raise ConfigError(f"weights.{key}", "unknown key")
            for key in w:
                if isinstance(w[key], bool) or not isinstance(w[key], (int, float)):
                    raise ConfigError(f"weights.{key}", "expected a number")
            try:
                kwargs["weights"] = WeightParams(**{k: float(v) for k, v in w.items()})
            except ValueError as exc:
                raise ConfigError("weights", str(exc)) from exc

        if doc.get("output_dir") is not None:
            if not isinstance(doc["output_dir"], str):
                raise ConfigError("output_dir", "expected a string")
            kwargs["output_dir"] = doc["output_dir"]

        try:
            solver = SolverConfig(**kwargs)
        except ValueError as exc:
            raise ConfigError("", str(exc)) from exc
        return cls(solver=solver)

    def to_document(self) -> dict:
        return self.solver.echo()

    @property
    def output_dir(self) -> str:
        return self.solver.output_dir or default_output_dir()


def parse_run_config(doc: dict) -> RunConfig:
    return RunConfig.from_document(doc)


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError("", f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"config is not valid JSON: {exc}") from exc
    return RunConfig.from_document(doc)


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_DIR_ENV, ".")
