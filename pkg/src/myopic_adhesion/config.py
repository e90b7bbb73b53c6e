"""JSON run configuration: schema, loading and the built-in reference setup."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .adhesion import AdhesionForce
from .fields import BOUNDARY_MODES, BoxDomain
from .fractal import CompactSet, dim_condition
from .solver import INITIAL_KINDS, SCHEMES, SolverConfig
from .tensor import KINDS as TENSOR_KINDS, TensorSpec
from .weakform import MODES as ETA_MODES


class ConfigError(ValueError):
    pass


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_vec = {"type": "array", "items": _num, "minItems": 1}
_strict = {"additionalProperties": False}

SCHEMA = {
    "type": "object",
    **_strict,
    "required": ["domain", "tensor", "force", "model", "initial"],
    "properties": {
        "domain": {
            "type": "object", **_strict,
            "required": ["dim", "extent", "cells"],
            "properties": {
                "dim": {"type": "integer", "minimum": 1},
                "extent": {"type": "array", "items": _pos, "minItems": 1},
                "cells": {"type": "array", "items": {"type": "integer", "minimum": 3}, "minItems": 1},
                "boundary_mode": {"enum": list(BOUNDARY_MODES)},
            },
        },
        "tensor": {
            "type": "object", **_strict,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": list(TENSOR_KINDS)},
                "matrix": {"type": "array", "items": _vec},
                "points": {"type": "array", "items": _vec},
                "margin": _pos,
            },
        },
        "force": {
            "type": "object", **_strict,
            "required": ["name"],
            "properties": {"name": {"enum": list(AdhesionForce.KINDS)}, "f0": {"type": "number", "minimum": 0}},
        },
        "model": {
            "type": "object", **_strict,
            "required": ["mu", "r", "T"],
            "properties": {
                "mu": {"type": "number", "minimum": 0},
                "r": {"type": "number", "minimum": 2},
                "eps": {"type": "number", "minimum": 0},
                "eps_schedule": {"type": "array", "items": _pos},
                "T": _pos,
                "cfl": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "dt": {"oneOf": [_pos, {"type": "null"}]},
                "advection_scheme": {"enum": list(SCHEMES)},
                "snapshot_stride": {"type": "integer", "minimum": 1},
                "b_min_dist": _pos,
            },
        },
        "initial": {
            "type": "object", **_strict,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": list(INITIAL_KINDS)},
                "value": {"type": "number", "minimum": 0},
                "center": _vec,
                "base": _num,
                "amp": _num,
                "width": _pos,
                "radius": _pos,
                "axis": {"type": "integer", "minimum": 0},
                "wavenumber": _num,
            },
        },
        "audit": {
            "type": "object", **_strict,
            "properties": {
                "delta_schedule": {"type": "array", "items": _pos},
                "compact_set": {
                    "type": "object", **_strict,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"enum": ["finite-points", "segment", "cantor-iterate"]},
                        "points": {"type": "array", "items": _vec},
                        "depth": {"type": "integer", "minimum": 0},
                        "origin": _vec,
                        "axis": {"type": "integer", "minimum": 0},
                        "length": _pos,
                    },
                },
                "expected_dim": _num,
                "dim_tolerance": _pos,
                "eps_list": {"type": "array", "items": _pos},
                "mask_dist": _pos,
                "eta_modes": {"type": "array", "items": {"enum": list(ETA_MODES)}},
                "T_support": _pos,
                "ramp": _pos,
                "trajectory": {"type": "string"},
            },
        },
        "output": {"type": "string"},
        "seed": {"type": "integer"},
    },
}


@dataclass
class RunConfig:
    raw: dict
    domain: BoxDomain
    spec: TensorSpec
    force: AdhesionForce
    solver: SolverConfig
    initial: dict
    audit: dict = field(default_factory=dict)
    output: str | None = None
    seed: int = 0
    warnings: list = field(default_factory=list)

    @property
    def eps_schedule(self) -> list[float]:
        return [float(v) for v in self.raw["model"].get("eps_schedule", [])]

    def admissibility(self) -> dict:
        est = -math.inf if self.spec.points is None else 0.0
        cond = dim_condition(est, self.domain.dim, self.solver.r)
        return {"threshold": cond.threshold, "degeneracy_dim": est if math.isfinite(est) else None,
                "admissible": cond.admissible, "reasons": cond.reasons}


def compact_set_from(block: dict, dim: int) -> CompactSet:
    kind = block["kind"]
    if kind == "finite-points":
        return CompactSet.finite(block["points"])
    if kind == "segment":
        pts = block.get("points")
        if pts is None or len(pts) != 2:
            raise ConfigError("segment needs exactly two endpoints in 'points'")
        return CompactSet.segment(*pts)
    origin = block.get("origin", [0.0] * dim)
    return CompactSet.cantor(block.get("depth", 1), origin, block.get("axis", 0), block.get("length", 1.0))


def parse_config(raw: dict) -> RunConfig:
    """Validate against the schema and build the module objects; raises ConfigError."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    raw = copy.deepcopy(raw)
    try:
        dm = raw["domain"]
        dom = BoxDomain(dm["extent"], dm["cells"], dm.get("boundary_mode", "no-flux"))
        if dom.dim != dm["dim"]:
            raise ConfigError("domain.dim disagrees with extent/cells")
        tb = raw["tensor"]
        M = tb.get("matrix", np.eye(dom.dim).tolist())
        spec = TensorSpec(tb["kind"], M, tb.get("points"), tb.get("margin"))
        if spec.dim != dom.dim:
            raise ConfigError("tensor dimension disagrees with the domain")
        spec.verified_margin(dom)
        fb = raw["force"]
        force = AdhesionForce(fb["name"], float(fb.get("f0", 1.0)))
        mb = raw["model"]
        solver = SolverConfig(
            eps=float(mb.get("eps", 0.02)), mu=float(mb["mu"]), r=float(mb["r"]),
            cfl=float(mb.get("cfl", 0.9)), T=float(mb["T"]),
            snapshot_stride=int(mb.get("snapshot_stride", 1)),
            advection_scheme=mb.get("advection_scheme", "upwind"),
            dt=mb.get("dt"), b_min_dist=float(mb.get("b_min_dist", 0.2)))
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig(raw, dom, spec, force, solver, dict(raw["initial"]), dict(raw.get("audit", {})),
                    raw.get("output"), int(raw.get("seed", 0)))
    cfg.warnings = list(cfg.admissibility()["reasons"])
    if solver.degenerate_direct:
        cfg.warnings.append("eps = 0: degenerate-direct mode")
    return cfg


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(raw)


# d = 3 box of side 2 with one degenerate point at the centre (margin a = 1)
REFERENCE = {
    "domain": {"dim": 3, "extent": [2.0, 2.0, 2.0], "cells": [32, 32, 32], "boundary_mode": "no-flux"},
    "tensor": {"kind": "scalar-isotropic", "points": [[1.0, 1.0, 1.0]], "margin": 1.0},
    "force": {"name": "hat", "f0": 4.0},
    "model": {"mu": 1.0, "r": 4.0, "eps": 0.02, "eps_schedule": [0.04, 0.02, 0.01, 0.005], "T": 0.5,
              "cfl": 0.9, "advection_scheme": "upwind", "snapshot_stride": 5, "b_min_dist": 0.2},
    "initial": {"kind": "gaussian", "center": [0.8, 1.0, 1.2], "base": 0.2, "amp": 0.8, "width": 0.3},
    "audit": {"delta_schedule": [0.125, 0.0625, 0.03125, 0.015625, 0.0078125],
              "eps_list": [0.04, 0.02, 0.01], "mask_dist": 0.2,
              "eta_modes": ["constant", "polynomial-interior"], "T_support": 0.4, "ramp": 0.5},
}


def reference_config(overrides: dict | None = None) -> dict:
    """Deep copy of the reference setup with dotted-key overrides, e.g. ``{"model.mu": 0}``."""
    raw = copy.deepcopy(REFERENCE)
    for key, value in (overrides or {}).items():
        node = raw
        *head, last = key.split(".")
        for part in head:
            node = node.setdefault(part, {})
        node[last] = value
    return raw
