"""Structured box grids and cell-centred field containers.

Every field stores its samples as a numpy array shaped ``domain.cells``
(scalar), ``(d,) + cells`` (vector) or ``(d(d+1)/2,) + cells`` (symmetric
tensor, upper triangle in row-major order).  Lengths are measured in units
of the sensing radius.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NO_FLUX = "no-flux"
PERIODIC = "periodic"
BOUNDARY_MODES = (NO_FLUX, PERIODIC)


class DomainMismatch(ValueError):
    pass


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned box (0, L_1) x ... x (0, L_d) split into uniform cells."""

    extent: tuple[float, ...]
    cells: tuple[int, ...]
    boundary_mode: str = NO_FLUX

    def __post_init__(self):
        extent = tuple(float(v) for v in self.extent)
        cells = tuple(int(v) for v in self.cells)
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "cells", cells)
        if len(extent) != len(cells) or not cells:
            raise ValueError("extent and cells must have the same positive length")
        if any(n < 3 for n in cells):
            raise ValueError(f"every axis needs at least 3 cells, got {cells}")
        if any(not np.isfinite(L) or L <= 0 for L in extent):
            raise ValueError(f"extent must be positive, got {extent}")
        if self.boundary_mode not in BOUNDARY_MODES:
            raise ValueError(f"unknown boundary mode {self.boundary_mode!r}")

    @classmethod
    def cube(cls, dim: int, length: float, n: int, boundary_mode: str = NO_FLUX):
        return cls((length,) * dim, (n,) * dim, boundary_mode)

    @property
    def dim(self) -> int:
        return len(self.cells)

    @property
    def spacing(self) -> np.ndarray:
        return np.array(self.extent) / np.array(self.cells)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def size(self) -> int:
        return int(np.prod(self.cells))

    @property
    def periodic(self) -> bool:
        return self.boundary_mode == PERIODIC

    def axes(self) -> list[np.ndarray]:
        return [(np.arange(n) + 0.5) * h for n, h in zip(self.cells, self.spacing)]

    def centers(self) -> np.ndarray:
        """Cell centres, shape ``(d,) + cells``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"))

    def boundary_distance(self) -> np.ndarray:
        """Distance of every cell centre to the box boundary."""
        x = self.centers()
        L = np.array(self.extent).reshape((-1,) + (1,) * self.dim)
        return np.minimum(x, L - x).min(axis=0)

    def refined(self, factor: int = 2) -> "BoxDomain":
        return BoxDomain(self.extent, tuple(n * factor for n in self.cells), self.boundary_mode)

    def coarsened(self, factor: int = 2) -> "BoxDomain":
        return BoxDomain(self.extent, tuple(n // factor for n in self.cells), self.boundary_mode)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "extent": list(self.extent),
            "cells": list(self.cells),
            "boundary_mode": self.boundary_mode,
        }


def sym_index(d: int) -> list[tuple[int, int]]:
    """(i, j) pairs of the upper-triangle storage order."""
    return [(i, j) for i in range(d) for j in range(i, d)]


def _check_finite(values: np.ndarray, what: str):
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True, eq=False)
class ScalarField:
    domain: BoxDomain
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.domain.cells:
            v = v.reshape(self.domain.cells)
        _check_finite(v, "scalar field")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, domain: BoxDomain, func) -> "ScalarField":
        x = domain.centers()
        return cls(domain, np.broadcast_to(func(x), domain.cells).copy())

    @classmethod
    def constant(cls, domain: BoxDomain, value: float) -> "ScalarField":
        return cls(domain, np.full(domain.cells, float(value)))


@dataclass(frozen=True, eq=False)
class VectorField:
    domain: BoxDomain
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        shape = (self.domain.dim,) + self.domain.cells
        if v.shape != shape:
            v = v.reshape(shape)
        _check_finite(v, "vector field")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def magnitude(self) -> np.ndarray:
        return np.sqrt((self.values ** 2).sum(axis=0))


@dataclass(frozen=True, eq=False)
class SymTensorField:
    domain: BoxDomain
    values: np.ndarray

    def __post_init__(self):
        d = self.domain.dim
        v = np.array(self.values, dtype=float)
        shape = (d * (d + 1) // 2,) + self.domain.cells
        if v.shape != shape:
            v = v.reshape(shape)
        _check_finite(v, "tensor field")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_matrices(cls, domain: BoxDomain, mats: np.ndarray, atol: float = 0.0):
        """Build from full matrices shaped ``(d, d) + cells``."""
        d = domain.dim
        mats = np.asarray(mats, dtype=float)
        asym = np.abs(mats - np.swapaxes(mats, 0, 1)).max() if mats.size else 0.0
        if asym > atol:
            raise ValueError(f"tensor is not symmetric (max asymmetry {asym:.3e})")
        return cls(domain, np.stack([mats[i, j] for i, j in sym_index(d)]))

    @classmethod
    def identity(cls, domain: BoxDomain, scale: float = 1.0):
        d = domain.dim
        mats = np.zeros((d, d) + domain.cells)
        for i in range(d):
            mats[i, i] = scale
        return cls.from_matrices(domain, mats)

    def component(self, i: int, j: int) -> np.ndarray:
        if i > j:
            i, j = j, i
        return self.values[sym_index(self.domain.dim).index((i, j))]

    def matrices(self) -> np.ndarray:
        """Full matrices, shape ``cells + (d, d)`` (ready for ``eigvalsh``)."""
        d = self.domain.dim
        out = np.empty(self.domain.cells + (d, d))
        for k, (i, j) in enumerate(sym_index(d)):
            out[..., i, j] = self.values[k]
            out[..., j, i] = self.values[k]
        return out


def require_same(*domains: BoxDomain):
    first = domains[0]
    for other in domains[1:]:
        if other != first:
            raise DomainMismatch(f"domain mismatch: {first} vs {other}")


def integrate(f: ScalarField) -> float:
    """Midpoint rule over all cells."""
    return float(f.values.sum() * f.domain.cell_volume)


def lp_norm(f: ScalarField, p: float) -> float:
    if p == np.inf:
        return float(np.abs(f.values).max())
    if not p >= 1:
        raise ValueError(f"L^p norm needs p >= 1, got {p}")
    return float((np.abs(f.values) ** p).sum() * f.domain.cell_volume) ** (1.0 / p)


def eigenvalues(T: SymTensorField) -> np.ndarray:
    """Cellwise ascending eigenvalues, shape ``cells + (d,)``."""
    return np.linalg.eigvalsh(T.matrices())


def min_eigenvalue_field(T: SymTensorField) -> ScalarField:
    return ScalarField(T.domain, eigenvalues(T)[..., 0])


def spectral_norm_field(T: SymTensorField) -> ScalarField:
    return ScalarField(T.domain, np.abs(eigenvalues(T)).max(axis=-1))


# --- snapshot files -------------------------------------------------------

def save_snapshot(path, f, *, name: str = "c", time: float = 0.0) -> Path:
    """Write ``<path>.bin`` (little-endian float64, row-major) plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bin_path = path.with_suffix(".bin")
    np.ascontiguousarray(f.values, dtype="<f8").tofile(bin_path)
    meta = f.domain.to_dict()
    meta.update(time=float(time), name=name, kind=type(f).__name__)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))
    return bin_path


def load_snapshot(path):
    """Inverse of :func:`save_snapshot`; returns ``(field, meta)``."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    dom = BoxDomain(meta["extent"], meta["cells"], meta["boundary_mode"])
    data = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    kind = {"ScalarField": ScalarField, "VectorField": VectorField,
            "SymTensorField": SymTensorField}[meta.get("kind", "ScalarField")]
    return kind(dom, data), meta
