"""Nonlocal adhesion operator on a cell-centred grid.

Two independent routes compute the same midpoint quadrature:

* :func:`apply_adhesion` gathers ``sum_k w_k c(x + xi_k)`` from a kernel table
  built out of the adhesion force ``F``;
* :func:`adhesion_via_potential` scatters every cell's mass through the
  gradient of the interaction potential ``H``.

They must agree to rounding error, which is how each checks the other.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.fft as sfft

from .fields import BoxDomain, ScalarField, VectorField, require_same

# offsets with |xi h| within this of 1 count as lying on the unit sphere
BALL_TOL = 1e-12
# pairs (cells x offsets) above which "auto" switches to the FFT route
FFT_THRESHOLD = 2_000_000


def unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


@dataclass(frozen=True)
class AdhesionForce:
    """Radial adhesion strength F on [0, 1]."""

    name: str = "constant"
    f0: float = 1.0

    KINDS = ("constant", "linear", "hat")

    def __post_init__(self):
        if self.name not in self.KINDS:
            raise ValueError(f"unknown adhesion force {self.name!r}; choose from {self.KINDS}")
        if not np.isfinite(self.f0) or self.f0 < 0:
            raise ValueError("adhesion strength f0 must be finite and >= 0")

    def __call__(self, s):
        s = np.clip(np.asarray(s, dtype=float), 0.0, 1.0)
        if self.name == "constant":
            return np.full_like(s, self.f0)
        if self.name == "linear":
            return self.f0 * s
        return self.f0 * s * (1.0 - s)

    @property
    def max_value(self) -> float:
        return self.f0 / 4 if self.name == "hat" else self.f0

    @property
    def is_zero(self) -> bool:
        return self.f0 == 0.0


@dataclass(frozen=True)
class PotentialGradient:
    """Gradient of the interaction potential, -(1/|B_1|) x/|x| F(|x|) inside the unit ball."""

    force: AdhesionForce
    dim: int

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r = np.sqrt((x ** 2).sum(axis=-1))
        inside = (r > 0) & (r <= 1 + BALL_TOL)
        safe_r = np.where(inside, r, 1.0)
        scale = np.where(inside, -self.force(safe_r) / (unit_ball_volume(self.dim) * safe_r), 0.0)
        return x * scale[..., None]

    @property
    def bound(self) -> float:
        return self.force.max_value / unit_ball_volume(self.dim)


@dataclass(frozen=True, eq=False)
class AdhesionKernel:
    domain: BoxDomain
    force: AdhesionForce
    offsets: np.ndarray  # (K, d) integer cell offsets
    weights: np.ndarray  # (K, d)
    _fft_cache: dict = field(default_factory=dict, repr=False)

    @property
    def reach(self) -> np.ndarray:
        """Largest offset per axis, in cells."""
        return np.abs(self.offsets).max(axis=0) if len(self.offsets) else np.zeros(self.domain.dim, int)

    def weight_sum_norm(self) -> float:
        return float(np.sqrt((self.weights ** 2).sum(axis=1)).sum())


def _ball_offsets(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Integer offsets m with |m h| <= 1 and their physical lengths."""
    R = np.floor((1 + BALL_TOL) / h).astype(int)
    grids = np.meshgrid(*[np.arange(-r, r + 1) for r in R], indexing="ij")
    m = np.stack([g.ravel() for g in grids], axis=1)
    dist = np.sqrt(((m * h) ** 2).sum(axis=1))
    keep = dist <= 1 + BALL_TOL
    return m[keep], dist[keep]


def build_kernel(F: AdhesionForce, dom: BoxDomain) -> AdhesionKernel:
    h = dom.spacing
    if (1.0 / h).min() < 2:
        raise ValueError(f"grid spacing {h} does not resolve the unit sensing ball (need h <= 1/2)")
    m, dist = _ball_offsets(h)
    m = m[dist > 0]
    dist = dist[dist > 0]
    # keep +xi and -xi adjacent and bitwise antisymmetric
    lead = np.argmax(m != 0, axis=1)
    half = m[np.arange(len(m)), lead] > 0
    pos, pos_dist = m[half], dist[half]
    w_pos = (pos * h) / pos_dist[:, None] * (F(pos_dist) / unit_ball_volume(dom.dim) * dom.cell_volume)[:, None]
    offsets = np.concatenate([pos, -pos])
    weights = np.concatenate([w_pos, -w_pos])
    offsets = np.concatenate([np.zeros((1, dom.dim), int), offsets])
    weights = np.concatenate([np.zeros((1, dom.dim)), weights])
    return AdhesionKernel(dom, F, offsets.astype(np.int64), weights)


def _padded_layout(dom: BoxDomain, reach: np.ndarray):
    """Shape of the field padded by ``reach`` cells per side, its strides and the
    flat positions of the interior cells inside it."""
    shape = tuple(int(n + 2 * r) for n, r in zip(dom.cells, reach))
    strides = np.ones(dom.dim, dtype=np.int64)
    for a in range(dom.dim - 2, -1, -1):
        strides[a] = strides[a + 1] * shape[a + 1]
    inner = np.ix_(*[np.arange(n) + r for n, r in zip(dom.cells, reach)])
    base = np.zeros(dom.cells, dtype=np.int64)
    for a in range(dom.dim):
        base = base + inner[a] * strides[a]
    return shape, strides, base.ravel()


def _pad(dom: BoxDomain, values: np.ndarray, reach: np.ndarray) -> np.ndarray:
    width = [(int(r), int(r)) for r in reach]
    if dom.periodic:
        return np.pad(values, width, mode="wrap")
    return np.pad(values, width)


def _fold(dom: BoxDomain, padded: np.ndarray, reach: np.ndarray) -> np.ndarray:
    """Sum a padded array back onto the box: wrap images (periodic) or drop them (no-flux)."""
    lead = padded.ndim - dom.dim
    if not dom.periodic:
        return padded[(slice(None),) * lead + tuple(slice(r, r + n) for n, r in zip(dom.cells, reach))]
    out = padded
    for a, (n, r) in enumerate(zip(dom.cells, reach)):
        target = (np.arange(out.shape[lead + a]) - r) % n
        moved = np.moveaxis(out, lead + a, 0)
        acc = np.zeros((n,) + moved.shape[1:])
        np.add.at(acc, target, moved)
        out = np.moveaxis(acc, 0, lead + a)
    return out


@numba.njit(cache=True, inline="always")
def _acc(out, comp, a, i, term):
    # branch-free compensated (TwoSum) accumulation: the direct routes add ~10^4
    # terms whose total is often two orders of magnitude below their absolute sum
    s = out[a, i]
    t = s + term
    z = t - s
    comp[a, i] += (s - (t - z)) + (term - z)
    out[a, i] = t


@numba.njit(cache=True)
def _gather(cp, base, shifts, weights, out, comp):
    # offsets outer so consecutive cells read consecutive memory
    n, d = base.shape[0], weights.shape[1]
    for k in range(shifts.shape[0]):
        s = shifts[k]
        w = weights[k]
        for i in range(n):
            v = cp[base[i] + s]
            for a in range(d):
                _acc(out, comp, a, i, w[a] * v)


@numba.njit(cache=True)
def _gather3(cp, base, shifts, weights, out, comp):
    n = base.shape[0]
    for k in range(shifts.shape[0]):
        s = shifts[k]
        w0, w1, w2 = weights[k, 0], weights[k, 1], weights[k, 2]
        for i in range(n):
            v = cp[base[i] + s]
            _acc(out, comp, 0, i, w0 * v)
            _acc(out, comp, 1, i, w1 * v)
            _acc(out, comp, 2, i, w2 * v)


@numba.njit(cache=True)
def _scatter(c_flat, base, shifts, grad, vol, out, comp):
    n, d = base.shape[0], grad.shape[1]
    for k in range(shifts.shape[0]):
        s = shifts[k]
        g = grad[k]
        for j in range(n):
            v = c_flat[j] * vol
            t = base[j] + s
            for a in range(d):
                _acc(out, comp, a, t, g[a] * v)


@numba.njit(cache=True)
def _scatter3(c_flat, base, shifts, grad, vol, out, comp):
    n = base.shape[0]
    for k in range(shifts.shape[0]):
        s = shifts[k]
        g0, g1, g2 = grad[k, 0], grad[k, 1], grad[k, 2]
        for j in range(n):
            v = c_flat[j] * vol
            t = base[j] + s
            _acc(out, comp, 0, t, g0 * v)
            _acc(out, comp, 1, t, g1 * v)
            _acc(out, comp, 2, t, g2 * v)


def _direct(K: AdhesionKernel, values: np.ndarray) -> np.ndarray:
    dom = K.domain
    reach = K.reach
    _, strides, base = _padded_layout(dom, reach)
    cp = np.ascontiguousarray(_pad(dom, values, reach)).ravel()
    out = np.zeros((dom.dim, dom.size))
    comp = np.zeros_like(out)
    (_gather3 if dom.dim == 3 else _gather)(cp, base, K.offsets @ strides, K.weights, out, comp)
    out += comp
    return out.reshape((dom.dim,) + dom.cells)


def _fft_plan(K: AdhesionKernel):
    """Padded shape and transformed kernel (cached on the kernel)."""
    if "plan" in K._fft_cache:
        return K._fft_cache["plan"]
    dom = K.domain
    cells = np.array(dom.cells)
    if dom.periodic:
        shape = tuple(int(n) for n in cells)
    else:
        shape = tuple(sfft.next_fast_len(int(n + r)) for n, r in zip(cells, K.reach))
    # conv(c, g)(x) = sum_y c(y) g(x - y); with y = x + xi the kernel sits at -xi
    pos = tuple(np.mod(-K.offsets[:, a], shape[a]) for a in range(dom.dim))
    spectra = []
    for a in range(dom.dim):
        g = np.zeros(shape)
        np.add.at(g, pos, K.weights[:, a])
        spectra.append(sfft.rfftn(g))
    plan = (shape, np.stack(spectra))
    K._fft_cache["plan"] = plan
    return plan


def _fft(K: AdhesionKernel, values: np.ndarray) -> np.ndarray:
    dom = K.domain
    shape, spectra = _fft_plan(K)
    padded = np.zeros(shape)
    padded[tuple(slice(0, n) for n in dom.cells)] = values
    chat = sfft.rfftn(padded)
    out = sfft.irfftn(spectra * chat[None], s=shape, axes=tuple(range(1, dom.dim + 1)))
    return out[(slice(None),) + tuple(slice(0, n) for n in dom.cells)]


def apply_adhesion(K: AdhesionKernel, c: ScalarField, method: str = "auto") -> VectorField:
    """Discrete ``A c``: zero extension outside the box (no-flux) or wrap-around (periodic)."""
    require_same(K.domain, c.domain)
    if K.force.is_zero:
        return VectorField(c.domain, np.zeros((c.domain.dim,) + c.domain.cells))
    if method == "auto":
        method = "fft" if c.domain.size * len(K.offsets) > FFT_THRESHOLD else "direct"
    if method == "direct":
        out = _direct(K, c.values)
    elif method == "fft":
        out = _fft(K, c.values)
    else:
        raise ValueError(f"unknown method {method!r}")
    return VectorField(c.domain, out)


def adhesion_via_potential(G: PotentialGradient, c: ScalarField) -> VectorField:
    """``(grad H * c)(x) = sum_y grad H(x - y) c(y) |cell|``, scattered source by source.

    With ``grad H(z) = -(1/|B_1|) z/|z| F(|z|)`` this convolution reproduces the
    adhesion operator exactly (the displacement ``x - y = -xi`` flips the sign).
    """
    dom = c.domain
    if G.dim != dom.dim:
        raise ValueError("potential gradient and field dimensions differ")
    h = dom.spacing
    reach = np.floor((1 + BALL_TOL) / h).astype(np.int64)
    grids = np.meshgrid(*[np.arange(-r, r + 1) for r in reach], indexing="ij")
    disp = np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)
    grad = G(disp * h)
    nz = np.any(grad != 0, axis=1)
    disp, grad = disp[nz], np.ascontiguousarray(grad[nz])
    shape, strides, base = _padded_layout(dom, reach)
    out = np.zeros((dom.dim, int(np.prod(shape))))
    scatter = _scatter3 if dom.dim == 3 else _scatter
    comp = np.zeros_like(out)
    scatter(np.ascontiguousarray(c.values).ravel(), base, disp @ strides, grad, dom.cell_volume, out, comp)
    out += comp
    out = _fold(dom, out.reshape((dom.dim,) + shape), reach)
    return VectorField(dom, out)
