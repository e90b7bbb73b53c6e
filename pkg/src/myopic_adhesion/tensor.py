"""Analytic diffusion tensors with explicit degeneracy sets and their regularization.

``regularize`` produces the uniformly elliptic family

    D_eps = eps I + psi_0 (eta_eps * D)(x) + sum_k psi_k (eta_eps * D)(x + s_k(x))

where the psi are a partition of unity subordinate to the boundary collar
and the shifts s_k push the mollification ball away from the box faces.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fields import BoxDomain, SymTensorField, eigenvalues, require_same
from .fractal import CompactSet

KINDS = ("constant", "scalar-isotropic", "anisotropic-product")


def smoothstep(t):
    """C^2 quintic ramp: 0 for t <= 0, 1 for t >= 1."""
    t = np.clip(t, 0.0, 1.0)
    return t ** 3 * (10 - 15 * t + 6 * t ** 2)


@dataclass(frozen=True, eq=False)
class TensorSpec:
    """Closure x -> symmetric d x d matrix with a known degeneracy set."""

    kind: str
    matrix: np.ndarray
    points: np.ndarray = None  # degeneracy points, (N, d); None for the constant kind
    margin: float = None  # claimed dist(K, boundary); verified against the domain

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown tensor kind {self.kind!r}")
        M = np.array(self.matrix, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ValueError("tensor matrix must be square")
        if not np.allclose(M, M.T, rtol=0, atol=1e-14):
            raise ValueError("tensor matrix must be symmetric")
        lam = np.linalg.eigvalsh(M)
        if self.kind == "constant" and lam[0] < -1e-12:
            raise ValueError("constant tensor must be positive semidefinite")
        if self.kind == "anisotropic-product" and lam[0] <= 0:
            raise ValueError("anisotropic-product needs a positive definite matrix")
        object.__setattr__(self, "matrix", M)
        if self.kind == "constant":
            object.__setattr__(self, "points", None)
        else:
            if self.points is None:
                raise ValueError(f"{self.kind} needs degeneracy points")
            pts = np.atleast_2d(np.asarray(self.points, dtype=float))
            if pts.shape[1] != M.shape[0]:
                raise ValueError("degeneracy points and matrix disagree on dimension")
            object.__setattr__(self, "points", pts)

    @classmethod
    def constant(cls, M) -> "TensorSpec":
        return cls("constant", M)

    @classmethod
    def scalar_isotropic(cls, points, margin=None) -> "TensorSpec":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return cls("scalar-isotropic", np.eye(pts.shape[1]), pts, margin)

    @classmethod
    def anisotropic_product(cls, M, points, margin=None) -> "TensorSpec":
        return cls("anisotropic-product", M, points, margin)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def degeneracy(self) -> CompactSet | None:
        return None if self.points is None else CompactSet.finite(self.points)

    def weight(self, x) -> np.ndarray:
        """Scalar factor prod_p min(1, |x - p|^2); x has shape ``(d,) + S``."""
        x = np.asarray(x, dtype=float)
        if self.points is None:
            return np.ones(x.shape[1:])
        out = np.ones(x.shape[1:])
        for p in self.points:
            r2 = ((x - p.reshape((-1,) + (1,) * (x.ndim - 1))) ** 2).sum(axis=0)
            out = out * np.minimum(1.0, r2)
        return out

    def __call__(self, x) -> np.ndarray:
        """Matrices shaped ``(d, d) + S`` at points ``x`` of shape ``(d,) + S``."""
        w = self.weight(x)
        return self.matrix.reshape(self.matrix.shape + (1,) * w.ndim) * w

    def sup_norm(self) -> float:
        """sup_x |D(x)| (spectral); the weight never exceeds 1."""
        return float(np.abs(np.linalg.eigvalsh(self.matrix)).max())

    def verified_margin(self, dom: BoxDomain) -> float:
        """Distance from K to the box boundary, checked against the claimed margin."""
        L = np.array(dom.extent)
        if self.points is None:
            a = float(L.min() / 2)
        else:
            if np.any(self.points <= 0) or np.any(self.points >= L):
                raise ValueError("degeneracy set must lie inside the box")
            a = float(np.minimum(self.points, L - self.points).min())
        if self.margin is not None:
            if not self.margin > 0:
                raise ValueError("margin must be positive")
            if self.margin > a + 1e-12:
                raise ValueError(f"degeneracy set is within {a:.4g} of the boundary, "
                                 f"inside the claimed margin {self.margin:.4g}")
            a = float(self.margin)
        return a

    def modulus(self, delta: float, samples: int = 200_000, seed: int = 0) -> float:
        """Sampled modulus of continuity sup_{|x-y| <= delta} |D(x) - D(y)| near K.

        Sampling concentrates around the degeneracy points where the weight
        varies fastest; far from K the weight is locally constant 1.
        """
        if self.points is None:
            return 0.0
        rng = np.random.default_rng(seed)
        d = self.dim
        best = 0.0
        norm = self.sup_norm()
        for p in self.points:
            x = p[:, None] + rng.uniform(-1.2, 1.2, (d, samples))
            u = rng.normal(size=(d, samples))
            u *= delta * rng.uniform(0, 1, samples) ** (1 / d) / np.linalg.norm(u, axis=0)
            dw = np.abs(self.weight(x) - self.weight(x + u))
            # radial pairs hit the steepest direction exactly
            rad = rng.uniform(0, 1.0, samples)
            e = np.zeros((d, samples))
            e[0] = 1.0
            dw_rad = np.abs(self.weight(p[:, None] + e * rad) - self.weight(p[:, None] + e * (rad + delta)))
            best = max(best, float(dw.max()), float(dw_rad.max()))
        return best * norm


def evaluate(spec: TensorSpec, dom: BoxDomain) -> SymTensorField:
    if spec.dim != dom.dim:
        raise ValueError("tensor spec and domain disagree on dimension")
    mats = spec(dom.centers())
    if not np.all(np.isfinite(mats)):
        raise ValueError("tensor closure returned non-finite values")
    return SymTensorField.from_matrices(dom, mats, atol=1e-12)


# --- mollifier ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Mollifier:
    """Discrete standard bump at scale eps: sub-lattice offsets and unit-mass weights."""

    eps: float
    offsets: np.ndarray  # (M, d) physical displacements, all with |y| < eps
    weights: np.ndarray  # (M,) nonnegative, summing to 1

    @classmethod
    def build(cls, eps: float, dom: BoxDomain) -> "Mollifier":
        if not eps > 0:
            raise ValueError("mollifier scale must be positive")
        s = min(dom.spacing.min() / 2, eps / 2)
        R = int(math.ceil(eps / s))
        g = np.meshgrid(*[np.arange(-R, R + 1)] * dom.dim, indexing="ij")
        y = np.stack([v.ravel() for v in g], axis=1) * s
        rho2 = (y ** 2).sum(axis=1) / eps ** 2
        keep = rho2 < 1
        y, rho2 = y[keep], rho2[keep]
        w = np.exp(1.0 / (rho2 - 1.0))
        return cls(float(eps), y, w / w.sum())

    @property
    def mass(self) -> float:
        return float(self.weights.sum())


# --- partition of unity and shifts ----------------------------------------

def _face_distances(x: np.ndarray, extent) -> list[tuple[int, int, np.ndarray]]:
    """(axis, side, distance) for every face; side +1 is the low face (inward normal +e_axis)."""
    out = []
    for ax, L in enumerate(extent):
        out.append((ax, +1, x[ax]))
        out.append((ax, -1, L - x[ax]))
    return out


def partition(x: np.ndarray, extent, a: float):
    """Interior weight, face weights and per-face collar indicators at points ``x`` ``(d,) + S``.

    Stick-breaking over the faces: w_k is 1 within a/4 of face k and 0
    beyond a/2; psi_k = w_k prod_{j<k} (1 - w_j) and psi_0 = prod_j (1 - w_j),
    so the weights sum to 1 identically.
    """
    faces = _face_distances(x, extent)
    rest = np.ones(x.shape[1:])
    psis, ws = [], []
    for _, _, dist in faces:
        w = 1.0 - smoothstep((dist - a / 4) / (a / 4))
        ws.append(w)
        psis.append(rest * w)
        rest = rest * (1.0 - w)
    return rest, psis, ws, faces


def face_shifts(x: np.ndarray, extent, a: float, eps: float):
    """Shift vector for each face weight.

    Face k moves by eps along its inward normal plus eps times the collar
    indicator of every face on another axis, so near edges and corners the
    ball of radius eps lands inside the box.
    """
    _, _, ws, faces = partition(x, extent, a)
    d = x.shape[0]
    shifts = []
    for k, (ax, side, _) in enumerate(faces):
        s = np.zeros_like(x)
        s[ax] = side * eps
        for j, (bx, bside, _) in enumerate(faces):
            if bx != ax:
                s[bx] = s[bx] + bside * eps * ws[j]
        shifts.append(s)
    return shifts


def _mollified(spec: TensorSpec, x: np.ndarray, moll: Mollifier, extent, counter: list):
    """(eta_eps * D)(x) with coordinates clamped to the closed box (counted)."""
    d = spec.dim
    L = np.array(extent).reshape((-1,) + (1,) * (x.ndim - 1))
    acc = np.zeros((d, d) + x.shape[1:])
    for y, w in zip(moll.offsets, moll.weights):
        z = x - y.reshape((-1,) + (1,) * (x.ndim - 1))
        zc = np.clip(z, 0.0, L)
        counter[0] += int(np.any(zc != z, axis=0).sum())
        acc += w * spec(zc)
    return acc


@dataclass
class RegularizationInfo:
    eps: float
    margin: float
    mollifier_points: int
    clamped_evaluations: int
    partition_error: float


def admissible_eps(spec: TensorSpec, dom: BoxDomain) -> float:
    """Upper limit for eps: min(a/4, min_i L_i/8)."""
    return min(spec.verified_margin(dom) / 4, min(dom.extent) / 8)


def regularize(spec: TensorSpec, dom: BoxDomain, eps: float, return_info: bool = False):
    if spec.dim != dom.dim:
        raise ValueError("tensor spec and domain disagree on dimension")
    a = spec.verified_margin(dom)
    cap = min(a / 4, min(dom.extent) / 8)
    if not 0 < eps < cap:
        raise ValueError(f"eps = {eps} outside the admissible range (0, {cap:.4g})")
    x = dom.centers()
    moll = Mollifier.build(eps, dom)
    psi0, psis, _, _ = partition(x, dom.extent, a)
    shifts = face_shifts(x, dom.extent, a, eps)
    counter = [0]
    d = dom.dim
    out = np.zeros((d, d) + dom.cells)
    for i in range(d):
        out[i, i] = eps
    zero = np.zeros_like(x)
    for psi, s in zip([psi0] + psis, [zero] + shifts):
        on = psi > 0
        if not on.any():
            continue
        # evaluate only where this weight is active
        xs = (x + s)[:, on]
        vals = _mollified(spec, xs, moll, dom.extent, counter)
        out[:, :, on] += psi[on] * vals
    # symmetric storage takes the upper triangle; average first so rounding cannot break symmetry
    out = 0.5 * (out + np.swapaxes(out, 0, 1))
    field = SymTensorField.from_matrices(dom, out)
    if not return_info:
        return field
    total = psi0 + sum(psis)
    info = RegularizationInfo(eps, a, len(moll.weights), counter[0], float(np.abs(total - 1).max()))
    return field, info


# --- checks ---------------------------------------------------------------

@dataclass
class RegularizationReport:
    bound_ok: bool
    elliptic_ok: bool
    bound_margin: float  # (eps + |D|) - |D_eps|, nonnegative when bound_ok
    min_eig: float
    distance: float  # sup_x |D_eps(x) - D(x)| (spectral)

    @property
    def passed(self) -> bool:
        return self.bound_ok and self.elliptic_ok


def check_regularization(D: SymTensorField, D_eps: SymTensorField, eps: float,
                         tol: float = 1e-10) -> RegularizationReport:
    require_same(D.domain, D_eps.domain)
    lam_e = eigenvalues(D_eps)
    normD = float(np.abs(eigenvalues(D)).max())
    normDe = float(np.abs(lam_e).max())
    diff = SymTensorField(D.domain, D_eps.values - D.values)
    dist = float(np.abs(eigenvalues(diff)).max())
    margin = eps + normD - normDe
    min_eig = float(lam_e[..., 0].min())
    return RegularizationReport(margin >= -tol, min_eig >= eps - tol, margin, min_eig, dist)


def interior_stencil_mask(dom: BoxDomain) -> np.ndarray:
    """Cells whose centered-difference stencil stays inside the grid."""
    if dom.periodic:
        return np.ones(dom.cells, dtype=bool)
    mask = np.zeros(dom.cells, dtype=bool)
    mask[(slice(1, -1),) * dom.dim] = True
    return mask


def divergence(T: SymTensorField) -> np.ndarray:
    """Row-wise centered-difference divergence sum_j d_j T_ij, shape ``(d,) + cells``.

    Rows at the outer cell layer are one-sided for no-flux boxes.
    """
    dom = T.domain
    d = dom.dim
    h = dom.spacing
    out = np.zeros((d,) + dom.cells)
    for i in range(d):
        for j in range(d):
            comp = T.component(i, j)
            if dom.periodic:
                out[i] += (np.roll(comp, -1, axis=j) - np.roll(comp, 1, axis=j)) / (2 * h[j])
            else:
                out[i] += np.gradient(comp, h[j], axis=j)
    return out


def divergence_sup(T: SymTensorField, mask) -> float:
    """max over masked cells of |div T| (Euclidean over rows)."""
    mask = np.asarray(mask, dtype=bool) & interior_stencil_mask(T.domain)
    if not mask.any():
        raise ValueError("divergence mask selects no interior cells")
    div = divergence(T)
    return float(np.sqrt((div ** 2).sum(axis=0))[mask].max())


def distance_mask(spec: TensorSpec, dom: BoxDomain, min_dist: float) -> np.ndarray:
    """Cells whose centre is at least ``min_dist`` from the degeneracy set."""
    if spec.points is None:
        return np.ones(dom.cells, dtype=bool)
    x = np.moveaxis(dom.centers(), 0, -1)
    return spec.degeneracy.dist(x) >= min_dist


@dataclass
class EpsSweepRow:
    eps: float
    min_eig: float
    bound_margin: float
    distance: float
    modulus_bound: float
    divergence_sup: float
    clamped: int
    bound_ok: bool
    elliptic_ok: bool


def tensor_sweep(spec: TensorSpec, dom: BoxDomain, eps_list, mask_dist: float = 0.2):
    """Rows of the regularization audit plus overall pass flags."""
    D = evaluate(spec, dom)
    mask = distance_mask(spec, dom, mask_dist)
    rows = []
    for eps in eps_list:
        De, info = regularize(spec, dom, eps, return_info=True)
        rep = check_regularization(D, De, eps)
        rows.append(EpsSweepRow(eps, rep.min_eig, rep.bound_margin, rep.distance,
                                eps + spec.modulus(2 * eps), divergence_sup(De, mask),
                                info.clamped_evaluations, rep.bound_ok, rep.elliptic_ok))
    dists = [r.distance for r in rows]
    divs = [r.divergence_sup for r in rows]
    checks = {
        "bound": all(r.bound_ok for r in rows),
        "elliptic": all(r.elliptic_ok for r in rows),
        "distance_decreasing": all(b < a for a, b in zip(dists, dists[1:])),
        "distance_within_modulus": all(r.distance <= r.modulus_bound + 1e-10 for r in rows),
        "divergence_bounded": max(divs) <= 10 * min(divs) if min(divs) > 0 else max(divs) < 1e-8,
    }
    return rows, checks

