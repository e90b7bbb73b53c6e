"""Very weak residual of computed trajectories and distances between trajectories.

For eta(x, t) = eta1(x) eta2(t) the identity checked is

    -int int c d_t eta - int c0 eta(., 0)
        = int int c D : D^2 eta + int int c (A c) . grad eta + mu int int c (1 - c^(r-1)) eta

with midpoint quadrature in space and the trapezoid rule over stored snapshots.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adhesion import AdhesionKernel, apply_adhesion
from .fields import BoxDomain, SymTensorField, require_same
from .solver import Trajectory
from .tensor import smoothstep

MODES = ("constant", "collar-bump", "polynomial-interior")
MAX_STRIDE = 10


def _smoothstep_derivs(u):
    """S, S', S'' of the quintic ramp, clipped outside [0, 1]."""
    inside = (u > 0) & (u < 1)
    t = np.clip(u, 0.0, 1.0)
    s = smoothstep(t)
    s1 = np.where(inside, 30 * t ** 2 * (1 - t) ** 2, 0.0)
    s2 = np.where(inside, 60 * t * (1 - t) * (1 - 2 * t), 0.0)
    return s, s1, s2


@dataclass(frozen=True)
class TestFunction:
    """eta1(x) eta2(t) with eta1 constant on the collar {dist(x, boundary) < collar}."""

    __test__ = False  # keep pytest from collecting this class

    mode: str
    extent: tuple
    collar: float  # a/4: eta1 is constant within this distance of the boundary
    T_support: float
    ramp: float | None = None  # width of the transition to the interior (default: collar)
    poly_axes: tuple = (0, 1)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown test function mode {self.mode!r}")
        if not self.T_support > 0:
            raise ValueError("temporal support must be positive")
        if not self.collar > 0 or self.collar + self.ramp_width > min(self.extent) / 2:
            raise ValueError("collar and ramp do not fit in the box")

    @property
    def ramp_width(self) -> float:
        return self.collar if self.ramp is None else self.ramp

    def _ramp(self, s, L):
        """1-D factor: 0 within collar of either end, 1 beyond 2 * collar; with derivatives."""
        lo = s < L / 2
        dist = np.where(lo, s, L - s)
        sign = np.where(lo, 1.0, -1.0)
        w = self.ramp_width
        v, v1, v2 = _smoothstep_derivs((dist - self.collar) / w)
        return v, v1 * sign / w, v2 / w ** 2

    def spatial(self, x):
        """eta1, grad eta1, hess eta1 at points x of shape ``(d,) + S``."""
        x = np.asarray(x, dtype=float)
        d = x.shape[0]
        S = x.shape[1:]
        if self.mode == "constant":
            return np.ones(S), np.zeros((d,) + S), np.zeros((d, d) + S)
        f, f1, f2 = zip(*(self._ramp(x[a], self.extent[a]) for a in range(d)))

        def prod(skip):
            out = np.ones(S)
            for b in range(d):
                if b not in skip:
                    out = out * f[b]
            return out

        chi = prod(())
        g = np.stack([f1[a] * prod((a,)) for a in range(d)])
        H = np.empty((d, d) + S)
        for a in range(d):
            for b in range(d):
                H[a, b] = f2[a] * prod((a,)) if a == b else f1[a] * f1[b] * prod((a, b))
        if self.mode == "collar-bump":
            return chi, g, H
        i, j = self.poly_axes
        p = x[i] * x[j]
        gp = np.zeros((d,) + S)
        gp[i] += x[j]
        gp[j] += x[i]
        Hp = np.zeros((d, d))
        Hp[i, j] += 1.0
        Hp[j, i] += 1.0
        val = chi * p
        grad = p * g + chi * gp
        hess = p * H + g[:, None] * gp[None, :] + gp[:, None] * g[None, :] + chi * Hp.reshape((d, d) + (1,) * len(S))
        return val, grad, hess

    def temporal(self, t):
        """eta2 and its time derivative: 1 - S(t / T_support), zero from T_support on."""
        u = np.asarray(t, dtype=float) / self.T_support
        s, s1, _ = _smoothstep_derivs(u)
        return 1.0 - s, -s1 / self.T_support


def make_test_function(mode: str, T_support: float, dom: BoxDomain, margin: float,
                       horizon: float | None = None, ramp: float | None = None) -> TestFunction:
    """Constant within a/4 of the boundary (a = verified margin); the ramp to the
    interior spans ``ramp`` (default a/4)."""
    if horizon is not None and not T_support < horizon:
        raise ValueError("temporal support must end before the run horizon")
    return TestFunction(mode, tuple(dom.extent), margin / 4, float(T_support), ramp)


def _trapezoid(y, t) -> float:
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    return float((0.5 * (y[1:] + y[:-1]) * np.diff(t)).sum())


@dataclass
class WeakTerms:
    """Signed pieces of the identity (left side minus right side = residual)."""

    time_term: float  # -int int c d_t eta
    initial_term: float  # -int c0 eta(., 0)
    diffusion: float
    adhesion: float
    reaction: float

    @property
    def residual(self) -> float:
        return (self.time_term + self.initial_term) - (self.diffusion + self.adhesion + self.reaction)


def weak_terms(traj: Trajectory, eta: TestFunction, D: SymTensorField,
               kernel: AdhesionKernel | None, mu: float, r: float) -> WeakTerms:
    dom = traj.domain
    require_same(dom, D.domain)
    if kernel is not None:
        require_same(dom, kernel.domain)
    times = np.asarray(traj.times)
    if eta.T_support > times[-1] + 1e-12:
        raise ValueError("test function support exceeds the trajectory horizon")
    if traj.cfg.snapshot_stride > MAX_STRIDE:
        raise ValueError(f"snapshot stride {traj.cfg.snapshot_stride} too coarse (max {MAX_STRIDE})")
    vol = dom.cell_volume
    e1, g1, H1 = eta.spatial(dom.centers())
    d = dom.dim
    DH = sum(D.component(i, j) * H1[i, j] for i in range(d) for j in range(d))
    e2, de2 = eta.temporal(times)
    live = np.nonzero(e2 != 0)[0]
    last = min(len(times) - 1, (live[-1] + 1) if len(live) else 0)
    tt, dd, aa, rr = (np.zeros(len(times)) for _ in range(4))
    for k in range(last + 1):
        c = traj.snapshots[k].values
        tt[k] = -float((c * e1).sum() * vol) * de2[k]
        if e2[k] == 0:
            continue
        dd[k] = float((c * DH).sum() * vol) * e2[k]
        if kernel is not None and not kernel.force.is_zero and np.any(g1 != 0):
            Ac = apply_adhesion(kernel, traj.snapshots[k]).values
            aa[k] = float((c * (Ac * g1).sum(axis=0)).sum() * vol) * e2[k]
        if mu != 0:
            reac = c * (1.0 - np.maximum(c, 0.0) ** (r - 1))
            rr[k] = mu * float((reac * e1).sum() * vol) * e2[k]
    c0 = traj.snapshots[0].values
    return WeakTerms(_trapezoid(tt, times), -float((c0 * e1).sum() * vol) * e2[0],
                     _trapezoid(dd, times), _trapezoid(aa, times), _trapezoid(rr, times))


def weak_residual(traj: Trajectory, eta: TestFunction, D: SymTensorField,
                  kernel: AdhesionKernel | None, mu: float, r: float, signed: bool = False) -> float:
    res = weak_terms(traj, eta, D, kernel, mu, r).residual
    return res if signed else abs(res)


def integrated_mass_residual(traj: Trajectory, eta: TestFunction) -> float:
    """Per-step mass-balance residuals weighted by eta2 at the step midpoint, summed."""
    t = traj.series("t")
    e2, _ = eta.temporal(0.5 * (t[1:] + t[:-1]))
    return float((np.asarray(traj.signed_mass_residual[1:]) * e2).sum())


def quadrature_tolerance(traj: Trajectory, eta: TestFunction, D: SymTensorField,
                         kernel: AdhesionKernel | None, mu: float, r: float) -> float:
    """Richardson estimate of the temporal trapezoid error: |R(all) - R(every other)| / 3 per term."""
    sub = Trajectory(traj.domain, traj.cfg, times=traj.times[::2], snapshots=traj.snapshots[::2])
    if sub.times[-1] != traj.times[-1]:
        sub.times.append(traj.times[-1])
        sub.snapshots.append(traj.snapshots[-1])
    full = weak_terms(traj, eta, D, kernel, mu, r)
    half = weak_terms(sub, eta, D, kernel, mu, r)
    pieces = ("time_term", "diffusion", "adhesion", "reaction")
    return sum(abs(getattr(full, p) - getattr(half, p)) for p in pieces) / 3


def eps_cauchy(traj_a: Trajectory, traj_b: Trajectory) -> float:
    """|| c_a - c_b ||_{L^1(box x (0, T))}, trapezoid over shared snapshot times."""
    require_same(traj_a.domain, traj_b.domain)
    ta, tb = np.asarray(traj_a.times), np.asarray(traj_b.times)
    if ta.shape != tb.shape or not np.allclose(ta, tb, rtol=0, atol=1e-12):
        raise ValueError("trajectories have different snapshot times")
    vol = traj_a.domain.cell_volume
    y = [float(np.abs(a.values - b.values).sum() * vol) for a, b in zip(traj_a.snapshots, traj_b.snapshots)]
    return _trapezoid(y, ta)


def empirical_orders(h, residuals) -> list[float]:
    """log2 of successive residual ratios for a halving sequence of h."""
    h = np.asarray(h, dtype=float)
    res = np.asarray(residuals, dtype=float)
    return [float(np.log(res[k] / res[k + 1]) / np.log(h[k] / h[k + 1])) for k in range(len(res) - 1)]
