"""Conservative finite-volume integrator for myopic diffusion with nonlocal adhesion.

    dc/dt = div(J - c A c) + mu c (1 - c^(r-1)),    J_i = sum_j d_j (d_ij c)

Face fluxes are zero on no-flux boundaries, so the transport part telescopes
and the total mass changes only through the reaction term.  Time stepping is
Heun's method (SSP-RK2).
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adhesion import AdhesionForce, AdhesionKernel, apply_adhesion, build_kernel
from .fields import BoxDomain, ScalarField, SymTensorField, eigenvalues, require_same, save_snapshot
from .fractal import dim_condition
from .tensor import TensorSpec, evaluate, regularize

DIAGNOSTIC_COLUMNS = ["step", "t", "mass", "l1", "lr", "minc", "h1_B", "lrp1_B", "mass_residual"]
SCHEMES = ("centered", "upwind")


class StabilityError(RuntimeError):
    pass


class BlowUpError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    eps: float = 0.02
    mu: float = 1.0
    r: float = 4.0
    cfl: float = 0.9
    T: float = 0.5
    snapshot_stride: int = 1
    advection_scheme: str = "upwind"
    dt: float | None = None  # fixed step; None picks cfl * stability bound every step
    b_min_dist: float = 0.2  # subdomain B = cells at least this far from the degeneracy set
    allow_unstable: bool = False
    blowup_factor: float = 1e6

    def __post_init__(self):
        if not self.eps >= 0:
            raise ValueError("eps must be >= 0")
        if not self.mu >= 0:
            raise ValueError("growth rate mu must be >= 0")
        if not self.r >= 2:
            raise ValueError("reaction exponent r must be >= 2")
        if not 0 < self.cfl <= 1:
            raise ValueError("cfl must lie in (0, 1]")
        if not self.T > 0:
            raise ValueError("final time T must be positive")
        if int(self.snapshot_stride) < 1:
            raise ValueError("snapshot_stride must be >= 1")
        if self.advection_scheme not in SCHEMES:
            raise ValueError(f"advection_scheme must be one of {SCHEMES}")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def degenerate_direct(self) -> bool:
        return self.eps == 0


@dataclass(frozen=True)
class State:
    c: ScalarField
    t: float = 0.0

    def __post_init__(self):
        if not self.t >= 0:
            raise ValueError("time must be >= 0")


# --- spatial operators ----------------------------------------------------

def _fwd(a: np.ndarray, axis: int, periodic: bool) -> np.ndarray:
    """a[p + e] - a[p] on every face normal to ``axis`` (n faces periodic, n - 1 otherwise)."""
    if periodic:
        return np.roll(a, -1, axis=axis) - a
    return np.diff(a, axis=axis)


def _face_avg(a: np.ndarray, axis: int, periodic: bool) -> np.ndarray:
    if periodic:
        return 0.5 * (a + np.roll(a, -1, axis=axis))
    n = a.shape[axis]
    return 0.5 * (a.take(range(n - 1), axis=axis) + a.take(range(1, n), axis=axis))


def _face_pick(lo_val: np.ndarray, axis: int, periodic: bool, upper: bool) -> np.ndarray:
    """Cell value on the low (or high) side of every face."""
    if periodic:
        return np.roll(lo_val, -1, axis=axis) if upper else lo_val
    n = lo_val.shape[axis]
    return lo_val.take(range(1, n) if upper else range(n - 1), axis=axis)


def _centered(a: np.ndarray, axis: int, h: float, periodic: bool) -> np.ndarray:
    """Cellwise centered difference; one-sided on the outer layer of a no-flux box."""
    if periodic:
        return (np.roll(a, -1, axis=axis) - np.roll(a, 1, axis=axis)) / (2 * h)
    return np.gradient(a, h, axis=axis)


def _face_divergence(flux: np.ndarray, axis: int, h: float, periodic: bool) -> np.ndarray:
    """(F[p + 1/2] - F[p - 1/2]) / h with zero flux on boundary faces."""
    if periodic:
        return (flux - np.roll(flux, 1, axis=axis)) / h
    pad = [(0, 0)] * flux.ndim
    pad[axis] = (1, 1)
    return np.diff(np.pad(flux, pad), axis=axis) / h


def _active_components(D: SymTensorField) -> dict:
    """(i, j) -> cellwise entry for every entry that is not identically zero."""
    d = D.domain.dim
    comps = {}
    for i in range(d):
        for j in range(d):
            v = D.component(i, j)
            if np.any(v != 0):
                comps[(i, j)] = v
    return comps


def myopic_face_flux(c: ScalarField, D: SymTensorField, _comps: dict | None = None) -> list[np.ndarray]:
    """Face fluxes J_i = sum_j d_j (d_ij c), one array per face normal direction.

    Arrays hold interior faces only for no-flux boxes (boundary faces carry
    zero flux) and all n faces for periodic boxes, face k sitting between
    cells k and k + 1.
    """
    require_same(c.domain, D.domain)
    dom = c.domain
    h = dom.spacing
    per = dom.periodic
    comps = _active_components(D) if _comps is None else _comps
    out = []
    for i in range(dom.dim):
        shape = list(dom.cells)
        if not per:
            shape[i] -= 1
        J = np.zeros(shape)
        for j in range(dom.dim):
            if (i, j) not in comps:
                continue
            P = comps[(i, j)] * c.values
            if j == i:
                J += _fwd(P, i, per) / h[i]
            else:
                J += _face_avg(_centered(P, j, h[j], per), i, per)
        out.append(J)
    return out


@dataclass(eq=False)
class Model:
    """Everything the right-hand side needs, precomputed once per run."""

    D: SymTensorField
    kernel: AdhesionKernel | None
    cfg: SolverConfig
    _comps: dict = field(default=None, repr=False)
    max_eig: float = 0.0

    def __post_init__(self):
        if self.kernel is not None:
            require_same(self.D.domain, self.kernel.domain)
        self._comps = _active_components(self.D)
        self.max_eig = float(eigenvalues(self.D)[..., -1].max())

    @property
    def domain(self) -> BoxDomain:
        return self.D.domain

    def adhesion(self, c: ScalarField) -> np.ndarray:
        dom = self.domain
        if self.kernel is None or self.kernel.force.is_zero:
            return np.zeros((dom.dim,) + dom.cells)
        return apply_adhesion(self.kernel, c).values

    def reaction(self, c: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        if cfg.mu == 0:
            return np.zeros_like(c)
        return cfg.mu * c * (1.0 - np.maximum(c, 0.0) ** (cfg.r - 1))

    def rhs(self, c: ScalarField, Ac: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(dc/dt, A c) at the current density."""
        dom = self.domain
        h = dom.spacing
        per = dom.periodic
        if Ac is None:
            Ac = self.adhesion(c)
        J = myopic_face_flux(c, self.D, self._comps)
        out = self.reaction(c.values)
        advect = self.kernel is not None and not self.kernel.force.is_zero
        for i in range(dom.dim):
            flux = J[i]
            if advect:
                a_face = _face_avg(Ac[i], i, per)
                if self.cfg.advection_scheme == "centered":
                    c_face = _face_avg(c.values, i, per)
                else:
                    c_face = np.where(a_face > 0, _face_pick(c.values, i, per, False),
                                      _face_pick(c.values, i, per, True))
                flux = flux - c_face * a_face
            out = out + _face_divergence(flux, i, h[i], per)
        if not np.all(np.isfinite(out)):
            bad = np.argwhere(~np.isfinite(out))[0]
            raise FloatingPointError(f"non-finite right-hand side at cell {tuple(int(v) for v in bad)}")
        return out, Ac

    def stability_bound(self, c: ScalarField, Ac: np.ndarray) -> float:
        dom = self.domain
        d = dom.dim
        h = float(dom.spacing.min())
        bounds = [math.inf]
        if self.max_eig > 0:
            bounds.append(h * h / (2 * d * self.max_eig))
        amax = float(np.sqrt((Ac ** 2).sum(axis=0)).max()) if Ac.size else 0.0
        if amax > 0:
            bounds.append(h / (d * amax))
        if self.cfg.mu > 0:
            cm = float(np.maximum(c.values, 0.0).max()) if c.values.size else 0.0
            bounds.append(1.0 / (self.cfg.mu * self.cfg.r * max(cm ** (self.cfg.r - 1), 1.0)))
        return min(bounds)

    def step(self, state: State, dt: float, override: bool = False, _k1=None) -> State:
        """One Heun step; refuses dt above cfl * stability bound unless overridden."""
        c = state.c
        k1, Ac = _k1 if _k1 is not None else self.rhs(c)
        bound = self.cfg.cfl * self.stability_bound(c, Ac)
        if dt > bound * (1 + 1e-12) and not (override or self.cfg.allow_unstable):
            raise StabilityError(f"dt = {dt:.4g} exceeds cfl * stability bound {bound:.4g}")
        mid = ScalarField(c.domain, c.values + dt * k1)
        k2, _ = self.rhs(mid)
        return State(ScalarField(c.domain, c.values + 0.5 * dt * (k1 + k2)), state.t + dt)


def rhs(state: State, D: SymTensorField, kernel: AdhesionKernel | None, cfg: SolverConfig) -> ScalarField:
    return ScalarField(state.c.domain, Model(D, kernel, cfg).rhs(state.c)[0])


def step(state: State, dt: float, D: SymTensorField, kernel: AdhesionKernel | None,
         cfg: SolverConfig, override: bool = False) -> State:
    return Model(D, kernel, cfg).step(state, dt, override)


# --- trajectories ---------------------------------------------------------

@dataclass(eq=False)
class Trajectory:
    domain: BoxDomain
    cfg: SolverConfig
    times: list = field(default_factory=list)  # snapshot times
    snapshots: list = field(default_factory=list)  # ScalarField per snapshot time
    diagnostics: dict = field(default_factory=lambda: {k: [] for k in DIAGNOSTIC_COLUMNS})
    reaction: list = field(default_factory=list)  # mu * int(c - c^r) per step
    signed_mass_residual: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    max_undershoot: float = 0.0
    c0: ScalarField | None = None

    def series(self, name: str) -> np.ndarray:
        return np.asarray(self.diagnostics[name], dtype=float)

    @property
    def final(self) -> ScalarField:
        return self.snapshots[-1]

    @property
    def steps(self) -> int:
        return len(self.diagnostics["step"]) - 1


def subdomain_mask(spec: TensorSpec | None, dom: BoxDomain, min_dist: float) -> np.ndarray:
    """Cells of B = {dist(x, K) >= min_dist}; the whole box when K is empty."""
    if spec is None or spec.points is None:
        return np.ones(dom.cells, dtype=bool)
    if not min_dist > 0:
        raise ValueError("subdomain B must keep a positive distance from the degeneracy set")
    x = np.moveaxis(dom.centers(), 0, -1)
    mask = spec.degeneracy.dist(x) >= min_dist
    if not mask.any():
        raise ValueError("subdomain B is empty")
    return mask


def gradient_sq(c: ScalarField) -> np.ndarray:
    """|grad c|^2 per cell by centered differences."""
    dom = c.domain
    return sum(_centered(c.values, a, dom.spacing[a], dom.periodic) ** 2 for a in range(dom.dim))


class _Recorder:
    def __init__(self, traj: Trajectory, model: Model, mask: np.ndarray):
        self.traj = traj
        self.model = model
        self.mask = mask
        self.vol = traj.domain.cell_volume
        self.prev = None

    def _pointwise(self, c: ScalarField):
        v = c.values
        r = self.model.cfg.r
        R = float(self.model.reaction(v).sum() * self.vol) if self.model.cfg.mu > 0 else 0.0
        # mu * int (c - max(c,0)^r), matching the reaction used by the scheme
        g2 = float(gradient_sq(c)[self.mask].sum() * self.vol)
        lp1 = float((np.abs(v[self.mask]) ** (r + 1)).sum() * self.vol)
        return R, g2, lp1

    def record(self, step_no: int, state: State):
        traj = self.traj
        v = state.c.values
        r = self.model.cfg.r
        mass = float(v.sum() * self.vol)
        R, g2, lp1 = self._pointwise(state.c)
        if self.prev is None:
            h1 = lp = res = 0.0
        else:
            t0, m0, R0, g20, lp10, h10, lp0 = self.prev
            dt = state.t - t0
            h1 = h10 + 0.5 * dt * (g20 + g2)
            lp = lp0 + 0.5 * dt * (lp10 + lp1)
            res = mass - m0 - 0.5 * dt * (R0 + R)
        self.prev = (state.t, mass, R, g2, lp1, h1, lp)
        d = traj.diagnostics
        d["step"].append(step_no)
        d["t"].append(state.t)
        d["mass"].append(mass)
        d["l1"].append(float(np.abs(v).sum() * self.vol))
        d["lr"].append(float((np.abs(v) ** r).sum() * self.vol) ** (1 / r))
        d["minc"].append(float(v.min()))
        d["h1_B"].append(h1)
        d["lrp1_B"].append(lp ** (1 / (r + 1)))
        d["mass_residual"].append(abs(res))
        traj.reaction.append(R)
        traj.signed_mass_residual.append(res)


def integrate(c0: ScalarField, model: Model, mask: np.ndarray | None = None) -> Trajectory:
    """March from c0 to cfg.T, recording diagnostics every step and snapshots every stride."""
    cfg = model.cfg
    dom = c0.domain
    require_same(dom, model.domain)
    if np.any(c0.values < 0):
        raise ValueError("initial density must be nonnegative")
    if mask is None:
        mask = np.ones(dom.cells, dtype=bool)
    traj = Trajectory(dom, cfg, c0=c0)
    rec = _Recorder(traj, model, mask)
    state = State(c0, 0.0)
    rec.record(0, state)
    traj.times.append(0.0)
    traj.snapshots.append(c0)
    c0max = float(np.abs(c0.values).max())
    n = 0
    while state.t < cfg.T * (1 - 1e-14):
        k1 = model.rhs(state.c)
        if cfg.dt is not None:
            dt = cfg.dt
        else:
            dt = cfg.cfl * model.stability_bound(state.c, k1[1])
        last = state.t + dt >= cfg.T * (1 - 1e-12)
        if last:
            dt = cfg.T - state.t
        state = model.step(state, dt, _k1=k1)
        if last:
            state = State(state.c, cfg.T)
        n += 1
        cmax = float(np.abs(state.c.values).max())
        if cmax > cfg.blowup_factor * max(c0max, 1e-300) and cmax > 0:
            raise BlowUpError(f"|c| reached {cmax:.3g} at t = {state.t:.4g} (step {n})")
        rec.record(n, state)
        traj.max_undershoot = max(traj.max_undershoot, -float(state.c.values.min()))
        if n % cfg.snapshot_stride == 0 or last:
            traj.times.append(state.t)
            traj.snapshots.append(state.c)
    if c0max > 0 and traj.max_undershoot > 1e-6 * c0max:
        traj.warnings.append(f"undershoot {traj.max_undershoot:.3g} below zero")
    return traj


def admissibility_warnings(spec: TensorSpec | None, d: int, r: float) -> list[str]:
    """Reasons the (d, r, degeneracy set) triple falls outside the admissible regime."""
    est = -math.inf if spec is None or spec.points is None else 0.0
    cond = dim_condition(est, d, r)
    return list(cond.reasons)


def build_model(spec: TensorSpec, F: AdhesionForce, dom: BoxDomain, cfg: SolverConfig) -> Model:
    if cfg.degenerate_direct:
        D = evaluate(spec, dom)
    else:
        D = regularize(spec, dom, cfg.eps)
    kernel = None if F.is_zero else build_kernel(F, dom)
    return Model(D, kernel, cfg)


def run(c0: ScalarField, spec: TensorSpec, F: AdhesionForce, cfg: SolverConfig) -> Trajectory:
    dom = c0.domain
    notes = admissibility_warnings(spec, dom.dim, cfg.r)
    if cfg.degenerate_direct:
        notes.append("eps = 0: degenerate-direct mode")
    for msg in notes:
        warnings.warn(msg, stacklevel=2)
    model = build_model(spec, F, dom, cfg)
    traj = integrate(c0, model, subdomain_mask(spec, dom, cfg.b_min_dist))
    traj.warnings = notes + traj.warnings
    return traj


def with_dt(cfg: SolverConfig, dt: float) -> SolverConfig:
    return replace(cfg, dt=dt)


def mass_balance_residual(traj: Trajectory) -> np.ndarray:
    """Per-step |M_{n+1} - M_n - dt/2 (R_n + R_{n+1})|."""
    if traj.steps < 1:
        raise ValueError("need at least two recorded steps")
    return traj.series("mass_residual")[1:]


def subdomain_diagnostics(traj: Trajectory) -> dict:
    """Time-accumulated |grad c|^2 on B and the L^{r+1}(B x (0, t)) norm, per step."""
    return {"h1_B": traj.series("h1_B"), "lrp1_B": traj.series("lrp1_B")}


# --- persistence ----------------------------------------------------------

def write_diagnostics(traj: Trajectory, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DIAGNOSTIC_COLUMNS)
        cols = [traj.diagnostics[k] for k in DIAGNOSTIC_COLUMNS]
        for row in zip(*cols):
            w.writerow([str(int(row[0]))] + [repr(float(v)) for v in row[1:]])
    return path


def read_diagnostics(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != DIAGNOSTIC_COLUMNS:
        raise ValueError(f"unexpected diagnostics header {rows[0]}")
    data = np.array(rows[1:], dtype=float).reshape(-1, len(DIAGNOSTIC_COLUMNS))
    return {k: data[:, i] for i, k in enumerate(DIAGNOSTIC_COLUMNS)}


def write_snapshots(traj: Trajectory, directory) -> list[Path]:
    directory = Path(directory)
    paths = []
    for k, (t, c) in enumerate(zip(traj.times, traj.snapshots)):
        paths.append(save_snapshot(directory / f"c_{k:05d}", c, name="c", time=t))
    return paths


# --- initial data ---------------------------------------------------------

INITIAL_KINDS = ("constant", "cosine-bump", "gaussian", "smoothed-indicator", "sine")


def initial_density(dom: BoxDomain, kind: str, **p) -> ScalarField:
    """Grid samples of an initial closure.

    constant: value. cosine-bump: base + amp * cos^2 profile of radius width.
    gaussian: base + amp * exp(-|x - center|^2 / (2 width^2)).
    smoothed-indicator: base + amp * (1 - tanh((|x - center| - radius) / width)) / 2.
    """
    x = dom.centers()
    ctr = np.asarray(p.get("center", np.array(dom.extent) / 2), dtype=float).reshape((-1,) + (1,) * dom.dim)
    base = float(p.get("base", 0.0))
    amp = float(p.get("amp", 1.0))
    width = float(p.get("width", 0.3))
    rr = np.sqrt(((x - ctr) ** 2).sum(axis=0))
    if kind == "constant":
        v = np.full(dom.cells, float(p.get("value", 0.0)))
    elif kind == "cosine-bump":
        v = base + amp * np.where(rr < width, np.cos(np.pi * rr / (2 * width)) ** 2, 0.0)
    elif kind == "gaussian":
        v = base + amp * np.exp(-rr ** 2 / (2 * width ** 2))
    elif kind == "smoothed-indicator":
        v = base + amp * 0.5 * (1 - np.tanh((rr - float(p.get("radius", 0.5))) / width))
    elif kind == "sine":
        axis = int(p.get("axis", 0))
        k = float(p.get("wavenumber", 1))
        v = base + amp * np.sin(2 * np.pi * k * x[axis] / dom.extent[axis])
    else:
        raise ValueError(f"unknown initial density {kind!r}")
    if np.any(v < 0):
        raise ValueError("initial density must be nonnegative")
    return ScalarField(dom, v)
