"""The acceptance suite: one function per criterion, each returning a CriterionResult."""
from __future__ import annotations

import math
import tempfile
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adhesion import (AdhesionForce, AdhesionKernel, PotentialGradient, adhesion_via_potential,
                       apply_adhesion, build_kernel, unit_ball_volume)
from .config import parse_config, reference_config
from .fields import BoxDomain, ScalarField, SymTensorField
from .fractal import CompactSet, dyadic_schedule, upper_box_dim, verify_cutoff
from .solver import Model, SolverConfig, build_model, initial_density, integrate, subdomain_mask
from .tensor import TensorSpec, evaluate, tensor_sweep
from .weakform import (empirical_orders, eps_cauchy, integrated_mass_residual, make_test_function,
                       quadrature_tolerance, weak_terms)


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    data: dict = field(default_factory=dict, repr=False)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.number:2d} {self.name}: {self.detail} ({self.seconds:.1f} s)"


def _reference():
    return parse_config(reference_config())


# --- 1 ---------------------------------------------------------------------

def adhesion_oracle_equivalence(sign_fault: bool = False, seed: int = 0, fields: int = 20,
                                budget: float = 10.0) -> CriterionResult:
    """Gather route against potential-scatter route on random fields, d = 3, n = 16, reference box."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    F = AdhesionForce("hat", 4.0)
    worst = 0.0
    for k in range(fields):
        dom = BoxDomain.cube(3, 2.0, 16, "periodic" if k % 2 else "no-flux")
        K = build_kernel(F, dom)
        if sign_fault:
            K = AdhesionKernel(dom, F, K.offsets, -K.weights)
        c = ScalarField(dom, rng.uniform(0, 1, dom.cells))
        a = apply_adhesion(K, c, "direct").values
        b = adhesion_via_potential(PotentialGradient(F, 3), c).values
        worst = max(worst, float(np.abs(a - b).max() / np.abs(b).max()))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and dt < budget
    return CriterionResult(1, "adhesion oracle equivalence", ok,
                           f"max relative difference {worst:.2e} over {fields} fields", dt,
                           {"max_rel": worst})


# --- 2 ---------------------------------------------------------------------

def gaussian_adhesion_oracle(X, center, sigma, F: AdhesionForce, nodes: int = 64) -> np.ndarray:
    """A c at points X (N, 3) for c = exp(-|y - center|^2 / (2 sigma^2)) extended to all of R^3.

    The angular integral of the Gaussian over the unit sphere is closed form,
    leaving a Gauss-Legendre rule in the radius.
    """
    X = np.atleast_2d(X)
    rho, w = np.polynomial.legendre.leggauss(nodes)
    rho, w = (rho + 1) / 2, w / 2
    v = X - center
    s = np.sqrt((v ** 2).sum(-1))
    vhat = v / np.where(s > 0, s, 1.0)[:, None]
    out = np.zeros(len(X))
    for p, wp in zip(rho, w):
        k = p * s / sigma ** 2
        ks = np.where(k > 1e-6, k, 1.0)
        # int_{S^2} (omega . vhat) exp(-k omega . vhat) d omega
        ang = np.where(k > 1e-6, -4 * np.pi * (ks * np.cosh(ks) - np.sinh(ks)) / ks ** 2, -4 * np.pi * k / 3)
        out += wp * F(p) * p ** 2 * np.exp(-(s ** 2 + p ** 2) / (2 * sigma ** 2)) * ang
    return out[:, None] * vhat / unit_ball_volume(3)


def adhesion_quadrature_convergence(budget: float = 60.0) -> CriterionResult:
    """Max error over central cells at h = 1/8 and 1/16 on (0, 4)^3; ratio in [3.2, 4.8]."""
    t0 = time.perf_counter()
    F = AdhesionForce("hat", 4.0)
    center, sigma = np.array([2.0, 2.0, 2.0]), 0.4
    errs = []
    for n in (32, 64):
        dom = BoxDomain.cube(3, 4.0, n)
        x = np.moveaxis(dom.centers(), 0, -1)
        c = ScalarField(dom, np.exp(-((x - center) ** 2).sum(-1) / (2 * sigma ** 2)))
        A = apply_adhesion(build_kernel(F, dom), c, "fft").values
        sel = np.abs(x - center).max(-1) <= 0.75
        exact = gaussian_adhesion_oracle(x[sel], center, sigma, F)
        errs.append(float(np.sqrt(((A[:, sel].T - exact) ** 2).sum(-1)).max()))
    ratio = errs[0] / errs[1]
    dt = time.perf_counter() - t0
    ok = 3.2 <= ratio <= 4.8 and dt < budget
    return CriterionResult(2, "adhesion quadrature convergence", ok,
                           f"errors {errs[0]:.3e} -> {errs[1]:.3e}, ratio {ratio:.3f}", dt,
                           {"errors": errs, "ratio": ratio})


# --- 3 ---------------------------------------------------------------------

def regularization_guarantees(budget: float = 60.0) -> CriterionResult:
    t0 = time.perf_counter()
    cfg = _reference()
    rows, checks = tensor_sweep(cfg.spec, cfg.domain, [0.04, 0.02, 0.01], 0.2)
    dt = time.perf_counter() - t0
    wanted = ("bound", "elliptic", "distance_decreasing", "divergence_bounded")
    ok = all(checks[k] for k in wanted) and dt < budget
    divs = [r.divergence_sup for r in rows]
    detail = (f"min-eig margin {min(r.min_eig - r.eps for r in rows):.2e}, "
              f"distances {', '.join(f'{r.distance:.4f}' for r in rows)}, "
              f"divergence ratio {max(divs) / min(divs):.2f}")
    return CriterionResult(3, "regularization guarantees", ok, detail, dt, {"rows": rows, "checks": checks})


# --- 4 ---------------------------------------------------------------------

def mass_law(steps: int = 1000) -> CriterionResult:
    t0 = time.perf_counter()
    ref = _reference()
    spec, F = ref.spec, ref.force
    drift = 0.0
    for mode in ("no-flux", "periodic"):
        dom = BoxDomain.cube(3, 2.0, 16, mode)
        c0 = initial_density(dom, **ref.initial)
        probe = build_model(spec, F, dom, replace(ref.solver, mu=0.0))
        dt = 0.5 * ref.solver.cfl * probe.stability_bound(c0, probe.adhesion(c0))  # headroom as c aggregates
        cfg = replace(ref.solver, mu=0.0, dt=dt, T=steps * dt, snapshot_stride=steps)
        traj = integrate(c0, Model(probe.D, probe.kernel, cfg))
        m = traj.series("mass")
        drift = max(drift, float(np.abs(m - m[0]).max() / m[0]))
    dom = BoxDomain.cube(3, 2.0, 16)
    c0 = initial_density(dom, **ref.initial)
    cfg = replace(ref.solver, T=0.5, snapshot_stride=100)
    traj = integrate(c0, build_model(spec, F, dom, cfg))
    t = traj.series("t")
    l1 = traj.series("l1")
    gron = float((l1 / (np.exp(cfg.mu * t) * l1[0])).max())
    ok = drift <= 1e-12 and gron <= 1 + 1e-6
    return CriterionResult(4, "mass law", ok,
                           f"mu=0 relative drift {drift:.2e} over {steps} steps; "
                           f"max l1/(e^(mu t) l1(0)) = {gron:.6f}", time.perf_counter() - t0,
                           {"drift": drift, "gronwall": gron})


# --- 5 ---------------------------------------------------------------------

def logistic_oracle() -> CriterionResult:
    t0 = time.perf_counter()
    dom = BoxDomain.cube(3, 1.0, 4, "periodic")
    cfg = SolverConfig(eps=0.0, mu=1.0, r=2.0, T=2.0, dt=1e-3, snapshot_stride=1)
    model = Model(SymTensorField.identity(dom), None, cfg)
    traj = integrate(ScalarField.constant(dom, 0.5), model)
    t = np.asarray(traj.times)
    exact = 0.5 * np.exp(t) / (1 + 0.5 * np.expm1(t))
    err = max(float(np.abs(c.values - e).max()) for c, e in zip(traj.snapshots, exact))
    return CriterionResult(5, "logistic oracle", err <= 1e-6, f"sup error {err:.2e}",
                           time.perf_counter() - t0, {"error": err})


# --- 6 ---------------------------------------------------------------------

def heat_oracle(n: int = 64) -> CriterionResult:
    t0 = time.perf_counter()
    dom = BoxDomain.cube(3, 1.0, n, "periodic")
    cfg = SolverConfig(eps=0.0, mu=0.0, r=2.0, T=0.05, snapshot_stride=10 ** 9)
    c0 = initial_density(dom, "sine", base=1.0, amp=0.1, axis=0)
    traj = integrate(c0, Model(SymTensorField.identity(dom), None, cfg))
    x = dom.centers()[0]
    amp = 2 * float(((traj.final.values - 1.0) * np.sin(2 * np.pi * x)).mean()) / 0.1
    exact = math.exp(-4 * math.pi ** 2 * cfg.T)
    rel = abs(amp / exact - 1)
    return CriterionResult(6, "heat oracle", rel <= 0.01,
                           f"amplitude ratio {amp:.6f} vs {exact:.6f} (rel {rel:.2e})",
                           time.perf_counter() - t0, {"rel": rel})


# --- 7 ---------------------------------------------------------------------

def box_dimension(budget: float = 30.0) -> CriterionResult:
    t0 = time.perf_counter()
    sched = dyadic_schedule(1, 8)
    point = upper_box_dim(CompactSet.finite([[0.37, 0.51, 0.23]]), sched).estimate
    seg = upper_box_dim(CompactSet.segment([0, 0, 0], [1, 0, 0]), sched).estimate
    cantor = upper_box_dim(CompactSet.cantor(8, [0.0, 0.3, 0.3]), sched).estimate
    dt = time.perf_counter() - t0
    target = math.log(2) / math.log(3)
    ok = point <= 0.05 and abs(seg - 1) <= 0.15 and abs(cantor - target) <= 0.1 and dt < budget
    return CriterionResult(7, "box dimension", ok,
                           f"point {point:.3f}, segment {seg:.3f}, cantor {cantor:.3f}", dt,
                           {"point": point, "segment": seg, "cantor": cantor})


# --- 8 ---------------------------------------------------------------------

def cutoff_properties(budget: float = 60.0) -> CriterionResult:
    t0 = time.perf_counter()
    rep = verify_cutoff(CompactSet.finite([[1.0, 1.0, 1.0]]), 4.0, dyadic_schedule(3, 7))
    dt = time.perf_counter() - t0
    wanted = ("range", "one_near_K", "support", "grad_stable", "hess_stable", "key_limit_decreasing")
    ok = all(rep.checks[k] for k in wanted) and dt < budget
    key = [r.key_limit for r in rep.rows]
    return CriterionResult(8, "cutoff properties", ok,
                           f"key-limit {key[0]:.1f} -> {key[-1]:.1f}, failed: "
                           f"{[k for k in wanted if not rep.checks[k]] or 'none'}", dt, {"report": rep})


# --- 9 ---------------------------------------------------------------------

def common_dt(ref, eps_values) -> float:
    """One step size admissible for every member of an eps schedule (at t = 0)."""
    c0 = initial_density(ref.domain, **ref.initial)
    out = math.inf
    for eps in eps_values:
        m = build_model(ref.spec, ref.force, ref.domain, replace(ref.solver, eps=eps))
        out = min(out, ref.solver.cfl * m.stability_bound(c0, m.adhesion(c0)))
    return out


def eps_cauchy_sweep(budget: float = 600.0) -> CriterionResult:
    t0 = time.perf_counter()
    ref = _reference()
    eps_values = ref.eps_schedule
    dt = common_dt(ref, eps_values)
    c0 = initial_density(ref.domain, **ref.initial)
    mask = subdomain_mask(ref.spec, ref.domain, ref.solver.b_min_dist)
    trajs = []
    for eps in eps_values:
        cfg = replace(ref.solver, eps=eps, dt=dt)
        trajs.append(integrate(c0, build_model(ref.spec, ref.force, ref.domain, cfg), mask))
    dist = [eps_cauchy(a, b) for a, b in zip(trajs, trajs[1:])]
    h1 = [t.series("h1_B")[-1] for t in trajs]
    lp = [t.series("lrp1_B")[-1] for t in trajs]
    sec = time.perf_counter() - t0
    decreasing = all(b < a for a, b in zip(dist, dist[1:]))
    bounded = max(h1) / min(h1) <= 10 and max(lp) / min(lp) <= 10
    ok = decreasing and bounded and sec < budget
    return CriterionResult(9, "eps-Cauchy", ok,
                           f"distances {', '.join(f'{d:.3e}' for d in dist)}; "
                           f"h1_B ratio {max(h1) / min(h1):.3f}, lrp1_B ratio {max(lp) / min(lp):.3f}", sec,
                           {"distances": dist, "h1_B": h1, "lrp1_B": lp, "eps": eps_values})


# --- 10 --------------------------------------------------------------------

WEAK_LEVELS = (16, 32)


def _fmt(values) -> str:
    return ", ".join(f"{v:.3e}" for v in values)


def weak_residual_study(budget: float = 600.0, levels=WEAK_LEVELS) -> CriterionResult:
    """Reference run at its own eps under (h, dt) halving; the residual is taken against the limit tensor.

    The residual against the regularized tensor of the same runs is reported alongside.
    """
    t0 = time.perf_counter()
    ref = _reference()
    a = ref.spec.verified_margin(ref.domain)
    T_s = float(ref.audit.get("T_support", 0.4))
    ramp = ref.audit.get("ramp")
    cfg = replace(ref.solver, snapshot_stride=2)
    hs, res, res_eps = [], [], []
    const_gap = const_tol = None
    for n in levels:
        dom = BoxDomain.cube(3, ref.domain.extent[0], n)
        model = build_model(ref.spec, ref.force, dom, cfg)
        traj = integrate(initial_density(dom, **ref.initial), model, subdomain_mask(ref.spec, dom, cfg.b_min_dist))
        D = evaluate(ref.spec, dom)
        eta = make_test_function("polynomial-interior", T_s, dom, a, horizon=cfg.T, ramp=ramp)
        hs.append(float(dom.spacing[0]))
        res.append(abs(weak_terms(traj, eta, D, model.kernel, cfg.mu, cfg.r).residual))
        res_eps.append(abs(weak_terms(traj, eta, model.D, model.kernel, cfg.mu, cfg.r).residual))
        if n == levels[-1]:
            one = make_test_function("constant", T_s, dom, a, horizon=cfg.T)
            w = weak_terms(traj, one, D, model.kernel, cfg.mu, cfg.r).residual
            const_gap = abs(w - integrated_mass_residual(traj, one))
            const_tol = quadrature_tolerance(traj, one, D, model.kernel, cfg.mu, cfg.r)
    orders = empirical_orders(hs, res)
    orders_eps = empirical_orders(hs, res_eps)
    sec = time.perf_counter() - t0
    ok = const_gap <= const_tol and min(orders) >= 1.5 and sec < budget
    return CriterionResult(10, "weak residual", ok,
                           f"constant-eta gap {const_gap:.2e} (tol {const_tol:.2e}); residuals {_fmt(res)}, "
                           f"order {min(orders):.2f}; against D_eps {_fmt(res_eps)}, order {min(orders_eps):.2f}",
                           sec, {"h": hs, "residuals": res, "orders": orders, "residuals_eps": res_eps,
                                 "orders_eps": orders_eps, "const_gap": const_gap, "const_tol": const_tol})


# --- 11 --------------------------------------------------------------------

def determinism(raw: dict | None = None) -> CriterionResult:
    from .cli import execute_run

    t0 = time.perf_counter()
    cfg = parse_config(raw or reference_config())
    with tempfile.TemporaryDirectory() as tmp:
        blobs = []
        for k in range(2):
            out = Path(tmp) / f"run{k}"
            execute_run(cfg, out)
            blobs.append((out / "diagnostics.csv").read_bytes())
    same = blobs[0] == blobs[1]
    return CriterionResult(11, "determinism", same,
                           "diagnostics bit-identical" if same else "diagnostics differ",
                           time.perf_counter() - t0)


CRITERIA = {
    1: adhesion_oracle_equivalence,
    2: adhesion_quadrature_convergence,
    3: regularization_guarantees,
    4: mass_law,
    5: logistic_oracle,
    6: heat_oracle,
    7: box_dimension,
    8: cutoff_properties,
    9: eps_cauchy_sweep,
    10: weak_residual_study,
    11: determinism,
}


def run_all(only=None, sign_fault: bool = False, seed: int = 0, echo=print) -> list[CriterionResult]:
    results = []
    for k, fn in CRITERIA.items():
        if only and k not in only:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = fn(sign_fault=sign_fault, seed=seed) if k == 1 else fn()
        if echo is not None:
            echo(res.line())
        results.append(res)
    return results
