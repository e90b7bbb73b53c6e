"""Command line: run, sweep, dim, cutoff, tensor-check, weak-residual, verify.

Exit codes: 0 success, 1 audit or criterion failure (or a run error), 2 invalid config.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import platform
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, compact_set_from, load_config, parse_config, reference_config
from .fields import BoxDomain, ScalarField, load_snapshot
from .fractal import CompactSet, dim_condition, upper_box_dim, verify_cutoff
from .solver import (DIAGNOSTIC_COLUMNS, SolverConfig, Trajectory, build_model, initial_density, integrate,
                     read_diagnostics, subdomain_mask, write_diagnostics, write_snapshots)
from .tensor import evaluate, regularize, check_regularization, tensor_sweep
from .weakform import (MODES as ETA_MODES, eps_cauchy, integrated_mass_residual, make_test_function,
                       quadrature_tolerance, weak_terms)

OK, FAILED, INVALID = 0, 1, 2


# --- output helpers -------------------------------------------------------

def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("numpy", "scipy", "numba", "jsonschema", "artifact"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Path, cfg: RunConfig, extra: dict | None = None) -> Path:
    """Config echo, admissibility report, versions and a checksum for every other file in ``out``."""
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[p.relative_to(out).as_posix()] = sha256(p)
    doc = {"config": cfg.raw, "admissibility": cfg.admissibility(), "warnings": cfg.warnings,
           "seed": cfg.seed, "versions": _versions(), "files": files}
    doc.update(extra or {})
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, default=float))
    return path


def write_table(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def error_record(command: str, exc: BaseException, out: Path | None = None) -> dict:
    rec = {"command": command, "error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(rec), file=sys.stderr)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").write_text(json.dumps(rec, indent=2))
    return rec


def _summary(name: str, passed: bool, detail: str = "") -> None:
    print(f"{name}: {'PASS' if passed else 'FAIL'}{' (' + detail + ')' if detail else ''}")


# --- run ------------------------------------------------------------------

def simulate(cfg: RunConfig, solver: SolverConfig | None = None, domain: BoxDomain | None = None) -> Trajectory:
    solver = solver or cfg.solver
    dom = domain or cfg.domain
    model = build_model(cfg.spec, cfg.force, dom, solver)
    traj = integrate(initial_density(dom, **cfg.initial), model, subdomain_mask(cfg.spec, dom, solver.b_min_dist))
    traj.warnings = list(cfg.warnings) + traj.warnings
    return traj


def execute_run(cfg: RunConfig, out, solver: SolverConfig | None = None,
                domain: BoxDomain | None = None) -> Trajectory:
    """Run one configuration and persist diagnostics, snapshots and manifest under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    traj = simulate(cfg, solver, domain)
    write_diagnostics(traj, out / "diagnostics.csv")
    write_snapshots(traj, out / "snapshots")
    used = solver or cfg.solver
    write_manifest(out, cfg, {"run": {"steps": traj.steps, "final_time": traj.times[-1],
                                      "eps": used.eps, "dt": used.dt, "cells": list((domain or cfg.domain).cells),
                                      "warnings": traj.warnings,
                                      "max_undershoot": traj.max_undershoot}})
    return traj


def load_trajectory(directory) -> tuple[Trajectory, RunConfig]:
    """Rebuild a stored run (snapshots + diagnostics + manifest) written by ``execute_run``."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cfg = parse_config(manifest["config"])
    run = manifest.get("run", {})
    solver = replace(cfg.solver, eps=run.get("eps", cfg.solver.eps), dt=run.get("dt"))
    snaps = sorted((directory / "snapshots").glob("c_*.json"))
    fields, times = [], []
    for p in snaps:
        f, meta = load_snapshot(p.with_suffix(""))
        fields.append(f)
        times.append(float(meta["time"]))
    if not fields:
        raise ValueError(f"no snapshots in {directory}")
    traj = Trajectory(fields[0].domain, solver, times=times, snapshots=fields, c0=fields[0])
    diag = read_diagnostics(directory / "diagnostics.csv")
    traj.diagnostics = {k: list(diag[k]) for k in DIAGNOSTIC_COLUMNS}
    return traj, cfg


# --- sweep ----------------------------------------------------------------

def _restrict(fine: np.ndarray, factor: int, dim: int) -> np.ndarray:
    """Block average of a field refined by ``factor`` along each axis."""
    shape = []
    for n in fine.shape:
        shape += [n // factor, factor]
    return fine.reshape(shape).mean(axis=tuple(range(1, 2 * dim, 2)))


def _initial_dt(cfg: RunConfig, solver: SolverConfig, dom: BoxDomain) -> float:
    model = build_model(cfg.spec, cfg.force, dom, solver)
    c0 = initial_density(dom, **cfg.initial)
    return solver.cfl * model.stability_bound(c0, model.adhesion(c0))


def sweep_plan(cfg: RunConfig, axis: str, factor: int, count: int) -> list[dict]:
    """One entry per run: the axis value and the solver/domain it uses."""
    base = cfg.solver
    plans = []
    if axis == "eps":
        eps0 = base.eps if base.eps > 0 else 0.04
        values = [eps0 / factor ** k for k in range(count)]
        # every member must share snapshot times, so all take the most restrictive step
        dt = base.dt or min(_initial_dt(cfg, replace(base, eps=e), cfg.domain) for e in values)
        for e in values:
            plans.append({"value": e, "solver": replace(base, eps=e, dt=dt), "domain": cfg.domain})
    elif axis == "dt":
        dt0 = base.dt or _initial_dt(cfg, base, cfg.domain)
        nsteps = max(1, math.ceil(base.T / dt0))
        for k in range(count):
            m = factor ** k
            plans.append({"value": base.T / (nsteps * m),
                          "solver": replace(base, dt=base.T / (nsteps * m), snapshot_stride=base.snapshot_stride * m),
                          "domain": cfg.domain})
    elif axis == "h":
        for k in range(count):
            dom = BoxDomain(cfg.domain.extent, [n * factor ** k for n in cfg.domain.cells], cfg.domain.boundary_mode)
            plans.append({"value": float(dom.spacing.min()), "solver": base, "domain": dom})
    else:
        raise ValueError(f"unknown sweep axis {axis!r}")
    return plans


def _sweep_member(args):
    raw, plan, out = args
    cfg = parse_config(raw)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            traj = execute_run(cfg, out, plan["solver"], plan["domain"])
        except Exception as exc:  # a failed member keeps the rest of the table
            return {"error": f"{type(exc).__name__}: {exc}"}
    return {"traj": traj}


def sweep_distance(axis: str, a: Trajectory, b: Trajectory, factor: int) -> float:
    if axis == "eps":
        return eps_cauchy(a, b)
    if axis == "dt":
        sub = Trajectory(b.domain, b.cfg, times=b.times[:], snapshots=b.snapshots[:])
        keep = [k for k, t in enumerate(b.times) if np.min(np.abs(np.asarray(a.times) - t)) < 1e-9]
        sub.times = [b.times[k] for k in keep]
        sub.snapshots = [b.snapshots[k] for k in keep]
        return eps_cauchy(a, sub)
    # h: compare final states after averaging the finer one down
    fine = _restrict(b.final.values, factor, a.domain.dim)
    return float(np.abs(a.final.values - fine).sum() * a.domain.cell_volume)


def cmd_sweep(cfg: RunConfig, out: Path, axis: str, factor: int, count: int, workers: int) -> int:
    if count < 3:
        raise ConfigError("a sweep needs count >= 3")
    if factor < 2:
        raise ConfigError("sweep factor must be an integer >= 2")
    plans = sweep_plan(cfg, axis, factor, count)
    jobs = [(cfg.raw, p, out / f"run_{k:02d}") for k, p in enumerate(plans)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_member, jobs))
    else:
        results = [_sweep_member(j) for j in jobs]
    D = evaluate(cfg.spec, cfg.domain) if axis == "eps" else None
    header = ["index", axis, "dt", "steps", "l1_distance_to_next", "h1_B", "lrp1_B", "min_c", "final_mass",
              "tensor_distance", "tensor_checks_ok", "error"]
    rows = []
    for k, (plan, res) in enumerate(zip(plans, results)):
        row = {"index": k, axis: plan["value"], "dt": plan["solver"].dt, "error": res.get("error", "")}
        traj = res.get("traj")
        if traj is not None:
            row.update(steps=traj.steps, h1_B=traj.series("h1_B")[-1], lrp1_B=traj.series("lrp1_B")[-1],
                       min_c=float(traj.series("minc").min()), final_mass=traj.series("mass")[-1])
            nxt = results[k + 1].get("traj") if k + 1 < len(results) else None
            if nxt is not None:
                row["l1_distance_to_next"] = sweep_distance(axis, traj, nxt, factor)
        if D is not None:
            De = regularize(cfg.spec, cfg.domain, plan["value"])
            rep = check_regularization(D, De, plan["value"])
            row.update(tensor_distance=rep.distance, tensor_checks_ok=rep.passed)
        rows.append([row.get(h, "") for h in header])
    write_table(out / "sweep.csv", header, rows)
    write_manifest(out, cfg, {"sweep": {"axis": axis, "factor": factor, "count": count}})
    failed = [r for r in results if "error" in r]
    for row in rows:
        print(",".join(str(_cell(v)) for v in row))
    _summary("sweep", not failed, f"{len(failed)} failed runs" if failed else "")
    return FAILED if failed else OK


# --- audits ---------------------------------------------------------------

def _audit_set(cfg: RunConfig) -> CompactSet:
    block = cfg.audit.get("compact_set")
    if block is not None:
        return compact_set_from(block, cfg.domain.dim)
    K = cfg.spec.degeneracy
    if K is None:
        raise ConfigError("no compact set: give audit.compact_set or tensor points")
    return K


def _delta_schedule(cfg: RunConfig):
    sched = cfg.audit.get("delta_schedule")
    if not sched:
        raise ConfigError("audit.delta_schedule is required")
    return [float(v) for v in sched]


def cmd_dim(cfg: RunConfig, out: Path) -> int:
    K = _audit_set(cfg)
    est = upper_box_dim(K, _delta_schedule(cfg))
    write_table(out / "dim.csv", ["delta", "count", "log_ratio"], est.rows())
    cond = dim_condition(est.estimate, cfg.domain.dim, cfg.solver.r)
    expected = cfg.audit.get("expected_dim")
    if expected is not None:
        passed = abs(est.estimate - expected) <= cfg.audit.get("dim_tolerance", 0.1)
    else:
        passed = cond.admissible
    write_manifest(out, cfg, {"dim": {"estimate": est.estimate, "threshold": cond.threshold,
                                      "admissible": cond.admissible, "reasons": cond.reasons,
                                      "passed": passed}})
    _summary("dim", passed, f"estimate {est.estimate:.4f}, threshold {cond.threshold:.4f}")
    return OK if passed else FAILED


def cmd_cutoff(cfg: RunConfig, out: Path) -> int:
    rep = verify_cutoff(_audit_set(cfg), cfg.solver.r, _delta_schedule(cfg))
    header, rows = rep.table()
    write_table(out / "cutoff.csv", header, rows)
    write_manifest(out, cfg, {"cutoff": {"exponent": rep.exponent, "checks": rep.checks}})
    failed = [k for k, v in rep.checks.items() if not v]
    _summary("cutoff", rep.passed, "failed: " + ", ".join(failed) if failed else "")
    return OK if rep.passed else FAILED


def cmd_tensor_check(cfg: RunConfig, out: Path) -> int:
    eps_list = cfg.audit.get("eps_list") or [0.04, 0.02, 0.01]
    rows, checks = tensor_sweep(cfg.spec, cfg.domain, eps_list, cfg.audit.get("mask_dist", 0.2))
    header = ["eps", "min_eig", "bound_margin", "distance", "modulus_bound", "divergence_sup",
              "clamped", "bound_ok", "elliptic_ok"]
    write_table(out / "tensor_check.csv", header, [[getattr(r, h) for h in header] for r in rows])
    write_manifest(out, cfg, {"tensor_check": checks})
    passed = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    _summary("tensor-check", passed, "failed: " + ", ".join(failed) if failed else "")
    return OK if passed else FAILED


def cmd_weak_residual(cfg: RunConfig, out: Path, trajectory=None, modes=None) -> int:
    if trajectory is not None:
        traj, cfg = load_trajectory(trajectory)
    else:
        traj = execute_run(cfg, out / "trajectory")
    dom = traj.domain
    D = evaluate(cfg.spec, dom)
    model = build_model(cfg.spec, cfg.force, dom, replace(traj.cfg, eps=max(traj.cfg.eps, 0.0)))
    a = cfg.spec.verified_margin(dom)
    T_s = float(cfg.audit.get("T_support", 0.4 * traj.times[-1]))
    modes = modes or cfg.audit.get("eta_modes") or list(ETA_MODES)
    t = np.asarray(traj.diagnostics["t"])
    dt = float(np.diff(t).mean()) if len(t) > 1 else math.nan
    header = ["h", "dt", "eps", "mode", "residual", "residual_regularized", "integrated_mass_residual",
              "quadrature_tolerance"]
    rows, passed = [], True
    for mode in modes:
        eta = make_test_function(mode, T_s, dom, a, horizon=traj.times[-1], ramp=cfg.audit.get("ramp"))
        res = weak_terms(traj, eta, D, model.kernel, cfg.solver.mu, cfg.solver.r).residual
        # same identity with the tensor the run actually used
        res_eps = weak_terms(traj, eta, model.D, model.kernel, cfg.solver.mu, cfg.solver.r).residual
        mass = tol = ""
        if mode == "constant" and traj.signed_mass_residual:
            mass = integrated_mass_residual(traj, eta)
            tol = quadrature_tolerance(traj, eta, D, model.kernel, cfg.solver.mu, cfg.solver.r)
            passed &= abs(res - mass) <= tol
        passed &= math.isfinite(res)
        rows.append([float(dom.spacing.min()), dt, traj.cfg.eps, mode, abs(res), abs(res_eps), mass, tol])
    write_table(out / "weak_residual.csv", header, rows)
    write_manifest(out, cfg, {"weak_residual": {"passed": bool(passed)}})
    _summary("weak-residual", bool(passed))
    return OK if passed else FAILED


def cmd_verify(out: Path | None, only=None, sign_fault: bool = False, force_mu=None, seed: int = 0) -> int:
    from .acceptance import run_all

    if force_mu is not None:
        parse_config(reference_config({"model.mu": force_mu}))  # raises ConfigError before any run
    results = run_all(only, sign_fault=sign_fault, seed=seed)
    if out is not None:
        write_table(out / "verify.csv", ["criterion", "name", "passed", "seconds", "detail"],
                    [[r.number, r.name, r.passed, r.seconds, r.detail] for r in results])
    failed = [f"{r.number} {r.name}" for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    if failed:
        print("failing: " + "; ".join(failed))
        return FAILED
    return OK


# --- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration (default: built-in reference)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--seed", type=int, help="override the config seed")
    p = argparse.ArgumentParser(prog="myopic-adhesion", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="integrate one configuration")
    s = sub.add_parser("sweep", parents=[common], help="refinement sweep with a Cauchy-distance table")
    s.add_argument("--axis", choices=["eps", "dt", "h"], default="eps")
    s.add_argument("--factor", type=int, default=2)
    s.add_argument("--count", type=int, default=3)
    sub.add_parser("dim", parents=[common], help="box-counting dimension of the degeneracy set")
    sub.add_parser("cutoff", parents=[common], help="audit of the cutoff family")
    sub.add_parser("tensor-check", parents=[common], help="audit of the regularized tensor")
    w = sub.add_parser("weak-residual", parents=[common], help="weak-form residual of a trajectory")
    w.add_argument("--trajectory", type=Path, help="directory written by `run` (default: run the config)")
    w.add_argument("--mode", action="append", choices=list(ETA_MODES), help="test function mode (repeatable)")
    v = sub.add_parser("verify", parents=[common], help="run the acceptance suite")
    v.add_argument("--only", type=int, action="append", help="criterion number (repeatable)")
    v.add_argument("--force-mu", type=float, help=argparse.SUPPRESS)
    v.add_argument("--inject-sign-fault", action="store_true", help=argparse.SUPPRESS)
    return p


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else parse_config(reference_config())
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.raw["seed"] = args.seed
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = args.out
    try:
        if args.command == "verify":
            return cmd_verify(out, args.only, args.inject_sign_fault, args.force_mu,
                              args.seed if args.seed is not None else 0)
        cfg = _load(args)
        out = Path(out or cfg.output or f"out/{args.command}")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            if args.command == "run":
                traj = execute_run(cfg, out)
                for msg in traj.warnings:
                    print(f"warning: {msg}")
                _summary("run", True, f"{traj.steps} steps to t = {traj.times[-1]:g}")
                return OK
            if args.command == "sweep":
                return cmd_sweep(cfg, out, args.axis, args.factor, args.count, args.workers)
            if args.command == "dim":
                return cmd_dim(cfg, out)
            if args.command == "cutoff":
                return cmd_cutoff(cfg, out)
            if args.command == "tensor-check":
                return cmd_tensor_check(cfg, out)
            return cmd_weak_residual(cfg, out, args.trajectory, args.mode)
    except ConfigError as exc:
        error_record(args.command, exc, out if isinstance(out, Path) else None)
        return INVALID
    except Exception as exc:
        error_record(args.command, exc, out if isinstance(out, Path) else None)
        return FAILED


if __name__ == "__main__":
    sys.exit(main())
