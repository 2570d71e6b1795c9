"""Command line entry point: run, sweep-m, oracle-compare, verify.

Exit codes: 0 success, 2 configuration error, 3 solver failure or unreadable
output, 4 diagnostics failure (only with --strict).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import diagnostics as D
from .io import (
    CorruptOutput, read_manifest, read_radial, read_trajectory, write_gnuplot, write_manifest, write_radial,
    write_trajectory, versions,
)
from .obstacle import ConvergenceError
from .pme import SolverError
from .scenarios import ConfigError, Scenario, load_config, load_preset, scenario_from_config, validate_config

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_DIAG = 0, 2, 3, 4

log = logging.getLogger("heleshaw")


def max_workers() -> int:
    env = os.environ.get("MESA_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            raise ConfigError("MESA_THREADS must be a positive integer") from None
    return cap


def _load(args) -> dict:
    if args.preset:
        return load_preset(args.preset)
    if not args.config:
        raise ConfigError("give --config or --preset")
    embedded = _manifest_config(Path(args.config))
    return embedded if embedded is not None else load_config(args.config)


def _manifest_config(path: Path) -> dict | None:
    """The embedded config when ``path`` is a run manifest, else None."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError):
        return None
    if isinstance(doc, dict) and "config" in doc and "versions" in doc:
        return validate_config(doc["config"], path.parent)
    return None


# --- solving ---------------------------------------------------------------------

def solve(sc: Scenario, m: float | None = None):
    """Run the scenario's solver; returns a Trajectory (or RadialTrajectory)."""
    from .limit import run_limit
    from .pme import run_pme

    if sc.solver == "pme":
        m = m if m is not None else sc.config["m"]
        return run_pme(sc.pme_density(m), sc.pme_params(m), sc.lam, sc.f, sc.output_times)
    if sc.solver == "limit":
        return run_limit(sc.limit_density(), sc.lam, sc.f, sc.limit_params(), sc.output_times)
    if sc.solver == "tumor":
        from .tumor import run_tumor

        m = m if m is not None else sc.config["m"]
        rho0, c0 = sc.tumor_initial()
        frozen = sc.config.get("tumor", {}).get("frozen_nutrient", False)
        return run_tumor(rho0, c0, m, sc.tumor_law(), sc.t_end, sc.output_times, sc.pme_params(m),
                         frozen_nutrient=frozen)
    return _radial(sc)


def _radial(sc: Scenario):
    from .radial import integrate_radial

    geo = sc.grid.geometry
    return integrate_radial(sc.front0, sc.lam, sc.rho_ext, sc.t_end, sc.f, geo.n, geo.inner,
                            dt=sc.config.get("tolerances", {}).get("dt", 1e-3))


def _diagnose(sc: Scenario, traj) -> D.DiagnosticsReport:
    report = D.run_diagnostics(traj, sc.lam, sc.f, sc.tol["eps_sat"])
    if sc.solver == "limit" and len(traj.ledger.get("t", ())) > 2 * 10:
        report.add(D.velocity_law_check(traj))
    return report


def execute(cfg: dict, out: Path, m: float | None = None, plot: bool = True) -> dict:
    """Run one configuration into ``out``; returns the manifest."""
    out.mkdir(parents=True, exist_ok=True)
    sc = scenario_from_config(cfg)
    start = time.perf_counter()
    traj = solve(sc, m)
    wall = time.perf_counter() - start
    manifest = {"config": cfg, "versions": versions(), "wall_time": wall}
    if m is not None:
        manifest["m"] = m
    if sc.solver == "radial_oracle":
        manifest["radial"] = write_radial(out, traj)
        manifest["diagnostics"] = {"ok": True, "checks": {}}
    else:
        manifest["trajectory"] = write_trajectory(out, traj)
        report = _diagnose(sc, traj)
        report.dump(out / "diagnostics.json")
        (out / "diagnostics.txt").write_text(report.to_text() + "\n")
        manifest["diagnostics"] = {"ok": report.ok,
                                   "checks": {k: c.passed for k, c in sorted(report.checks.items())}}
        if plot:
            write_gnuplot(out, manifest["trajectory"], cfg.get("name", sc.solver))
    write_manifest(out, manifest)
    return manifest


def _execute_job(job):
    cfg, out, m = job
    return execute(cfg, Path(out), m)


# --- commands --------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = _load(args)
    manifest = execute(cfg, Path(args.out))
    ok = manifest["diagnostics"]["ok"]
    print(f"wrote {args.out} ({manifest['wall_time']:.2f} s); diagnostics {'ok' if ok else 'FAILED'}")
    return EXIT_DIAG if args.strict and not ok else EXIT_OK


def parse_m_list(text: str) -> list[float]:
    try:
        ms = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--m must be a comma separated list of numbers, got {text!r}") from None
    if not ms or any(m <= 1 for m in ms):
        raise ConfigError("--m values must exceed 1")
    return ms


def cmd_sweep(args) -> int:
    cfg = _load(args)
    ms = parse_m_list(args.m)
    out = Path(args.out)
    if cfg["solver"] not in ("pme", "tumor"):
        cfg = {**cfg, "solver": "pme"}
        cfg.setdefault("m", ms[0])
    if len(ms) == 1:
        manifest = execute(cfg, out, ms[0])
        ok = manifest["diagnostics"]["ok"]
        print(f"single m = {ms[0]:g}: wrote {out}")
        return EXIT_DIAG if args.strict and not ok else EXIT_OK
    jobs = [(cfg, str(out / f"m_{m:g}"), m) for m in ms]
    limit_cfg = {**cfg, "solver": "limit"}
    limit_cfg.pop("m", None)
    jobs.append((limit_cfg, str(out / "limit"), None))
    workers = min(max_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            manifests = list(pool.map(_execute_job, jobs))
    else:
        manifests = [_execute_job(j) for j in jobs]
    runs = {}
    for m, man in zip(ms, manifests):
        runs[m] = read_trajectory(out / f"m_{m:g}", man["trajectory"])
        runs[m].meta["m"] = m
    limit = read_trajectory(out / "limit", manifests[-1]["trajectory"])
    table, check = D.m_convergence_study(runs, limit)
    bounds = D.bounds_report([runs[m] for m in sorted(runs)])
    tv = D.tv_report([runs[m] for m in sorted(runs)])
    text = table.to_text()
    (out / "convergence.txt").write_text(text + "\n")
    summary = {"m": ms, "table": table.rows(), "rate": table.rate,
               "checks": {c.name: D._jsonable(c.__dict__) for c in (check, bounds, tv)}}
    with open(out / "convergence.json", "w") as fh:
        json.dump(D._jsonable(summary), fh, indent=2, sort_keys=True)
    print(text)
    ok = check.passed and bounds.passed and tv.passed
    print(check.line())
    print(bounds.line())
    print(tv.line())
    return EXIT_DIAG if args.strict and not ok else EXIT_OK


def oracle_compare(cfg: dict) -> dict:
    """Limit solver against the radial front ODE on the same scenario."""
    from .limit import run_limit

    sc = scenario_from_config({**cfg, "solver": "limit"})
    traj = run_limit(sc.limit_density(), sc.lam, sc.f, sc.limit_params(), sc.output_times)
    oracle = _radial(sc)
    t = traj.ledger["t"]
    front = traj.ledger["front"]
    # at a jump instant the density front may still sit at the left limit
    gap = np.minimum(np.abs(front - oracle.at(t)), np.abs(front - oracle.at(t, side="left")))
    h = sc.grid.h
    return {
        "h": h,
        "max_gap": float(np.max(gap)),
        "max_gap_cells": float(np.max(gap) / h),
        "tolerance": 2 * h,
        "ok": bool(np.max(gap) <= 2 * h),
        "t_star": oracle.t_star,
        "final": {"t": float(t[-1]), "limit": float(front[-1]), "oracle": float(oracle.R[-1])},
    }


def cmd_oracle(args) -> int:
    cfg = _load(args)
    res = oracle_compare(cfg)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        with open(Path(args.out) / "oracle.json", "w") as fh:
            json.dump(res, fh, indent=2, sort_keys=True)
    status = "ok" if res["ok"] else "FAILED"
    print(f"max front gap {res['max_gap']:.3e} = {res['max_gap_cells']:.2f} h (tolerance 2h): {status}")
    return EXIT_DIAG if args.strict and not res["ok"] else EXIT_OK


def verify_dir(out: Path) -> tuple[D.DiagnosticsReport | None, bool]:
    """Recompute diagnostics from files; returns (report, matches stored report)."""
    manifest = read_manifest(out)
    if "radial" in manifest:
        read_radial(out / manifest["radial"]["file"])
        return None, True
    if "trajectory" not in manifest or "config" not in manifest:
        raise CorruptOutput(f"{out}: manifest lacks trajectory or config")
    try:
        sc = scenario_from_config(manifest["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptOutput(f"{out}: manifest config unusable: {exc}") from None
    traj = read_trajectory(out, manifest["trajectory"])
    report = _diagnose(sc, traj)
    stored = None
    if (out / "diagnostics.json").exists():
        with open(out / "diagnostics.json") as fh:
            stored = json.load(fh)
    same = stored is None or json.loads(json.dumps(report.to_json(), sort_keys=True)) == stored
    return report, same


def cmd_verify(args) -> int:
    out = Path(args.out)
    if not out.is_dir():
        raise ConfigError(f"output directory not found: {out}")
    report, same = verify_dir(out)
    if report is None:
        print("radial trajectory readable")
        return EXIT_OK
    print(report.to_text())
    print("recomputed diagnostics match stored report" if same else "recomputed diagnostics DIFFER from stored report")
    ok = report.ok and same
    return EXIT_DIAG if args.strict and not ok else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="heleshaw", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_args(p):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--config", help="scenario JSON file, or a manifest.json to re-run")
        g.add_argument("--preset", help="built-in scenario name (e.g. figure1, radial-hs)")
        p.add_argument("--strict", action="store_true", help="exit 4 if any diagnostic fails")

    p = sub.add_parser("run", help="run one scenario")
    scenario_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-m", help="finite-m runs plus the limit run, with the convergence table")
    scenario_args(p)
    p.add_argument("--m", default="10,20,40,80")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle-compare", help="limit solver front against the radial ODE")
    scenario_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("verify", help="recompute diagnostics of an output directory")
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, ConvergenceError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except CorruptOutput as exc:
        print(f"unreadable output: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
