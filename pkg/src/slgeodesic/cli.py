"""Command-line entry point: solve, verify, sweep and selftest.

Exit codes: 0 success, 2 config error, 3 admissibility failure, 4 solver
failure, 5 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from .barriers import build_barriers
from .config import load_config
from .errors import AdmissibilityViolation, BarrierFailure, ConfigError, InputError, NoConvergence
from .fields import ChiField, CylinderGrid, TorusGrid, assemble_chi, interpolation_values, scaled_hessian
from .solver import GeodesicResult, TauResult, run_tau_sweep, solve_tau
from .spectral import arctan_sum, eigenvalues
from .verify import (
    FAIL,
    INSUFFICIENT,
    PASS,
    WARN,
    VerificationReport,
    convexity_check,
    degenerate_residual,
    energy_functional,
    geodesic_residual_trend,
    loglog_slope,
    monge_ampere_oracle,
    phase_admissibility_report,
    refinement_order,
    spectral_selftest,
)

log = logging.getLogger("slgeodesic")

EXIT_OK, EXIT_CONFIG, EXIT_ADMISSIBILITY, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4, 5


class _Exit(Exception):
    def __init__(self, code, message, report=None):
        super().__init__(message)
        self.code = code
        self.report = report


def write_csv(path, header, columns):
    """Header row plus one row per node; floats with 17 significant digits."""
    data = np.column_stack([np.asarray(c, dtype=float).ravel() for c in columns]) + 0.0  # no "-0" entries
    np.savetxt(path, data, fmt="%.17g", delimiter=",", header=",".join(header), comments="")


def read_csv(path):
    """Inverse of write_csv: (header, 2-D array)."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def _pad_faces(interior, grid):
    out = np.full(grid.shape, np.nan)
    out[1:-1] = interior
    return out


def _node_coordinates(grid):
    t = grid.times()
    x = grid.space.coords()
    tt = np.broadcast_to(t.reshape((-1,) + (1,) * grid.n), grid.shape)
    xs = [np.broadcast_to(x[..., k][None], grid.shape) for k in range(grid.n)]
    return tt, xs


# --------------------------------------------------------------------- problem


class _Problem:
    """The instance actually solved, plus the sign used to map results back."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.branch = cfg.branch
        self.pair = cfg.pair
        self.sign = 1.0
        self.admissibility = None

    def check_admissibility(self, report):
        cfg = self.cfg
        if self.pair is None:
            chi = ChiField.constant(self._base_grid(), cfg.synthetic_chi)
            try:
                build_barriers(chi, self.branch)
            except AdmissibilityViolation as exc:
                raise _Exit(EXIT_ADMISSIBILITY, str(exc))
            except BarrierFailure as exc:
                raise _Exit(EXIT_SOLVER, f"barrier construction failed: {exc}")
            return
        adm = phase_admissibility_report(self.pair, self.branch, TorusGrid(cfg.n, cfg.N))
        self.admissibility = adm
        if "admissibility" in cfg.checks:
            report.add("admissibility", adm)
        if adm["status"] == FAIL:
            raise _Exit(
                EXIT_ADMISSIBILITY,
                f"boundary data inadmissible: smallest raw phase margin {adm['raw_margin']:.6g} <= 0",
            )
        if adm["branch"] == "negative":
            log.info("negative branch: solving the mirrored pair and negating the result")
            self.pair = self.pair.negated()
            self.sign = -1.0

    def _base_grid(self, N=None, time_points=None, tau=1.0):
        cfg = self.cfg
        return CylinderGrid(TorusGrid(cfg.n, N or cfg.N), time_points or cfg.time_points, tau)

    def chi(self, grid):
        if self.pair is None:
            return ChiField.constant(grid, self.cfg.synthetic_chi)
        return assemble_chi(self.pair, grid)

    def sweep(self, jobs=1, N=None, time_points=None, schedule=None):
        cfg = self.cfg
        schedule = schedule or cfg.schedule
        if self.pair is not None:
            return run_tau_sweep(
                self.pair, self.branch, schedule, cfg.newton,
                N=N or cfg.N, time_points=time_points or cfg.time_points, jobs=jobs,
            )
        base = self._base_grid(N, time_points)
        taus = []
        for t in schedule.tau_sequence:
            chi = self.chi(base.with_tau(t))
            try:
                r = solve_tau(chi, self.branch, schedule, cfg.newton)
            except NoConvergence as exc:
                r = TauResult(tau=t, status="failed", error=str(exc))
            taus.append(r)
            if r.status != "ok":
                break
        solved = [r for r in taus if r.status == "ok"]
        gaps = [float(np.abs(b.v_hat - a.v_hat).max()) for a, b in zip(solved, solved[1:])]
        return GeodesicResult(grid=base, branch=self.branch, taus=taus, gaps=gaps)


def _solve_or_exit(problem, report, **kw):
    try:
        return problem.sweep(**kw)
    except AdmissibilityViolation as exc:
        raise _Exit(EXIT_ADMISSIBILITY, str(exc))
    except BarrierFailure as exc:
        raise _Exit(EXIT_SOLVER, f"barrier construction failed: {exc}")


# --------------------------------------------------------------------- checks


def _solution_checks(problem, result, report, checks):
    cfg = problem.cfg
    solved = result.solved
    if "sandwich" in checks and solved:
        rows = []
        ok = True
        for r in solved:
            accepted = [rec.sandwich for rec in r.records if rec.sandwich is not None]
            good = all(s["ok"] for s in accepted)
            ok &= good
            rows.append({
                "tau": r.tau,
                "accepted_iterates_ok": good,
                "worst_lower_violation": max(s["lower_violation"] for s in accepted),
                "worst_upper_violation": max(s["upper_violation"] for s in accepted),
                "transient_violations": sum(rec.transient_sandwich_violations for rec in r.records),
            })
        report.add("sandwich", {"status": PASS if ok else FAIL, "per_tau": rows})
    if "convexity" in checks and solved:
        rows = []
        for r in solved:
            g = result.grid.with_tau(r.tau)
            M = problem.chi(g).matrices() + scaled_hessian(r.v_hat, g)
            rows.append(dict(tau=r.tau, **convexity_check(M)))
        worst = min(rows, key=lambda c: c["min_eigenvalue"])
        status = PASS if all(c["status"] == PASS for c in rows) else FAIL
        report.add("convexity", {"status": status, "min_eigenvalue": worst["min_eigenvalue"], "per_tau": rows,
                                 "frame": "mirrored pair" if problem.sign < 0 else "as given"})
    if "monge_ampere" in checks and solved:
        if cfg.n != 1:
            report.add("monge_ampere", {"status": INSUFFICIENT, "reason": "oracle needs n = 1"})
        else:
            # the scaled time derivatives amplify the O(h^2) error by 1/tau,
            # so only the largest tau is graded; the rest is informational
            rows = []
            for r in solved:
                g = result.grid.with_tau(r.tau)
                rows.append(dict(tau=r.tau, **monge_ampere_oracle(r.v_hat, problem.chi(g))))
            report.add("monge_ampere", {
                "status": rows[0]["status"],
                "graded_tau": rows[0]["tau"],
                "max_det_error": rows[0]["max_det_error"],
                "per_tau": rows,
            })
    if problem.pair is None:
        return
    if "residual_trend" in checks and solved:
        entries = [(r.tau, r.v_hat) for r in solved]
        report.add("residual_trend", geodesic_residual_trend(entries, problem.pair, problem.branch, result.grid))
    if "energy" in checks and result.u is not None:
        u = problem.sign * result.u
        Q = cfg.pair.u0.quadratic
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            energy, min_w = energy_functional(u, cfg.branch, result.grid, quadratic=Q)
        report.add("energy", {
            "status": WARN if caught else PASS,
            "energy": energy,
            "min_weight": min_w,
            "warnings": [str(w.message) for w in caught],
        })


# --------------------------------------------------------------------- outputs


def _field_dump(path, problem, result, r):
    grid = result.grid.with_tau(r.tau)
    chi = problem.chi(grid)
    M = chi.matrices() + scaled_hessian(r.v_hat, grid)
    phase = _pad_faces(arctan_sum(M), grid)
    min_eig = _pad_faces(eigenvalues(M)[..., 0], grid)
    if problem.pair is not None:
        u = problem.sign * (interpolation_values(problem.pair, grid) + r.v_hat)
        res = _pad_faces(degenerate_residual(r.v_hat, problem.pair, problem.branch, grid), grid)
    else:
        u = np.full(grid.shape, np.nan)
        res = np.full(grid.shape, np.nan)
    tt, xs = _node_coordinates(grid)
    header = ["t"] + [f"x{k + 1}" for k in range(grid.n)] + ["u", "v_hat", "phase", "min_eig", "degenerate_residual"]
    write_csv(path, header, [tt, *xs, u, problem.sign * r.v_hat, phase, min_eig, res])


def _tau_trend(problem, result):
    solved = result.solved
    gaps = [math.nan] + list(result.gaps)
    ratios = [math.nan, math.nan] + [a / b if b > 0 else math.nan for a, b in zip(result.gaps, result.gaps[1:])]
    if problem.pair is not None:
        res = [float(np.abs(degenerate_residual(r.v_hat, problem.pair, problem.branch, result.grid)).max()) for r in solved]
    else:
        res = [math.nan] * len(solved)
    cols = {
        "tau": [r.tau for r in solved],
        "sup_norm": [r.c0 for r in solved],
        "lipschitz": [r.c1 for r in solved],
        "c1_norm": [r.c1_total for r in solved],
        "cauchy_gap": gaps[: len(solved)],
        "gap_ratio": ratios[: len(solved)],
        "degenerate_residual_norm": res,
        "newton_residual": [r.records[-1].final_residual for r in solved],
        "newton_iterations": [sum(rec.iterations for rec in r.records) for r in solved],
    }
    slopes = {}
    if len(result.gaps) >= 2 and all(g > 0 for g in result.gaps):
        slopes["cauchy_gap_vs_tau"] = loglog_slope(cols["tau"][1:], result.gaps)
    if len(res) >= 2 and all(x > 0 for x in res):
        slopes["degenerate_residual_vs_tau"] = loglog_slope(cols["tau"], res)
    return cols, slopes


def _write_tau_trend(out, problem, result, report_dict):
    cols, slopes = _tau_trend(problem, result)
    write_csv(out / "trend_tau.csv", list(cols), list(cols.values()))
    report_dict["trend_tau"] = {
        "columns": cols,
        "slopes": slopes,
        "note": "trend thresholds are regression bounds frozen from first runs, not rates from theory",
    }


def _finish(out, report_dict, started):
    report_dict["wall_time"] = time.perf_counter() - started
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(_jsonable(report_dict), fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _status_code(result, verification):
    if result is not None and not result.ok:
        return EXIT_SOLVER
    if verification.status == FAIL:
        return EXIT_VERIFY
    return EXIT_OK


# --------------------------------------------------------------------- commands


def cmd_solve(cfg, out, jobs=1, seed=0):
    """Full pipeline; writes report.json, fields_tau<k>.csv, trend_tau.csv, geodesic.csv."""
    started = time.perf_counter()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    verification = VerificationReport()
    report = {"command": "solve", "config": cfg.echo(), "files": {}}
    problem = _Problem(cfg)
    try:
        problem.check_admissibility(verification)
        result = _solve_or_exit(problem, verification, jobs=jobs)
    except _Exit as exc:
        report.update(status="fail", exit_code=exc.code, error=str(exc), verification=verification.to_dict())
        _finish(out, report, started)
        raise _Exit(exc.code, str(exc), report)
    report["negated"] = problem.sign < 0
    report["taus"] = [r.to_dict() for r in result.taus]
    report["cauchy_gaps"] = result.gaps

    index = {t: k for k, t in enumerate(cfg.schedule.tau_sequence)}
    for r in result.solved:
        name = f"fields_tau{index[r.tau]}.csv"
        _field_dump(out / name, problem, result, r)
        report["files"][name] = {"kind": "fields", "tau": r.tau}
    _write_tau_trend(out, problem, result, report)
    report["files"]["trend_tau.csv"] = {"kind": "trend_tau"}
    if cfg.write_geodesic and result.u is not None:
        tt, xs = _node_coordinates(result.grid)
        write_csv(out / "geodesic.csv", ["t"] + [f"x{k + 1}" for k in range(cfg.n)] + ["u"],
                  [tt, *xs, problem.sign * result.u])
        report["files"]["geodesic.csv"] = {"kind": "geodesic", "tau": result.solved[-1].tau}

    _solution_checks(problem, result, verification, cfg.checks)
    if "selftest" in cfg.checks:
        for name, check in spectral_selftest(seed).checks.items():
            verification.add(name, check)
    report["verification"] = verification.to_dict()
    code = _status_code(result, verification)
    report.update(status="pass" if code == EXIT_OK else "fail", exit_code=code)
    _finish(out, report, started)
    return code, report


def cmd_verify(cfg, out, seed=0):
    """Identity sweeps, lemma table, admissibility and checks on one solve (or the zero field)."""
    started = time.perf_counter()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    verification = VerificationReport()
    for name, check in spectral_selftest(seed).checks.items():
        verification.add(name, check)
    report = {"command": "verify", "config": cfg.echo(), "files": {}}
    problem = _Problem(cfg)
    try:
        problem.check_admissibility(verification)
    except _Exit as exc:
        report.update(status="fail", exit_code=exc.code, error=str(exc), verification=verification.to_dict())
        _finish(out, report, started)
        raise _Exit(exc.code, str(exc), report)
    tau = cfg.schedule.tau_sequence[0]
    grid = problem._base_grid(tau=tau)
    chi = problem.chi(grid)
    if cfg.verify_candidate == "zero":
        v = grid.zeros()
        M = chi.matrices() + scaled_hessian(v, grid)
        if cfg.n == 1:
            verification.add("monge_ampere", monge_ampere_oracle(v, chi))
        verification.add("convexity", convexity_check(M))
        result = None
    else:
        schedule = replace(cfg.schedule, tau_sequence=(tau,))
        result = _solve_or_exit(problem, verification, schedule=schedule)
        report["taus"] = [r.to_dict() for r in result.taus]
        checks = set(cfg.checks) | {"sandwich", "convexity"} | ({"monge_ampere"} if cfg.n == 1 else set())
        _solution_checks(problem, result, verification, checks - {"residual_trend"})
    report["verification"] = verification.to_dict()
    code = _status_code(result, verification)
    report.update(status="pass" if code == EXIT_OK else "fail", exit_code=code)
    _finish(out, report, started)
    return code, report


def cmd_sweep(cfg, out, parameter="tau", jobs=1, seed=0):
    """Trend tables over the tau schedule or over the grid sizes."""
    started = time.perf_counter()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    verification = VerificationReport()
    report = {"command": f"sweep-{parameter}", "config": cfg.echo(), "files": {}}
    problem = _Problem(cfg)
    try:
        problem.check_admissibility(verification)
        if parameter == "tau":
            result = _solve_or_exit(problem, verification, jobs=jobs)
            report["taus"] = [r.to_dict() for r in result.taus]
            _write_tau_trend(out, problem, result, report)
            report["files"]["trend_tau.csv"] = {"kind": "trend_tau"}
            gaps = result.gaps
            ok = all(b <= a * (1 + 1e-12) for a, b in zip(gaps, gaps[1:]))
            verification.add("cauchy_gaps_nonincreasing", {
                "status": (PASS if ok else FAIL) if len(gaps) >= 2 else INSUFFICIENT,
                "gaps": gaps,
                "note": "regression bound",
            })
        else:
            result = _grid_sweep(problem, out, report, verification)
    except _Exit as exc:
        report.update(status="fail", exit_code=exc.code, error=str(exc), verification=verification.to_dict())
        _finish(out, report, started)
        raise _Exit(exc.code, str(exc), report)
    report["verification"] = verification.to_dict()
    code = _status_code(result, verification)
    report.update(status="pass" if code == EXIT_OK else "fail", exit_code=code)
    _finish(out, report, started)
    return code, report


def _grid_sweep(problem, out, report, verification):
    """Solve at the first tau of the schedule for every grid size in the config."""
    cfg = problem.cfg
    tau = cfg.schedule.tau_sequence[0]
    schedule = replace(cfg.schedule, tau_sequence=(tau,))
    rows = {"N": [], "h": [], "time_points": [], "sup_norm": [], "c1_norm": [], "ma_det_error": [], "newton_iterations": []}
    last = None
    for N in cfg.sweep_grids:
        tp = (cfg.time_points - 1) * N // cfg.N + 1
        result = _solve_or_exit(problem, verification, N=N, time_points=tp, schedule=schedule)
        last = result
        if not result.ok:
            report["failed_grid"] = {"N": N, "error": result.taus[-1].error}
            return result
        r = result.solved[0]
        g = result.grid.with_tau(tau)
        ma = monge_ampere_oracle(r.v_hat, problem.chi(g))["max_det_error"] if cfg.n == 1 else math.nan
        rows["N"].append(N)
        rows["h"].append(1.0 / N)
        rows["time_points"].append(tp)
        rows["sup_norm"].append(r.c0)
        rows["c1_norm"].append(r.c1_total)
        rows["ma_det_error"].append(ma)
        rows["newton_iterations"].append(sum(rec.iterations for rec in r.records))
    write_csv(out / "trend_grid.csv", list(rows), list(rows.values()))
    report["files"]["trend_grid.csv"] = {"kind": "trend_grid"}
    order = None
    if cfg.n == 1 and len(rows["N"]) >= 3 and all(e > 0 for e in rows["ma_det_error"]):
        order = refinement_order(rows["h"], rows["ma_det_error"])
        verification.add("monge_ampere_order", {
            "status": PASS if abs(order - 2.0) <= 0.3 else FAIL,
            "order": order,
            "band": [1.7, 2.3],
            "errors": rows["ma_det_error"],
        })
    report["trend_grid"] = {"columns": rows, "monge_ampere_order": order}
    return last


def cmd_selftest(out=None, seed=0):
    report = spectral_selftest(seed)
    data = {"command": "selftest", "seed": seed, "verification": report.to_dict()}
    code = EXIT_VERIFY if report.status == FAIL else EXIT_OK
    data.update(status="pass" if code == EXIT_OK else "fail", exit_code=code)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        _finish(out, data, time.perf_counter())
    return code, data


# --------------------------------------------------------------------- argparse


def _tau_list(text):
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad tau list {text!r}") from exc
    return values


def build_parser():
    p = argparse.ArgumentParser(prog="slgeodesic", description="Weak geodesics between Lagrangian graphs over the torus.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="TOML run configuration")
        sp.add_argument("--out", help="output directory (overrides output.dir)")
        sp.add_argument("--seed", type=int, default=0, help="seed for random test matrices")

    def sizes(sp):
        sp.add_argument("--tau-schedule", type=_tau_list, help="comma separated decreasing tau values")
        sp.add_argument("--grid", type=int, help="points per torus direction")
        sp.add_argument("--time-grid", type=int, help="time points including both faces")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for independent tau solves")

    s = sub.add_parser("solve", help="run the full pipeline and dump fields")
    common(s)
    sizes(s)
    s = sub.add_parser("verify", help="run the verification checks")
    common(s)
    sizes(s)
    s = sub.add_parser("sweep", help="trend tables over tau or grid size")
    s.add_argument("parameter", choices=("tau", "grid"))
    common(s)
    sizes(s)
    s = sub.add_parser("selftest", help="identity sweeps and lemma table, no config needed")
    common(s, config_required=False)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "selftest":
            code, report = cmd_selftest(args.out, args.seed)
        else:
            try:
                if args.tau_schedule is not None and not args.tau_schedule:
                    raise ConfigError("--tau-schedule: empty schedule")
                cfg = load_config(args.config)
                cfg = cfg.with_overrides(args.tau_schedule, args.grid, args.time_grid, args.out)
            except (ValueError, InputError) as exc:
                raise ConfigError(f"override rejected: {exc}") from exc
            if args.jobs < 1:
                raise ConfigError("--jobs must be at least 1")
            out = cfg.output_dir
            if args.command == "solve":
                code, report = cmd_solve(cfg, out, args.jobs, args.seed)
            elif args.command == "verify":
                code, report = cmd_verify(cfg, out, args.seed)
            else:
                code, report = cmd_sweep(cfg, out, args.parameter, args.jobs, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _Exit as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    print(f"{report['command']}: {report['status']}")
    if code == EXIT_VERIFY:
        failed = [k for k, c in report["verification"]["checks"].items() if c["status"] == FAIL]
        print("failed checks: " + ", ".join(failed), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
