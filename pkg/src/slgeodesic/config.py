"""Run configuration: a TOML file with nested sections.

Semantic errors are reported with the line of the offending key when it can
be located in the source text.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError, InputError
from .fields import BoundaryPair, PotentialSpec
from .solver import ContinuationSchedule, NewtonSettings
from .spectral import PhaseBranch, select_branch

KNOWN_CHECKS = ("admissibility", "sandwich", "convexity", "energy", "residual_trend", "monge_ampere", "selftest")
DEFAULT_CHECKS = ("admissibility", "sandwich", "convexity", "energy", "residual_trend")

_SECTIONS = {
    "": {"n", "grid", "branch", "u0", "u1", "synthetic_chi", "schedule", "newton", "checks", "output", "sweep", "verify"},
    "grid": {"N", "time_points"},
    "branch": {"theta", "big_theta"},
    "u0": {"quadratic", "modes"},
    "u1": {"quadratic", "modes"},
    "synthetic_chi": {"matrix"},
    "schedule": {"zeta_steps", "tau", "warm_start", "max_bisections"},
    "newton": {"tolerance", "max_iterations", "backtrack", "min_step", "linear_rtol", "predictor"},
    "checks": {"enabled"},
    "output": {"dir", "geodesic"},
    "sweep": {"grids"},
    "verify": {"candidate"},
}


@dataclass(frozen=True)
class RunConfig:
    n: int
    N: int = 32
    time_points: int = 33
    branch: PhaseBranch = None
    pair: BoundaryPair = None
    synthetic_chi: np.ndarray = None
    schedule: ContinuationSchedule = field(default_factory=ContinuationSchedule)
    newton: NewtonSettings = field(default_factory=NewtonSettings)
    checks: tuple = DEFAULT_CHECKS
    output_dir: str = "out"
    write_geodesic: bool = True
    sweep_grids: tuple = (16, 32, 64)
    verify_candidate: str = "solve"
    source: str = None

    def with_overrides(self, tau=None, N=None, time_points=None, out=None):
        cfg = self
        if tau is not None:
            cfg = replace(cfg, schedule=replace(cfg.schedule, tau_sequence=tuple(tau)))
        if N is not None:
            cfg = replace(cfg, N=N)
        if time_points is not None:
            cfg = replace(cfg, time_points=time_points)
        if out is not None:
            cfg = replace(cfg, output_dir=str(out))
        return cfg

    def echo(self):
        """JSON-ready view of the effective configuration."""
        spec = lambda p: {"quadratic": p.quadratic.tolist(), "modes": [[list(k), a, b] for k, a, b in p.trig_modes]}
        return {
            "source": self.source,
            "n": self.n,
            "N": self.N,
            "time_points": self.time_points,
            "branch": {"theta": self.branch.theta, "big_theta": self.branch.big_theta},
            "u0": None if self.pair is None else spec(self.pair.u0),
            "u1": None if self.pair is None else spec(self.pair.u1),
            "synthetic_chi": None if self.synthetic_chi is None else self.synthetic_chi.tolist(),
            "schedule": {
                "zeta_steps": list(self.schedule.zeta_steps),
                "tau": list(self.schedule.tau_sequence),
                "warm_start": self.schedule.warm_start,
                "max_bisections": self.schedule.max_bisections,
            },
            "newton": {
                "tolerance": self.newton.residual_tolerance,
                "max_iterations": self.newton.max_iterations,
                "backtrack": self.newton.backtrack,
                "min_step": self.newton.min_step,
                "linear_rtol": self.newton.linear_rtol,
                "predictor": self.newton.predictor,
            },
            "checks": list(self.checks),
            "sweep_grids": list(self.sweep_grids),
            "verify_candidate": self.verify_candidate,
        }


class _Locator:
    """Maps (section, key) to a line number of the source text."""

    def __init__(self, text):
        self.lines = text.splitlines()

    def line(self, section, key=None):
        current = ""
        header = re.compile(r"^\s*\[\s*([A-Za-z0-9_.]+)\s*\]")
        for i, raw in enumerate(self.lines, 1):
            m = header.match(raw)
            if m:
                current = m.group(1)
                if key is None and current == section:
                    return i
                continue
            if key is not None and current == section and re.match(rf"^\s*{re.escape(key)}\s*=", raw):
                return i
        return None

    def error(self, message, section, key=None):
        ln = self.line(section, key)
        where = f"line {ln}: " if ln else ""
        name = ".".join(p for p in (section, key) if p)
        return ConfigError(f"{where}{name}: {message}")


def _number(value, loc, section, key, kind=float):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise loc.error(f"expected a number, got {value!r}", section, key)
    if kind is int:
        if not isinstance(value, int):
            raise loc.error(f"expected an integer, got {value!r}", section, key)
        return int(value)
    if not math.isfinite(value):
        raise loc.error("must be finite", section, key)
    return float(value)


def _number_list(value, loc, section, key, kind=float):
    if not isinstance(value, list):
        raise loc.error("expected a list", section, key)
    return tuple(_number(v, loc, section, key, kind) for v in value)


def _potential(table, n, loc, section):
    if "quadratic" not in table:
        raise loc.error("missing quadratic part", section)
    q = table["quadratic"]
    if isinstance(q, (int, float)) and not isinstance(q, bool):
        q = (float(q) * np.eye(n)).tolist()
    if not isinstance(q, list) or len(q) != n or not all(isinstance(r, list) and len(r) == n for r in q):
        raise loc.error(f"expected a scalar or an {n}x{n} nested list", section, "quadratic")
    q = [[_number(x, loc, section, "quadratic") for x in row] for row in q]
    modes = []
    for m in table.get("modes", []):
        if not isinstance(m, dict) or "k" not in m:
            raise loc.error("each mode needs k, and optionally cos and sin amplitudes", section, "modes")
        extra = set(m) - {"k", "cos", "sin"}
        if extra:
            raise loc.error(f"unknown mode keys {sorted(extra)}", section, "modes")
        k = m["k"] if isinstance(m["k"], list) else [m["k"]]
        k = _number_list(k, loc, section, "modes", int)
        modes.append((k, _number(m.get("cos", 0.0), loc, section, "modes"), _number(m.get("sin", 0.0), loc, section, "modes")))
    try:
        return PotentialSpec(np.array(q), tuple(modes))
    except InputError as exc:
        raise loc.error(str(exc), section) from exc


def parse_config(text, source=None):
    """Build a RunConfig from TOML text; raises ConfigError with line diagnostics."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"syntax error: {exc}") from exc
    loc = _Locator(text)

    for section, allowed in _SECTIONS.items():
        table = data if section == "" else data.get(section, {})
        if not isinstance(table, dict):
            raise loc.error("expected a section", "", section)
        unknown = set(table) - allowed
        if unknown:
            name = sorted(unknown)[0]
            raise loc.error("unknown key", section, name)

    if "n" not in data:
        raise ConfigError("n: missing spatial dimension")
    n = _number(data["n"], loc, "", "n", int)
    if not 1 <= n <= 3:
        raise loc.error("dimension must be 1, 2 or 3", "", "n")

    grid = data.get("grid", {})
    N = _number(grid.get("N", 32), loc, "grid", "N", int)
    time_points = _number(grid.get("time_points", N + 1), loc, "grid", "time_points", int)
    if N < 4:
        raise loc.error("need at least 4 points per torus direction", "grid", "N")
    if time_points < 5:
        raise loc.error("need at least 5 time points", "grid", "time_points")

    branch = select_branch(n)
    if "branch" in data:
        b = data["branch"]
        theta = _number(b.get("theta", branch.theta), loc, "branch", "theta")
        big = _number(b.get("big_theta", branch.big_theta), loc, "branch", "big_theta")
        try:
            branch = PhaseBranch(n, theta, big)
        except InputError as exc:
            raise loc.error(str(exc), "branch") from exc

    has_pair = "u0" in data or "u1" in data
    has_chi = "synthetic_chi" in data
    if has_pair == has_chi:
        raise ConfigError("exactly one of (u0 and u1) or synthetic_chi must be given")
    pair, chi = None, None
    if has_pair:
        for name in ("u0", "u1"):
            if name not in data:
                raise ConfigError(f"{name}: missing boundary potential")
        u0 = _potential(data["u0"], n, loc, "u0")
        u1 = _potential(data["u1"], n, loc, "u1")
        try:
            pair = BoundaryPair(u0, u1)
        except InputError as exc:
            raise loc.error(str(exc), "u1", "quadratic") from exc
    else:
        m = data["synthetic_chi"].get("matrix")
        if not isinstance(m, list):
            raise loc.error("missing matrix", "synthetic_chi")
        chi = np.array([[_number(x, loc, "synthetic_chi", "matrix") for x in row] for row in m])
        if chi.shape != (n + 1, n + 1) or not np.array_equal(chi, chi.T):
            raise loc.error(f"expected a symmetric {n + 1}x{n + 1} matrix", "synthetic_chi", "matrix")

    sched = data.get("schedule", {})
    defaults = ContinuationSchedule()
    kwargs = {}
    if "zeta_steps" in sched:
        kwargs["zeta_steps"] = _number_list(sched["zeta_steps"], loc, "schedule", "zeta_steps")
    if "tau" in sched:
        kwargs["tau_sequence"] = _number_list(sched["tau"], loc, "schedule", "tau")
    if "warm_start" in sched:
        if not isinstance(sched["warm_start"], bool):
            raise loc.error("expected true or false", "schedule", "warm_start")
        kwargs["warm_start"] = sched["warm_start"]
    if "max_bisections" in sched:
        kwargs["max_bisections"] = _number(sched["max_bisections"], loc, "schedule", "max_bisections", int)
    try:
        schedule = replace(defaults, **kwargs)
    except ValueError as exc:
        raise loc.error(str(exc), "schedule", next(iter(k for k in ("tau", "zeta_steps") if k in sched), None)) from exc

    nw = data.get("newton", {})
    names = {"tolerance": "residual_tolerance", "max_iterations": "max_iterations", "backtrack": "backtrack",
             "min_step": "min_step", "linear_rtol": "linear_rtol", "predictor": "predictor"}
    nk = {}
    for key, attr in names.items():
        if key in nw:
            if key == "predictor":
                if not isinstance(nw[key], bool):
                    raise loc.error("expected true or false", "newton", key)
                nk[attr] = nw[key]
            else:
                nk[attr] = _number(nw[key], loc, "newton", key, int if key == "max_iterations" else float)
    try:
        newton = NewtonSettings(**nk)
    except ValueError as exc:
        raise loc.error(str(exc), "newton") from exc

    checks = DEFAULT_CHECKS
    if "checks" in data and "enabled" in data["checks"]:
        checks = data["checks"]["enabled"]
        if not isinstance(checks, list) or any(c not in KNOWN_CHECKS for c in checks):
            raise loc.error(f"entries must be among {list(KNOWN_CHECKS)}", "checks", "enabled")
        checks = tuple(checks)

    out = data.get("output", {})
    output_dir = out.get("dir", "out")
    if not isinstance(output_dir, str):
        raise loc.error("expected a string", "output", "dir")
    write_geodesic = out.get("geodesic", True)
    if not isinstance(write_geodesic, bool):
        raise loc.error("expected true or false", "output", "geodesic")

    grids = _number_list(data.get("sweep", {}).get("grids", [16, 32, 64]), loc, "sweep", "grids", int)
    if len(grids) < 1 or any(g < 4 for g in grids) or list(grids) != sorted(set(grids)):
        raise loc.error("expected increasing grid sizes >= 4", "sweep", "grids")

    candidate = data.get("verify", {}).get("candidate", "solve")
    if candidate not in ("solve", "zero"):
        raise loc.error("expected 'solve' or 'zero'", "verify", "candidate")

    return RunConfig(
        n=n,
        N=N,
        time_points=time_points,
        branch=branch,
        pair=pair,
        synthetic_chi=chi,
        schedule=schedule,
        newton=newton,
        checks=checks,
        output_dir=output_dir,
        write_geodesic=write_geodesic,
        sweep_grids=grids,
        verify_candidate=candidate,
        source=source,
    )


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    return parse_config(text, source=str(path))
