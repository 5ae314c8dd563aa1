"""Monte Carlo campaigns, capacity calibration and the command-line surface.

Config files are flat ``key = value`` text with namespaced keys::

    system.M = 16
    system.k = 10, 4, 1
    mmpp.lambda = 20, 25, 30
    mmpp.P_lambda = 0.8,0.15,0.05; 0.1,0.8,0.1; 0.05,0.2,0.75

``system.C_bar = auto`` (the default) runs :func:`calibrate_capacity` before
simulating. Unknown keys are errors. ``python -m ocmpc --help`` lists the
subcommands.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import logging
import math
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy

from . import __version__
from ._kkt import SingularSystemError
from .barrier import CenteringError, InfeasibleProblemError, NotInteriorError
from .controllers import MpcController, OcmpcController, ProportionalController, batch_hindsight
from .model import SystemConfig
from .plant import DecisionRejected, PlantState
from .traffic import MmppConfig, TrafficTrace, forecast, run_rng, sample_trace

log = logging.getLogger(__name__)

METHODS = ("batch", "mpc", "ocmpc", "proportional")
# expected gaps versus batch, printed next to the measured ones
REFERENCE_GAPS = {"mpc": 0.0124, "ocmpc": 0.1973, "proportional": 0.4927}
# C_bar candidates, searched from the largest down
CALIBRATION_GRID = (16.0, 8.0, 4.0, 3.0, 2.5, 2.0, 1.75, 1.5, 1.25, 1.0, 0.75, 0.5)
CALIBRATION_TARGET = (0.64, 0.70)

# controller aborts that mark a run failed instead of stopping the campaign
SOLVER_ERRORS = (CenteringError, InfeasibleProblemError, NotInteriorError,
                 SingularSystemError, DecisionRejected, np.linalg.LinAlgError)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CALIBRATION = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class CalibrationError(RuntimeError):
    def __init__(self, message, frontier=()):
        super().__init__(message)
        self.frontier = list(frontier)


@dataclass(frozen=True)
class CalibrationSettings:
    target: tuple = CALIBRATION_TARGET
    grid: tuple = CALIBRATION_GRID
    horizon: int = 100
    runs: int = 10

    def __post_init__(self):
        object.__setattr__(self, "target", tuple(float(v) for v in self.target))
        object.__setattr__(self, "grid", tuple(float(v) for v in self.grid))
        if not self.grid or not all(0 < c < math.inf for c in self.grid):
            raise ConfigError("calibration.grid needs finite positive capacities")
        if self.horizon < 1 or self.runs < 1:
            raise ConfigError("calibration.horizon and calibration.runs must be >= 1")


@dataclass(frozen=True)
class ExperimentSpec:
    system: SystemConfig = field(default_factory=SystemConfig)
    mmpp: MmppConfig = field(default_factory=MmppConfig)
    runs: int = 20
    master_seed: int = 0
    methods: tuple = METHODS
    output_dir: Optional[str] = None
    # barrier path of the full solvers (MPC and batch)
    mu: float = 20.0
    eta0: float = 10.0
    tol: float = 1e-6
    calibration: CalibrationSettings = field(default_factory=CalibrationSettings)
    # True when C_bar/ds are still to be calibrated
    auto_capacity: bool = False

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if not self.methods:
            raise ConfigError("at least one method is required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {list(METHODS)}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods must not repeat")
        if tuple(self.mmpp.k) != tuple(self.system.k):
            raise ConfigError("mmpp.k must equal system.k")
        lo, hi = self.calibration.target
        if not 0 <= lo <= hi <= 1:
            raise ConfigError("calibration.target must satisfy 0 <= low <= high <= 1")


@dataclass
class RunResult:
    method: str
    run: int
    cum_cost: Optional[np.ndarray]  # (T,) cumulative loss cost after each step
    step_ms: Optional[np.ndarray]   # (T,) controller compute time; None for batch
    diagnostics: dict
    trace_digest: str
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None


# ---------------------------------------------------------------- config

def _floats(text):
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def _matrix(text):
    return tuple(_floats(row) for row in text.split(";") if row.strip())


def _int(text):
    value = float(text)
    if value != int(value):
        raise ValueError(f"{text!r} is not an integer")
    return int(value)


def _capacity(text):
    return None if text.strip().lower() == "auto" else float(text)


def _methods(text):
    return tuple(m.strip() for m in text.split(",") if m.strip())


# key -> (section, field, parser)
CONFIG_KEYS = {
    "system.M": ("system", "M", _int),
    "system.P": ("system", "P", _int),
    "system.W": ("system", "W", _int),
    "system.T": ("system", "T", _int),
    "system.k": ("system", "k", _floats),
    "system.Q_bar": ("system", "Q_bar", float),
    "system.Q0": ("system", "Q0", float),
    "system.dw_bar": ("system", "dw_bar", float),
    "system.ds": ("system", "ds", _capacity),
    "system.C_bar": ("system", "C_bar", _capacity),
    "system.eta": ("system", "eta", float),
    "mmpp.P_lambda": ("mmpp", "Pmat", _matrix),
    "mmpp.lambda": ("mmpp", "lam", _floats),
    "mmpp.rate_scale": ("mmpp", "rate_scale", float),
    "mmpp.initial_state": ("mmpp", "initial_state", _int),
    "experiment.runs": ("experiment", "runs", _int),
    "experiment.seed": ("experiment", "master_seed", _int),
    "experiment.methods": ("experiment", "methods", _methods),
    "solver.mu": ("experiment", "mu", float),
    "solver.eta0": ("experiment", "eta0", float),
    "solver.tol": ("experiment", "tol", float),
    "calibration.target": ("calibration", "target", _floats),
    "calibration.grid": ("calibration", "grid", _floats),
    "calibration.horizon": ("calibration", "horizon", _int),
    "calibration.runs": ("calibration", "runs", _int),
}


def parse_config_text(text: str) -> dict:
    """Raw ``key -> string`` pairs of a flat config; duplicates and unknown keys rejected."""
    parser = configparser.ConfigParser(interpolation=None, strict=True,
                                       comment_prefixes=("#",), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    raw = dict(parser["config"])
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return raw


def spec_from_mapping(raw: dict, **overrides) -> ExperimentSpec:
    groups: dict = {"system": {}, "mmpp": {}, "experiment": {}, "calibration": {}}
    for key, text in raw.items():
        section, name, parse = CONFIG_KEYS[key]
        try:
            groups[section][name] = parse(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from exc
    groups["experiment"].update({k: v for k, v in overrides.items() if v is not None})

    sysargs = groups["system"]
    C_bar, ds = sysargs.pop("C_bar", None), sysargs.pop("ds", None)
    auto = C_bar is None
    try:
        system = SystemConfig(**sysargs)
        if not auto:
            system = system.with_capacity(C_bar, ds)
        mmpp = MmppConfig(k=system.k, **groups["mmpp"])
        calibration = CalibrationSettings(**groups["calibration"])
        if len(calibration.target) != 2:
            raise ValueError("calibration.target needs two values")
        return ExperimentSpec(system=system, mmpp=mmpp, calibration=calibration,
                              auto_capacity=auto, **groups["experiment"])
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_spec(path, **overrides) -> ExperimentSpec:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return spec_from_mapping(parse_config_text(text), **overrides)


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)):
        if value and isinstance(value[0], (tuple, list)):
            return "; ".join(_fmt(row) for row in value)
        return ", ".join(_fmt(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def spec_to_text(spec: ExperimentSpec) -> str:
    """The fully resolved spec in config syntax (reloadable with :func:`load_spec`)."""
    s, mm, cal = spec.system, spec.mmpp, spec.calibration
    lines = [f"system.{name} = {_fmt(getattr(s, name))}"
             for name in ("M", "P", "W", "T", "k", "Q_bar", "Q0", "dw_bar", "ds", "C_bar", "eta")]
    if spec.auto_capacity:
        lines = [ln for ln in lines if not ln.startswith(("system.ds", "system.C_bar"))]
        lines.append("system.C_bar = auto")
    lines += [
        f"mmpp.P_lambda = {_fmt(mm.Pmat)}",
        f"mmpp.lambda = {_fmt(mm.lam)}",
        f"mmpp.rate_scale = {_fmt(float(mm.rate_scale))}",
    ]
    if mm.initial_state is not None:
        lines.append(f"mmpp.initial_state = {mm.initial_state}")
    lines += [
        f"experiment.runs = {spec.runs}",
        f"experiment.seed = {spec.master_seed}",
        f"experiment.methods = {', '.join(spec.methods)}",
        f"solver.mu = {_fmt(spec.mu)}",
        f"solver.eta0 = {_fmt(spec.eta0)}",
        f"solver.tol = {_fmt(spec.tol)}",
        f"calibration.target = {_fmt(cal.target)}",
        f"calibration.grid = {_fmt(cal.grid)}",
        f"calibration.horizon = {cal.horizon}",
        f"calibration.runs = {cal.runs}",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- calibration

def proportional_loss_fraction(system: SystemConfig, mmpp: MmppConfig, C_bar: float,
                               horizon: int, runs: int, seed: int) -> float:
    """Lost over offered packets of the proportional controller at capacity ``C_bar``.

    ``C_bar = inf`` and ``C_bar = 0`` are sentinels for unlimited and absent
    links (loss fractions 0 and 1).
    """
    if math.isinf(C_bar):
        return 0.0
    if C_bar <= 0:
        return 1.0
    cfg = dataclasses.replace(system.with_capacity(C_bar), T=max(horizon, system.W + 1))
    lost = offered = 0.0
    for run in range(runs):
        trace = sample_trace(mmpp, horizon, run_rng(seed, run))
        ctrl = ProportionalController(cfg)
        state = PlantState.initial(cfg)
        for t in range(horizon):
            rec = ctrl.round(state, None, trace.arrivals[t])
            state = rec.state
            lost += float(rec.observation.loss.sum())
        offered += float(trace.arrivals.sum())
    return lost / offered if offered > 0 else 0.0


def calibrate_capacity(spec: ExperimentSpec, target_loss_fraction_range=None):
    """Pick ``(ds, C_bar)`` with ``ds = 1 / C_bar`` from the calibration grid.

    Grid points are tried from the largest capacity down; the first whose
    proportional-controller loss fraction lies in the target range wins.
    Returns ``(ds, C_bar, search_log)`` where the log lists
    ``(C_bar, loss_fraction)`` for every point tried.
    """
    cal = spec.calibration
    lo, hi = cal.target if target_loss_fraction_range is None else target_loss_fraction_range
    search = []
    for C_bar in sorted(cal.grid, reverse=True):
        frac = proportional_loss_fraction(spec.system, spec.mmpp, C_bar, cal.horizon,
                                          cal.runs, spec.master_seed)
        search.append((C_bar, frac))
        log.info("calibration: C_bar=%g loss fraction %.4f", C_bar, frac)
        if lo <= frac <= hi:
            return 1.0 / C_bar, C_bar, search
    frontier = ", ".join(f"C_bar={c:g}: {f:.4f}" for c, f in search)
    raise CalibrationError(f"no grid point gives a loss fraction in [{lo}, {hi}]; tried {frontier}",
                           search)


def resolve_capacity(spec: ExperimentSpec):
    """Spec with calibrated capacity (when requested) and the calibration log."""
    if not spec.auto_capacity:
        return spec, []
    ds, C_bar, search = calibrate_capacity(spec)
    system = spec.system.with_capacity(C_bar, ds)
    return dataclasses.replace(spec, system=system, auto_capacity=False), search


# ---------------------------------------------------------------- campaigns

def _make_controller(method: str, spec: ExperimentSpec):
    cfg = spec.system
    if method == "ocmpc":
        return OcmpcController(cfg)
    if method == "mpc":
        return MpcController(cfg, mu=spec.mu, eta0=spec.eta0, tol=spec.tol)
    return ProportionalController(cfg)


def _run_online(method, spec: ExperimentSpec, trace: TrafficTrace):
    cfg, mm = spec.system, spec.mmpp
    T = cfg.T
    ctrl = _make_controller(method, spec)
    state = PlantState.initial(cfg)
    ctrl.start(forecast(int(trace.states[0]), cfg.W + 1, mm), state)
    cum, ms = np.empty(T), np.empty(T)
    factorizations, repaired, obs = [], 0, []
    for t in range(T):
        fc = forecast(int(trace.states[t]), cfg.W + 1, mm)
        rec = ctrl.round(state, fc, trace.arrivals[t])
        state = rec.state
        obs.append(rec.observation)
        cum[t] = state.cumulative_loss_cost
        ms[t] = rec.diagnostics["step_ms"]
        factorizations.append(rec.diagnostics.get("factorizations", 0))
        repaired += int(bool(rec.diagnostics.get("repaired", False)))
    diag = {"factorizations": np.asarray(factorizations), "repaired": repaired}
    diag.update(_conservation(obs, trace))
    return cum, ms, diag


def _run_batch(spec: ExperimentSpec, trace: TrafficTrace):
    t0 = time.perf_counter()
    res = batch_hindsight(spec.system, trace.arrivals, mu=spec.mu, tol=spec.tol)
    cum = np.cumsum(res.step_costs)
    diag = {"lp_objective": res.lp_objective, "solve_ms": 1e3 * (time.perf_counter() - t0),
            "factorizations": res.solve.factorizations}
    diag.update(_conservation(res.observations, trace))
    return cum, None, diag


def _conservation(observations, trace: TrafficTrace) -> dict:
    # worst per-step packet balance and inflow-vs-arrivals mismatch of a run
    balance = max(float(np.abs(o.balance_residual()).max()) for o in observations)
    inflow = max(float(np.abs(o.f_in.sum(axis=1) - a).max())
                 for o, a in zip(observations, trace.arrivals))
    return {"balance_max": balance, "inflow_max": inflow}


def run_one(method: str, spec: ExperimentSpec, trace: TrafficTrace, run: int) -> RunResult:
    digest = trace.digest()
    try:
        if method == "batch":
            cum, ms, diag = _run_batch(spec, trace)
        else:
            cum, ms, diag = _run_online(method, spec, trace)
    except SOLVER_ERRORS as exc:
        log.warning("run %d: %s failed: %s", run, method, exc)
        return RunResult(method, run, None, None, {}, digest, f"{type(exc).__name__}: {exc}")
    return RunResult(method, run, cum, ms, diag, digest)


def _run_all_methods(spec: ExperimentSpec, run: int) -> list:
    trace = sample_trace(spec.mmpp, spec.system.T, run_rng(spec.master_seed, run))
    out = []
    for method in (m for m in METHODS if m in spec.methods):
        t0 = time.perf_counter()
        res = run_one(method, spec, trace, run)
        if res.trace_digest != trace.digest():
            raise AssertionError("methods of one run saw different traces")
        out.append((res, time.perf_counter() - t0))
    return out


def run_experiment(spec: ExperimentSpec, progress=None, jobs: int = 1) -> list:
    """Every requested method on every run's trace, in ``(run, method)`` order.

    Each run draws its own trace from an independent stream of the master
    seed; all methods of that run consume the same trace. ``jobs > 1``
    spreads runs over worker processes without changing any result.
    """
    if spec.auto_capacity:
        raise ConfigError("capacity is not resolved; call resolve_capacity first")
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    runs = range(spec.runs)
    if jobs == 1:
        batches = (_run_all_methods(spec, run) for run in runs)
        pool = None
    else:
        pool = ProcessPoolExecutor(max_workers=jobs)
        batches = pool.map(_run_all_methods, [spec] * spec.runs, runs)
    results = []
    try:
        for batch in batches:
            for res, secs in batch:
                results.append(res)
                if progress is not None:
                    progress(res, secs)
    finally:
        if pool is not None:
            pool.shutdown(cancel_futures=True)
    return results


def aggregate(results: Sequence[RunResult]):
    """Mean and central 95% band of the cumulative cost per method and step.

    Returns ``(summary, gaps)``: ``summary[method] = (mean, lo, hi)`` arrays
    over successful runs, and ``gaps[method]`` the relative final-cost gap
    versus batch over runs where both succeeded (absent without batch).
    """
    ok = [r for r in results if not r.failed]
    if not ok:
        raise ValueError("no successful runs to aggregate")
    methods = [m for m in METHODS if any(r.method == m for r in ok)]
    summary = {}
    for m in methods:
        series = np.array([r.cum_cost for r in sorted(ok, key=lambda r: r.run) if r.method == m])
        summary[m] = (series.mean(axis=0),
                      np.percentile(series, 2.5, axis=0),
                      np.percentile(series, 97.5, axis=0))
    gaps = {}
    batch = {r.run: r.cum_cost[-1] for r in ok if r.method == "batch"}
    if batch:
        for m in methods:
            finals = {r.run: r.cum_cost[-1] for r in ok if r.method == m and r.run in batch}
            if not finals:
                continue
            runs = sorted(finals)
            base = float(np.mean([batch[i] for i in runs]))
            mean = float(np.mean([finals[i] for i in runs]))
            gaps[m] = (mean - base) / base if base > 0 else (0.0 if mean == 0 else math.inf)
    return summary, gaps


def dominance_violations(results: Sequence[RunResult]) -> list:
    """``(run, method, batch_cost, method_cost)`` where an online method beat batch."""
    batch = {r.run: r.cum_cost[-1] for r in results if r.method == "batch" and not r.failed}
    return [(r.run, r.method, batch[r.run], r.cum_cost[-1]) for r in results
            if r.method != "batch" and not r.failed and r.run in batch
            and r.cum_cost[-1] < batch[r.run]]


# ---------------------------------------------------------------- outputs

def write_results(results, path, timing_inline=False) -> None:
    """``method,run,t,cum_cost,step_ms``; ``step_ms`` is left empty unless ``timing_inline``.

    Wall times differ between executions, so by default they go to the
    separate timing file and this file stays byte-reproducible.
    """
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["method", "run", "t", "cum_cost", "step_ms"])
        for r in results:
            if r.failed:
                continue
            for t, c in enumerate(r.cum_cost):
                ms = repr(float(r.step_ms[t])) if timing_inline and r.step_ms is not None else ""
                wr.writerow([r.method, r.run, t, repr(float(c)), ms])


def write_timing(results, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["method", "run", "t", "step_ms", "factorizations"])
        for r in results:
            if r.failed or r.step_ms is None:
                continue
            fz = r.diagnostics.get("factorizations")
            for t, ms in enumerate(r.step_ms):
                wr.writerow([r.method, r.run, t, f"{ms:.4f}", int(fz[t])])


def write_summary(summary, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["method", "t", "mean", "p95_lo", "p95_hi"])
        for m, (mean, lo, hi) in summary.items():
            for t in range(len(mean)):
                wr.writerow([m, t, repr(float(mean[t])), repr(float(lo[t])), repr(float(hi[t]))])


def write_gaps(gaps, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["method", "final_gap_vs_batch"])
        for m, g in gaps.items():
            wr.writerow([m, repr(float(g))])


def write_manifest(path, spec, results, gaps, calibration_log, elapsed_s) -> None:
    failures = [r for r in results if r.failed]
    digests = {}
    for r in results:
        digests.setdefault(r.run, r.trace_digest)
    lines = [
        "# resolved spec",
        spec_to_text(spec).rstrip("\n"),
        "",
        "# environment",
        f"ocmpc {__version__}",
        f"python {platform.python_version()}, numpy {np.__version__}, scipy {scipy.__version__}",
        "",
        "# calibration",
    ]
    lines += [f"C_bar={c!r} proportional_loss_fraction={f!r}" for c, f in calibration_log] or ["not run"]
    lines += ["", "# trace digests (sha256 of states and arrivals)"]
    lines += [f"run {i}: {d}" for i, d in sorted(digests.items())]
    lines += ["", "# final gaps vs batch (reference values in parentheses)"]
    lines += [f"{m}: {g:.4%}" + (f" ({REFERENCE_GAPS[m]:.2%})" if m in REFERENCE_GAPS else "")
              for m, g in gaps.items()]
    for m in ("ocmpc", "mpc"):
        ms = [r.step_ms.mean() for r in results if r.method == m and not r.failed]
        if ms:
            lines.append(f"{m} mean step_ms: {np.mean(ms):.3f}")
    ok = [r for r in results if not r.failed]
    if ok:
        lines += ["", "# conservation (worst step over all runs)",
                  f"balance residual {max(r.diagnostics['balance_max'] for r in ok)!r}",
                  f"inflow minus arrivals {max(r.diagnostics['inflow_max'] for r in ok)!r}"]
    viol = dominance_violations(results)
    lines += ["", f"# online methods below batch: {len(viol)}"]
    lines += [f"run {i} {m}: batch {b!r} vs {c!r}" for i, m, b, c in viol]
    lines += ["", f"# failures: {len(failures)}"]
    lines += [f"run {r.run} {r.method}: {r.error}" for r in failures]
    lines += ["", f"elapsed_s {elapsed_s:.1f}"]
    Path(path).write_text("\n".join(lines) + "\n")


def simulate(spec: ExperimentSpec, out_dir, *, timing_inline=False, jobs=1):
    """Resolve capacity, run the campaign and write every output file."""
    t0 = time.perf_counter()
    spec, cal_log = resolve_capacity(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def progress(res, secs):
        status = "failed" if res.failed else f"cost {res.cum_cost[-1]:.3f}"
        log.info("run %d %-12s %s (%.1fs)", res.run, res.method, status, secs)

    results = run_experiment(spec, progress, jobs)
    write_results(results, out / "results.csv", timing_inline)
    write_timing(results, out / "timing.csv")
    summary, gaps = ({}, {})
    if any(not r.failed for r in results):
        summary, gaps = aggregate(results)
    write_summary(summary, out / "summary.csv")
    if gaps:
        write_gaps(gaps, out / "gaps.csv")
    write_manifest(out / "manifest.txt", spec, results, gaps, cal_log, time.perf_counter() - t0)
    return spec, results, gaps


# ---------------------------------------------------------------- CLI

def _build_parser():
    ap = argparse.ArgumentParser(prog="ocmpc", description="Payload routing experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="Monte Carlo comparison of routing methods")
    sim.add_argument("--config", required=True)
    sim.add_argument("--runs", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--methods", help="comma-separated subset of " + ",".join(METHODS))
    sim.add_argument("--out", required=True)
    sim.add_argument("--timing-inline", action="store_true",
                     help="write wall times into results.csv (breaks byte reproducibility)")
    sim.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")

    cal = sub.add_parser("calibrate", help="choose C_bar and ds for the configured traffic")
    cal.add_argument("--config", required=True)
    cal.add_argument("--out", required=True)

    tr = sub.add_parser("trace", help="one traffic trace (states and arrivals) as CSV")
    tr.add_argument("--config", required=True)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "simulate":
            methods = _methods(args.methods) if args.methods else None
            spec = load_spec(args.config, runs=args.runs, master_seed=args.seed, methods=methods)
            _, results, gaps = simulate(spec, args.out, timing_inline=args.timing_inline,
                                        jobs=args.jobs)
            for m, g in gaps.items():
                ref = f"  (reference {REFERENCE_GAPS[m]:.2%})" if m in REFERENCE_GAPS else ""
                print(f"{m:12s} gap vs batch {g:8.2%}{ref}")
            failed = [r for r in results if r.failed]
            if failed:
                print(f"{len(failed)} method runs failed; see manifest.txt", file=sys.stderr)
                return EXIT_SOLVER
        elif args.command == "calibrate":
            spec = load_spec(args.config)
            ds, C_bar, search = calibrate_capacity(spec)
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            with open(out / "calibration.csv", "w", newline="") as fh:
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow(["C_bar", "proportional_loss_fraction"])
                wr.writerows([repr(c), repr(f)] for c, f in search)
            (out / "calibrated.cfg").write_text(f"system.C_bar = {C_bar!r}\nsystem.ds = {ds!r}\n")
            print(f"C_bar = {C_bar:g}, ds = {ds:g}")
        else:
            spec = load_spec(args.config)
            trace = sample_trace(spec.mmpp, spec.system.T, run_rng(args.seed, 0))
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            trace.to_csv(args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except SOLVER_ERRORS as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
