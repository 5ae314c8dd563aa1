"""Routing controllers: OCMPC, MPC to optimality, batch with hindsight, proportional.

Online controllers share one round protocol. ``round(plant_state,
forecast, realized_F)`` receives a forecast of shape ``(P, W + 2)`` made at
the current traffic state: columns ``0..W`` cover the current window and
columns ``1..W + 1`` the next one. It returns the implemented decision, the
new plant state, the observation and a diagnostics dict. ``step_ms`` in the
diagnostics is controller compute time; plant physics is excluded.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import plant as plant_mod
from .barrier import BarrierProblem, newton_kkt_step, phase_one, solve_centering, solve_to_optimality
from .model import SystemConfig, build_problem, interior_witness, window_decision
from .plant import ControllerDecision, PlantState

# optimizers see at least this much forecast demand; a zero demand row would
# pin its inflows at their lower bound and leave no strict interior
DEMAND_FLOOR = 1e-3
# minimum slack restored after the warm shift of the rolling window
SHIFT_MARGIN = 1e-6


def feedback_correction(f_in, realized_F) -> np.ndarray:
    """Rescale each priority's inflow split so it sums to the realized arrivals.

    Rows with zero planned inflow are split uniformly. Entries are then
    rounded to integer multiples of ``spacing(F[p])`` by largest remainder,
    so every partial sum is exact and ``row.sum() == realized_F[p]`` holds
    in any summation order.
    """
    f_in = np.asarray(f_in, dtype=float)
    F = np.asarray(realized_F, dtype=float)
    if f_in.ndim != 2 or F.shape != (f_in.shape[0],):
        raise ValueError(f"shapes {f_in.shape} and {F.shape} do not match")
    if np.any(f_in < 0) or np.any(F < 0):
        raise ValueError("inflows and arrivals must be non-negative")
    M = f_in.shape[1]
    out = np.zeros_like(f_in)
    for p in range(f_in.shape[0]):
        if F[p] == 0:
            continue
        total = f_in[p].sum()
        row = f_in[p] * (F[p] / total) if total > 0 else np.full(M, F[p] / M)
        unit = np.spacing(F[p])
        scaled = row / unit
        units = np.floor(scaled)
        short = int(F[p] / unit - units.sum())
        if short >= 0:
            order = np.argsort(units - scaled, kind="stable")  # largest remainder first
        else:
            order = np.argsort(-units, kind="stable")
        for i in range(abs(short)):
            units[order[i % M]] += 1 if short > 0 else -1
        if units.min() < 0:
            raise RuntimeError(f"inflow of priority {p} cannot match {F[p]!r} exactly")
        out[p] = units * unit
    return out


def project_weights(v, prev_w=None, dw_bar: float = 1.0, iters: int = 100) -> np.ndarray:
    """Euclidean projection of each modem's weights onto the simplex within the ramp box.

    The box is ``[max(0, prev - dw_bar), min(1, prev + dw_bar)]`` (``[0, 1]``
    without ``prev_w``); the shift ``theta`` in ``clip(v - theta, lo, hi)`` is
    found by bisection per modem.
    """
    v = np.asarray(v, dtype=float)
    if prev_w is None:
        lo, hi = np.zeros_like(v), np.ones_like(v)
    else:
        prev = np.asarray(prev_w, dtype=float)
        lo, hi = np.maximum(prev - dw_bar, 0.0), np.minimum(prev + dw_bar, 1.0)
    if np.any(lo.sum(axis=0) > 1 + 1e-12) or np.any(hi.sum(axis=0) < 1 - 1e-12):
        raise ValueError("ramp box does not meet the simplex")
    a = (v - hi).min(axis=0)
    b = (v - lo).max(axis=0)
    for _ in range(iters):
        mid = 0.5 * (a + b)
        over = np.clip(v - mid, lo, hi).sum(axis=0) > 1
        a = np.where(over, mid, a)
        b = np.where(over, b, mid)
    return np.clip(v - 0.5 * (a + b), lo, hi)


def floored(forecast) -> np.ndarray:
    return np.maximum(np.asarray(forecast, dtype=float), DEMAND_FLOOR)


def implement(w_raw, f_raw, realized_F, prev_w, config: SystemConfig) -> ControllerDecision:
    """Turn a planned slot into a plant-valid decision."""
    w = project_weights(w_raw, prev_w, config.dw_bar)
    f_in = feedback_correction(np.maximum(f_raw, 0.0), realized_F)
    return ControllerDecision(w=w, f_in=f_in)


def uniform_weights(config: SystemConfig) -> np.ndarray:
    return np.full((config.P, config.M), 1.0 / config.P)


def warm_shift(x: np.ndarray, layout, observed_Q) -> np.ndarray:
    """Advance the window by one slot: ``tau + 1 -> tau``, last slot duplicated, Q(0) observed."""
    y = x.copy()
    for fam in ("f_in", "w", "loss", "f_out", "Q", "dQ"):
        v = layout.view(y, fam)
        v[:-1] = v[1:].copy()
    layout.view(y, "Q")[0] = np.asarray(observed_Q).T
    return y


def restore_interior(x, problem, observed_Q, forecast, prev_w, margin=SHIFT_MARGIN):
    """Make ``x`` strictly interior for ``problem``; returns ``(x, repaired)``.

    Weights whose slot-0 ramp rows are violated move to the middle of their
    new ramp box; any remaining shortfall is closed by blending toward the
    interior witness of the new round data.
    """
    s = problem.slack(x)
    if s.min() > margin:
        return x, False
    layout, cfg = problem.layout, problem.config
    x = x.copy()
    bad = np.minimum(s[problem.ramp_up_rows], s[problem.ramp_down_rows]) <= margin
    if bad.any():
        prev = np.asarray(prev_w).T.ravel()
        mid = 0.5 * (np.maximum(prev - cfg.dw_bar, 0.0) + np.minimum(prev + cfg.dw_bar, 1.0))
        w0 = layout.view(x, "w")[0].reshape(-1)
        w0[bad] = mid[bad]
        s = problem.slack(x)
    if s.min() > margin:
        return x, True
    xw = interior_witness(cfg, layout, observed_Q, forecast, prev_w, problem.terminal_mode)
    sw = problem.slack(xw)
    target = min(margin, 0.5 * sw.min())
    short = s < target
    theta = np.max((target - s[short]) / (sw[short] - s[short]))
    return (1 - theta) * x + theta * xw, True


@dataclass
class RoundRecord:
    decision: ControllerDecision
    state: PlantState
    observation: plant_mod.ObservedState
    diagnostics: dict


class ProportionalController:
    """Static weights ``k_p / sum(k)``; inflow split uniformly across modems."""

    name = "proportional"

    def __init__(self, config: SystemConfig):
        self.config = config
        k = config.k_array
        self.w = np.repeat((k / k.sum())[:, None], config.M, axis=1)

    def start(self, forecast, plant_state: PlantState):
        return self

    def round(self, plant_state, forecast, realized_F) -> RoundRecord:
        t0 = time.perf_counter()
        f_in = feedback_correction(np.zeros((self.config.P, self.config.M)), realized_F)
        dec = ControllerDecision(w=self.w.copy(), f_in=f_in)
        ms = 1e3 * (time.perf_counter() - t0)
        state, obs = plant_mod.apply(plant_state, dec, self.config, realized_F)
        return RoundRecord(dec, state, obs, {"step_ms": ms, "factorizations": 0})


class OcmpcController:
    """One Newton step on the barrier objective per round.

    The iterate is warm-started at the barrier center of the first window
    (computed by :meth:`start`, outside the timed rounds). Every round
    implements slot 0 of the current iterate, observes the plant, rebuilds
    the right-hand sides, shifts the window and takes exactly one KKT step.
    """

    name = "ocmpc"

    def __init__(self, config: SystemConfig, eta: Optional[float] = None):
        self.config = config
        self.eta = config.eta if eta is None else eta
        self.problem = None
        self.x = None
        self.prev_w = None
        self.init_stats: dict = {}

    def start(self, forecast, plant_state: PlantState):
        cfg = self.config
        fc = floored(np.asarray(forecast)[:, : cfg.W + 1])
        self.prev_w = uniform_weights(cfg)
        self.problem = build_problem(cfg, plant_state.Q, fc, self.prev_w)
        xw = interior_witness(cfg, self.problem.layout, plant_state.Q, fc, self.prev_w)
        stats: dict = {}
        x0 = phase_one(self.problem, x_start=xw, stats=stats)
        self.x = solve_centering(BarrierProblem(self.problem, self.eta), x0, stats=stats)
        self.init_stats = stats
        return self

    def round(self, plant_state, forecast, realized_F) -> RoundRecord:
        cfg = self.config
        t0 = time.perf_counter()
        w_raw, f_raw = window_decision(self.x, self.problem.layout)
        dec = implement(w_raw, f_raw, realized_F, self.prev_w, cfg)
        ms = time.perf_counter() - t0

        state, obs = plant_mod.apply(plant_state, dec, cfg, realized_F)

        t1 = time.perf_counter()
        fc_next = floored(np.asarray(forecast)[:, 1: cfg.W + 2])
        self.prev_w = dec.w
        self.problem = self.problem.with_round_data(obs.Q, fc_next, dec.w)
        x = warm_shift(self.x, self.problem.layout, obs.Q)
        x, repaired = restore_interior(x, self.problem, obs.Q, fc_next, dec.w)
        step = newton_kkt_step(x, BarrierProblem(self.problem, self.eta))
        self.x = step.x_next
        ms += time.perf_counter() - t1
        diag = {
            "step_ms": 1e3 * ms,
            "factorizations": step.factorizations,
            "primal_residual": step.primal_residual,
            "newton_decrement": step.newton_decrement,
            "step_size": step.step_size,
            "min_slack": float(self.problem.slack(self.x).min()),
            "repaired": repaired,
        }
        return RoundRecord(dec, state, obs, diag)


class MpcController:
    """Solve every window to optimality from a fresh phase-I point."""

    name = "mpc"

    def __init__(self, config: SystemConfig, mu: float = 20.0, eta0: float = 10.0, tol: float = 1e-6):
        self.config = config
        self.mu, self.eta0, self.tol = mu, eta0, tol
        self.problem = None
        self.prev_w = None

    def start(self, forecast, plant_state: PlantState):
        cfg = self.config
        self.prev_w = uniform_weights(cfg)
        self.problem = build_problem(cfg, plant_state.Q, floored(np.asarray(forecast)[:, : cfg.W + 1]),
                                     self.prev_w)
        return self

    def round(self, plant_state, forecast, realized_F) -> RoundRecord:
        cfg = self.config
        t0 = time.perf_counter()
        fc = floored(np.asarray(forecast)[:, : cfg.W + 1])
        self.problem = self.problem.with_round_data(plant_state.Q, fc, self.prev_w)
        xw = interior_witness(cfg, self.problem.layout, plant_state.Q, fc, self.prev_w)
        res = solve_to_optimality(self.problem, mu=self.mu, eta0=self.eta0, tol=self.tol, witness=xw)
        w_raw, f_raw = window_decision(res.x, self.problem.layout)
        dec = implement(w_raw, f_raw, realized_F, self.prev_w, cfg)
        ms = 1e3 * (time.perf_counter() - t0)
        state, obs = plant_mod.apply(plant_state, dec, cfg, realized_F)
        self.prev_w = dec.w
        diag = {"step_ms": ms, "factorizations": res.factorizations,
                "newton_steps": res.newton_steps, "objective": res.objective}
        return RoundRecord(dec, state, obs, diag)


@dataclass
class BatchResult:
    decisions: list
    observations: list
    step_costs: np.ndarray
    total_cost: float
    lp_objective: float
    solve: object


def batch_hindsight(config: SystemConfig, arrivals, mu: float = 20.0, tol: float = 1e-6) -> BatchResult:
    """Full-horizon plan with the realized arrivals known in advance.

    ``arrivals`` has shape ``(T, P)``. The stacked problem spans all ``T``
    steps with the terminal queue pinned to ``Q0``. Its per-step decisions
    are then replayed through the plant; the replayed loss cost is the
    reported cost, the LP objective is kept alongside.
    """
    arrivals = np.asarray(arrivals, dtype=float)
    T = arrivals.shape[0]
    if arrivals.shape != (T, config.P):
        raise ValueError(f"arrivals must have shape (T, {config.P})")
    state = PlantState.initial(config)
    prev_w = uniform_weights(config)
    demand = floored(arrivals.T)
    problem = build_problem(config, state.Q, demand, prev_w, terminal_mode="pinned", window=T - 1)
    xw = interior_witness(config, problem.layout, state.Q, demand, prev_w, "pinned")
    res = solve_to_optimality(problem, mu=mu, tol=tol, witness=xw)

    decisions, observations, costs = [], [], np.empty(T)
    for t in range(T):
        w_raw, f_raw = window_decision(res.x, problem.layout, tau=t)
        dec = implement(w_raw, f_raw, arrivals[t], prev_w, config)
        new_state, obs = plant_mod.apply(state, dec, config, arrivals[t])
        costs[t] = plant_mod.step_cost(obs.loss, config)
        decisions.append(dec)
        observations.append(obs)
        state, prev_w = new_state, dec.w
    return BatchResult(decisions, observations, costs, state.cumulative_loss_cost, res.objective, res)
