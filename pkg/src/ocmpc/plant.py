"""Fluid queue dynamics of the modem banks.

Queues hold real-valued packet amounts. Every modem serves each priority at
``w / ds`` packets per step (never more than it holds), throttles the total
to ``C_bar`` proportionally, and on overflow drops the excess from the
cheapest priorities first.

The packet balance is evaluated in the fixed order
``((f_in - f_out) - loss) - dQ``; the plant defines ``dQ`` by that same
order, so the residual is exactly zero in floating point. New queues are
``Q + dQ`` clamped to ``[0, Q_bar]`` against roundoff.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import SystemConfig

# slack allowed when checking implemented decisions
WEIGHT_SUM_TOL = 1e-6
BOUND_TOL = 1e-9


class DecisionRejected(ValueError):
    pass


@dataclass(frozen=True)
class ControllerDecision:
    w: np.ndarray     # (P, M)
    f_in: np.ndarray  # (P, M)


@dataclass(frozen=True)
class ObservedState:
    Q: np.ndarray
    dQ: np.ndarray
    loss: np.ndarray
    f_out: np.ndarray
    f_in: np.ndarray
    realized_F: np.ndarray

    def balance_residual(self) -> np.ndarray:
        return ((self.f_in - self.f_out) - self.loss) - self.dQ


@dataclass(frozen=True)
class PlantState:
    Q: np.ndarray
    cumulative_loss_cost: float = 0.0
    step_index: int = 0
    last_w: Optional[np.ndarray] = None  # implemented weights of the previous step

    @classmethod
    def initial(cls, config: SystemConfig) -> "PlantState":
        return cls(Q=np.full((config.P, config.M), float(config.Q0)))


def step_cost(loss: np.ndarray, config: SystemConfig) -> float:
    """Loss cost of one step; fixed summation order shared by all callers."""
    return float(np.sum(config.k_array[:, None] * loss))


def check_decision(decision: ControllerDecision, config: SystemConfig,
                   last_w: Optional[np.ndarray]) -> None:
    shape = (config.P, config.M)
    w, f_in = np.asarray(decision.w), np.asarray(decision.f_in)
    for name, arr in (("w", w), ("f_in", f_in)):
        if arr.shape != shape:
            raise DecisionRejected(f"{name} has shape {arr.shape}, expected {shape}")
        if not np.all(np.isfinite(arr)):
            raise DecisionRejected(f"{name} has non-finite entries")

    def first(mask):
        p, m = np.argwhere(mask)[0]
        return f"(p={p}, m={m})"

    if np.any(w < -BOUND_TOL) or np.any(w > 1 + BOUND_TOL):
        raise DecisionRejected(f"w out of [0, 1] at {first((w < -BOUND_TOL) | (w > 1 + BOUND_TOL))}")
    sums = w.sum(axis=0)
    bad = np.abs(sums - 1) > WEIGHT_SUM_TOL
    if np.any(bad):
        m = int(np.argmax(bad))
        raise DecisionRejected(f"weights of modem {m} sum to {sums[m]:.9f}")
    if last_w is not None:
        ramp = np.abs(w - last_w) > config.dw_bar + BOUND_TOL
        if np.any(ramp):
            raise DecisionRejected(f"ramp bound violated at {first(ramp)}")
    if np.any(f_in < 0):
        raise DecisionRejected(f"negative inflow at {first(f_in < 0)}")


def apply(state: PlantState, decision: ControllerDecision, config: SystemConfig,
          realized_F=None):
    """Advance the queues by one step; returns ``(new_state, observation)``."""
    check_decision(decision, config, state.last_w)
    w = np.asarray(decision.w, dtype=float)
    f_in = np.asarray(decision.f_in, dtype=float)
    Q = state.Q
    k = config.k_array

    request = np.minimum(w / config.ds, Q + f_in)
    total = request.sum(axis=0)
    throttle = np.where(total > config.C_bar, config.C_bar / np.where(total > 0, total, 1.0), 1.0)
    f_out = request * throttle

    held = Q + f_in - f_out
    excess = np.maximum(held.sum(axis=0) - config.Q_bar, 0.0)
    loss = np.zeros_like(held)
    for p in np.argsort(k, kind="stable"):
        take = np.minimum(np.maximum(held[p], 0.0), excess)
        loss[p] = take
        excess = excess - take

    f_out, loss, dQ, Q_new = _settle(Q, f_in, f_out, loss, config.Q_bar, k)
    cost = state.cumulative_loss_cost + step_cost(loss, config)
    obs = ObservedState(
        Q=Q_new, dQ=dQ, loss=loss, f_out=f_out, f_in=f_in,
        realized_F=f_in.sum(axis=1) if realized_F is None else np.asarray(realized_F, dtype=float),
    )
    return PlantState(Q_new, cost, state.step_index + 1, w.copy()), obs


def _settle(Q, f_in, f_out, loss, Q_bar, k):
    """Queue change by the balance order, new queues clamped to ``[0, Q_bar]``.

    ``dQ`` makes the balance residual exactly zero; the clamp on ``Q + dQ``
    only removes roundoff (a few ulps), so ``Q_new - Q`` equals ``dQ`` up to
    rounding.
    """
    dQ = (f_in - f_out) - loss
    Q_new = np.maximum(Q + dQ, 0.0)
    for _ in range(4):
        over = Q_new.sum(axis=0) - Q_bar
        if not np.any(over > 0):
            return f_out, loss, dQ, Q_new
        for m in np.flatnonzero(over > 0):
            p = int(np.argmax(Q_new[:, m]))
            Q_new[p, m] = max(np.nextafter(Q_new[p, m] - over[m], -np.inf), 0.0)
    raise RuntimeError("queue totals exceed capacity beyond roundoff")


def replay(config: SystemConfig, decisions, state: Optional[PlantState] = None):
    """Apply a sequence of decisions; returns the final state and observations."""
    state = PlantState.initial(config) if state is None else state
    observations = []
    for dec in decisions:
        state, obs = apply(state, dec, config)
        observations.append(obs)
    return state, observations
