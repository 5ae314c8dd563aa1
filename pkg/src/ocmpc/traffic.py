"""Markov-modulated Poisson arrivals and their forecasts.

States are 0-based indices into ``lambda``. A hidden chain moves between
rate states; in each step priority ``p`` receives ``Poisson(lambda[s] / k[p])``
packets, independently across priorities given the state.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.sparse.csgraph import connected_components

# reference traffic: three rate states and their transition matrix
DEFAULT_PMAT = ((0.8, 0.15, 0.05), (0.1, 0.8, 0.1), (0.05, 0.2, 0.75))
DEFAULT_LAMBDA = (20.0, 25.0, 30.0)


class ReducibleChainError(ValueError):
    pass


@dataclass(frozen=True)
class MmppConfig:
    Pmat: tuple = DEFAULT_PMAT
    lam: tuple = DEFAULT_LAMBDA
    k: tuple = (10.0, 4.0, 1.0)
    # multiplies every rate; 0 gives a silent source (test scenarios only)
    rate_scale: float = 1.0
    initial_state: Optional[int] = None

    def __post_init__(self):
        Pm = np.asarray(self.Pmat, dtype=float)
        lam = np.asarray(self.lam, dtype=float)
        object.__setattr__(self, "Pmat", tuple(map(tuple, Pm.tolist())))
        object.__setattr__(self, "lam", tuple(lam.tolist()))
        object.__setattr__(self, "k", tuple(float(v) for v in self.k))
        S = lam.size
        if Pm.shape != (S, S):
            raise ValueError(f"Pmat has shape {Pm.shape}, expected {(S, S)}")
        if np.any(Pm < 0) or np.any(np.abs(Pm.sum(axis=1) - 1) > 1e-12):
            raise ValueError("Pmat must be row-stochastic")
        if np.any(lam <= 0):
            raise ValueError("rates must be strictly positive")
        if not self.k or min(self.k) <= 0:
            raise ValueError("loss costs k must be strictly positive")
        if self.rate_scale < 0:
            raise ValueError("rate_scale must be non-negative")
        if self.initial_state is not None and not 0 <= self.initial_state < S:
            raise ValueError(f"initial_state must lie in 0..{S - 1}")

    @property
    def S(self) -> int:
        return len(self.lam)

    @property
    def P(self) -> int:
        return len(self.k)

    @property
    def P_matrix(self) -> np.ndarray:
        return np.asarray(self.Pmat)

    @property
    def rates(self) -> np.ndarray:
        """Per-state, per-priority mean arrivals, shape ``(S, P)``."""
        return self.rate_scale * np.outer(self.lam, 1.0 / np.asarray(self.k))


@dataclass(frozen=True)
class TrafficTrace:
    states: np.ndarray    # (T,) int
    arrivals: np.ndarray  # (T, P) int

    def __post_init__(self):
        if self.states.ndim != 1 or self.arrivals.ndim != 2 or len(self.states) != len(self.arrivals):
            raise ValueError("states must be (T,) and arrivals (T, P)")
        if np.any(self.arrivals < 0):
            raise ValueError("arrivals must be non-negative")

    @property
    def T(self) -> int:
        return len(self.states)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.states, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(self.arrivals, dtype=np.int64).tobytes())
        return h.hexdigest()

    def to_csv(self, path) -> None:
        """Columns ``t,state,arrivals_p1..arrivals_pP``; states written 1-based."""
        P = self.arrivals.shape[1]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["t", "state"] + [f"arrivals_p{p + 1}" for p in range(P)])
            for t in range(self.T):
                wr.writerow([t, int(self.states[t]) + 1] + [int(a) for a in self.arrivals[t]])


def run_rng(master_seed: int, run_index: int) -> np.random.Generator:
    """Independent stream for one Monte Carlo run."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(run_index),))
    return np.random.Generator(np.random.PCG64(ss))


def step_chain(state: int, Pmat, rng: np.random.Generator) -> int:
    row = np.cumsum(np.asarray(Pmat, dtype=float)[state])
    nxt = int(np.searchsorted(row, rng.random() * row[-1], side="right"))
    return min(nxt, len(row) - 1)


def sample_arrivals(state: int, cfg: MmppConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.poisson(cfg.rates[state]).astype(np.int64)


def forecast(state: int, horizon: int, cfg: MmppConfig) -> np.ndarray:
    """Expected arrivals for the next ``horizon + 1`` steps, shape ``(P, horizon + 1)``.

    Slot 0 uses the current (known) state; slot ``j`` averages the rates over
    the state distribution ``j`` transitions ahead.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if not 0 <= state < cfg.S:
        raise ValueError(f"state {state} outside 0..{cfg.S - 1}")
    Pm = cfg.P_matrix
    dist = np.zeros(cfg.S)
    dist[state] = 1.0
    out = np.empty((horizon + 1, cfg.P))
    for j in range(horizon + 1):
        out[j] = dist @ cfg.rates
        dist = dist @ Pm
    return out.T


def stationary_distribution(Pmat) -> np.ndarray:
    Pm = np.asarray(Pmat, dtype=float)
    S = Pm.shape[0]
    n_comp, _ = connected_components(Pm > 0, directed=True, connection="strong")
    if n_comp != 1:
        raise ReducibleChainError(f"chain is reducible ({n_comp} communicating classes)")
    # pi (P - I) = 0 with one balance equation replaced by sum(pi) = 1
    lhs = (Pm - np.eye(S)).T
    lhs[-1] = 1.0
    rhs = np.zeros(S)
    rhs[-1] = 1.0
    pi = np.linalg.solve(lhs, rhs)
    return np.clip(pi, 0.0, None) / np.clip(pi, 0.0, None).sum()


def sample_trace(cfg: MmppConfig, T: int, rng: np.random.Generator) -> TrafficTrace:
    """``T`` steps of the chain and its arrivals.

    The first state is ``cfg.initial_state`` or, when unset, a draw from the
    stationary distribution.
    """
    if cfg.initial_state is None:
        pi = stationary_distribution(cfg.P_matrix)
        s = int(np.searchsorted(np.cumsum(pi), rng.random() * pi.sum(), side="right"))
        s = min(s, cfg.S - 1)
    else:
        s = cfg.initial_state
    states = np.empty(T, dtype=np.int64)
    arrivals = np.empty((T, cfg.P), dtype=np.int64)
    for t in range(T):
        states[t] = s
        arrivals[t] = sample_arrivals(s, cfg, rng)
        s = step_chain(s, cfg.P_matrix, rng)
    return TrafficTrace(states, arrivals)
