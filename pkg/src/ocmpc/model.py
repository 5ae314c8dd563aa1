"""Routing/scheduling problem data and its stacked matrix form.

Decision variables live in one flat vector ``x`` of six families over a
window of ``W + 1`` time blocks. Ordering is family-major, then window slot
``tau``, then modem ``m``, then priority ``p`` (all indices 0-based)::

    index = ((family * (W + 1) + tau) * M + m) * P + p

so ``x[layout.block(family)].reshape(W + 1, M, P)`` gives a family as an array.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp

FAMILIES = ("f_in", "w", "loss", "f_out", "Q", "dQ")

# dense rank check is skipped above this many matrix entries; the row
# families are structurally independent (see _drop_redundant_rows)
_RANK_CHECK_MAX_ENTRIES = 2e7


@dataclass(frozen=True)
class SystemConfig:
    """Scalar parameters of the payload routing problem.

    Defaults reproduce the reference scenario. ``C_bar`` and ``ds`` are not
    fixed by the scenario and are normally set by
    :func:`ocmpc.experiments.calibrate_capacity`; the defaults here are the
    values it selects for the reference traffic, with ``ds = 1 / C_bar``.
    """

    M: int = 16
    P: int = 3
    W: int = 5
    T: int = 100
    k: tuple = (10.0, 4.0, 1.0)
    Q_bar: float = 10.0
    Q0: float = 0.0
    dw_bar: float = 0.1
    ds: float = 1.0 / 1.5
    C_bar: float = 1.5
    eta: float = 1e4

    def __post_init__(self):
        object.__setattr__(self, "k", tuple(float(v) for v in self.k))
        if self.M < 1 or self.P < 1 or self.W < 1:
            raise ValueError("M, P and W must be >= 1")
        if self.T <= self.W:
            raise ValueError(f"T={self.T} must exceed W={self.W}")
        if len(self.k) != self.P:
            raise ValueError(f"k has {len(self.k)} entries, expected P={self.P}")
        if min(self.k) <= 0:
            raise ValueError("loss costs k must be strictly positive")
        if not (self.Q_bar >= self.Q0 >= 0):
            raise ValueError(f"need Q_bar >= Q0 >= 0, got Q_bar={self.Q_bar}, Q0={self.Q0}")
        if not (0 < self.dw_bar <= 1):
            raise ValueError("dw_bar must lie in (0, 1]")
        if self.ds <= 0 or self.C_bar <= 0 or self.eta <= 0:
            raise ValueError("ds, C_bar and eta must be positive")

    @property
    def k_array(self) -> np.ndarray:
        return np.asarray(self.k, dtype=float)

    def with_capacity(self, C_bar: float, ds: Optional[float] = None) -> "SystemConfig":
        return replace(self, C_bar=C_bar, ds=1.0 / C_bar if ds is None else ds)


@dataclass(frozen=True)
class VariableLayout:
    P: int
    M: int
    W: int

    @property
    def n_slots(self) -> int:
        return self.W + 1

    @property
    def family_size(self) -> int:
        return self.P * self.M * (self.W + 1)

    @property
    def N(self) -> int:
        return len(FAMILIES) * self.family_size

    def index(self, family: str, p: int, m: int, tau: int) -> int:
        f = FAMILIES.index(family)
        if not (0 <= p < self.P and 0 <= m < self.M and 0 <= tau <= self.W):
            raise IndexError(f"({family}, p={p}, m={m}, tau={tau}) out of range")
        return ((f * (self.W + 1) + tau) * self.M + m) * self.P + p

    def inverse(self, i: int) -> tuple:
        if not 0 <= i < self.N:
            raise IndexError(i)
        i, p = divmod(i, self.P)
        i, m = divmod(i, self.M)
        f, tau = divmod(i, self.W + 1)
        return FAMILIES[f], p, m, tau

    def block(self, family: str) -> slice:
        f = FAMILIES.index(family)
        return slice(f * self.family_size, (f + 1) * self.family_size)

    def indices(self, family: str) -> np.ndarray:
        """Indices of one family as an array of shape ``(W + 1, M, P)``."""
        s = self.block(family)
        return np.arange(s.start, s.stop).reshape(self.W + 1, self.M, self.P)

    def view(self, x: np.ndarray, family: str) -> np.ndarray:
        return x[self.block(family)].reshape(self.W + 1, self.M, self.P)


@dataclass
class StackedProblem:
    """``min c.x  s.t.  A x = b,  C x <= d`` for one window.

    ``A`` and ``C`` are sparse and depend only on the configuration and the
    terminal mode; ``b`` and ``d`` carry the round data. The ``*_rows`` maps
    locate the time-varying entries so a new round only rewrites them.
    """

    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    C: sp.csr_matrix
    d: np.ndarray
    layout: VariableLayout
    config: SystemConfig
    terminal_mode: str = "free"
    demand_rows: np.ndarray = field(default=None, repr=False)
    init_rows: np.ndarray = field(default=None, repr=False)
    ramp_up_rows: np.ndarray = field(default=None, repr=False)
    ramp_down_rows: np.ndarray = field(default=None, repr=False)
    kkt_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_eq(self) -> int:
        return self.A.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.C.shape[0]

    def with_round_data(self, observed_queues, forecast, prev_w) -> "StackedProblem":
        """Same matrices, right-hand sides rebuilt for a new round."""
        b = self.b.copy()
        d = self.d.copy()
        fc = _as_forecast(forecast, self.layout)
        b[self.demand_rows] = fc.ravel()
        b[self.init_rows] = _as_pm(observed_queues, self.layout, "observed_queues").T.ravel()
        pw = _as_pm(prev_w, self.layout, "prev_w").T.ravel()
        d[self.ramp_up_rows] = pw + self.config.dw_bar
        d[self.ramp_down_rows] = self.config.dw_bar - pw
        return replace(self, b=b, d=d)

    def slack(self, x: np.ndarray) -> np.ndarray:
        return self.d - self.C @ x

    def residual(self, x: np.ndarray) -> np.ndarray:
        return self.A @ x - self.b


def _as_pm(arr, layout: VariableLayout, name: str) -> np.ndarray:
    a = np.asarray(arr, dtype=float)
    if a.ndim == 0:
        a = np.full((layout.P, layout.M), float(a))
    if a.shape != (layout.P, layout.M):
        raise ValueError(f"{name} has shape {a.shape}, expected {(layout.P, layout.M)}")
    return a


def _as_forecast(forecast, layout: VariableLayout) -> np.ndarray:
    """Forecast as shape ``(W + 1, P)``; input is ``(P, W + 1)``."""
    fc = np.asarray(forecast, dtype=float)
    if fc.shape != (layout.P, layout.W + 1):
        raise ValueError(f"forecast has shape {fc.shape}, expected {(layout.P, layout.W + 1)}")
    if np.any(fc < 0):
        raise ValueError("forecast must be non-negative")
    return fc.T


def build_layout(config: SystemConfig, window: Optional[int] = None) -> VariableLayout:
    """Variable layout for a window of ``window + 1`` slots (default ``config.W``)."""
    return VariableLayout(P=config.P, M=config.M, W=config.W if window is None else window)


def build_cost(config: SystemConfig, layout: VariableLayout) -> np.ndarray:
    c = np.zeros(layout.N)
    c[layout.block("loss")] = np.tile(config.k_array, layout.M * layout.n_slots)
    return c


class _RowBuilder:
    """Accumulates sparse rows in COO form."""

    def __init__(self, n_cols: int):
        self.n_cols = n_cols
        self.rows, self.cols, self.vals, self.rhs = [], [], [], []
        self.n = 0

    def add(self, cols, vals, rhs) -> np.ndarray:
        """Add a batch of rows; ``cols``/``vals`` have shape (n_rows, nnz_per_row)."""
        cols = np.atleast_2d(np.asarray(cols))
        vals = np.broadcast_to(np.asarray(vals, dtype=float), cols.shape)
        k = cols.shape[0]
        ids = np.arange(self.n, self.n + k)
        self.rows.append(np.repeat(ids, cols.shape[1]))
        self.cols.append(cols.ravel())
        self.vals.append(vals.ravel())
        self.rhs.append(np.broadcast_to(np.asarray(rhs, dtype=float), (k,)).copy())
        self.n += k
        return ids

    def build(self):
        if self.n == 0:
            return sp.csr_matrix((0, self.n_cols)), np.zeros(0)
        mat = sp.csr_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(self.n, self.n_cols),
        )
        mat.sum_duplicates()
        return mat, np.concatenate(self.rhs)


def build_equalities(config, layout, observed_queues, forecast, terminal_mode="free", *,
                     return_rows=False):
    """Equality system ``A x = b`` for one window.

    ``observed_queues`` has shape ``(P, M)`` and ``forecast`` shape
    ``(P, W + 1)``. Row blocks, in order: packet balance per (tau, m, p),
    weight normalization per (tau, m), demand matching per (tau, p), queue
    update per (tau < W, m, p), initial queue per (m, p) and, when
    ``terminal_mode == "pinned"``, terminal queue ``Q(W) = Q0`` per (m, p).
    """
    if terminal_mode not in ("free", "pinned"):
        raise ValueError(f"terminal_mode must be 'free' or 'pinned', got {terminal_mode!r}")
    obs = _as_pm(observed_queues, layout, "observed_queues")
    if np.any(obs < 0) or np.any(obs.sum(axis=0) > config.Q_bar + 1e-9):
        raise ValueError("observed queues must lie in [0, Q_bar]")
    fc = _as_forecast(forecast, layout)

    f_in, w, loss = layout.indices("f_in"), layout.indices("w"), layout.indices("loss")
    f_out, Q, dQ = layout.indices("f_out"), layout.indices("Q"), layout.indices("dQ")
    P, M, W = layout.P, layout.M, layout.W
    rb = _RowBuilder(layout.N)

    # f_in - f_out - dQ - loss = 0
    cols = np.stack([f_in.ravel(), f_out.ravel(), dQ.ravel(), loss.ravel()], axis=1)
    rb.add(cols, [1.0, -1.0, -1.0, -1.0], 0.0)
    # sum_p w = 1
    rb.add(w.reshape(-1, P), 1.0, 1.0)
    # sum_m f_in = forecast
    demand = rb.add(f_in.transpose(0, 2, 1).reshape(-1, M), 1.0, fc.ravel())
    # Q(tau+1) - Q(tau) - dQ(tau) = 0
    cols = np.stack([Q[1:].ravel(), Q[:-1].ravel(), dQ[:-1].ravel()], axis=1)
    rb.add(cols, [1.0, -1.0, -1.0], 0.0)
    # Q(0) = observation; rows ordered (m, p)
    init = rb.add(Q[0].reshape(-1, 1), 1.0, obs.T.ravel())
    if terminal_mode == "pinned":
        rb.add(Q[W].reshape(-1, 1), 1.0, config.Q0)

    A, b = rb.build()
    keep = _drop_redundant_rows(A)
    if keep is not None:
        remap = -np.ones(A.shape[0], dtype=int)
        remap[keep] = np.arange(len(keep))
        A, b = A[keep], b[keep]
        demand, init = remap[demand], remap[init]
    if return_rows:
        return A, b, {"demand_rows": demand, "init_rows": init}
    return A, b


def _drop_redundant_rows(A: sp.csr_matrix, tol: float = 1e-9) -> Optional[np.ndarray]:
    """Indices of rows to keep, or ``None`` when all rows are independent.

    QR of ``A.T`` without column pivoting keeps the earliest row of every
    dependent set. Large systems skip the dense check: every row family has
    a private pivot variable (loss for balance rows, one weight per
    normalization row, disjoint inflow sets for demand rows, dQ(tau) for
    queue updates, Q(0) and Q(W) for the pins), so ``A`` has full row rank
    by construction.
    """
    n_rows, n_cols = A.shape
    if n_rows == 0 or n_rows * n_cols > _RANK_CHECK_MAX_ENTRIES:
        return None
    r = scipy.linalg.qr(A.T.toarray(), mode="r", check_finite=False)[0]
    diag = np.abs(np.diag(r[: min(n_rows, n_cols)]))
    if diag.size < n_rows:
        diag = np.concatenate([diag, np.zeros(n_rows - diag.size)])
    scale = max(diag.max(), 1.0)
    keep = np.flatnonzero(diag > tol * scale)
    return None if len(keep) == n_rows else keep


def build_inequalities(config, layout, prev_w, terminal_mode="free", *, return_rows=False):
    """Inequality system ``C x <= d`` for one window.

    Row blocks, in order:

    * ``w <= 1`` (omitted when ``P == 1``: the normalization pins ``w = 1``)
    * ``-w <= 0``
    * ramp up ``w(tau) - w(tau-1) <= dw_bar``; slot 0 compares against
      ``prev_w`` and carries it in ``d``
    * ramp down ``w(tau-1) - w(tau) <= dw_bar``
    * ``f_out - w / ds <= 0``
    * ``sum_p Q(tau) <= Q_bar`` per (tau >= 1, m)
    * ``sum_p f_out(tau) <= C_bar`` per (tau, m)
    * ``-f_in, -f_out, -loss <= 0`` and ``-Q(tau) <= 0`` for tau >= 1
      (tau < W when the terminal queue is pinned)

    Queue rows at slot 0 are fixed by the observation and at a pinned
    terminal slot by ``Q0``; keeping them would leave no strict interior
    whenever a queue is empty or full.
    """
    if terminal_mode not in ("free", "pinned"):
        raise ValueError(f"terminal_mode must be 'free' or 'pinned', got {terminal_mode!r}")
    pw = _as_pm(prev_w, layout, "prev_w")
    if np.any(pw < -1e-12) or np.any(pw > 1 + 1e-12):
        raise ValueError("prev_w entries must lie in [0, 1]")
    pw = pw.T.ravel()  # (m, p) order, matches w[0].ravel()

    f_in, w, loss = layout.indices("f_in"), layout.indices("w"), layout.indices("loss")
    f_out, Q = layout.indices("f_out"), layout.indices("Q")
    P, W = layout.P, layout.W
    dw = config.dw_bar
    rb = _RowBuilder(layout.N)

    if P > 1:
        rb.add(w.reshape(-1, 1), 1.0, 1.0)
    rb.add(w.reshape(-1, 1), -1.0, 0.0)
    up0 = rb.add(w[0].reshape(-1, 1), 1.0, pw + dw)
    if W > 0:
        rb.add(np.stack([w[1:].ravel(), w[:-1].ravel()], axis=1), [1.0, -1.0], dw)
    down0 = rb.add(w[0].reshape(-1, 1), -1.0, dw - pw)
    if W > 0:
        rb.add(np.stack([w[:-1].ravel(), w[1:].ravel()], axis=1), [1.0, -1.0], dw)
    rb.add(np.stack([f_out.ravel(), w.ravel()], axis=1), [1.0, -1.0 / config.ds], 0.0)
    rb.add(Q[1:].reshape(-1, P), 1.0, config.Q_bar)
    rb.add(f_out.reshape(-1, P), 1.0, config.C_bar)
    for fam in (f_in, f_out, loss):
        rb.add(fam.reshape(-1, 1), -1.0, 0.0)
    q_last = W if terminal_mode == "pinned" else W + 1
    rb.add(Q[1:q_last].reshape(-1, 1), -1.0, 0.0)

    C, d = rb.build()
    if return_rows:
        return C, d, {"ramp_up_rows": up0, "ramp_down_rows": down0}
    return C, d


def inequality_row_count(P: int, M: int, W: int, terminal_mode: str = "free") -> int:
    """Closed-form row count of :func:`build_inequalities`."""
    n = P * M * (W + 1)
    rows = (n if P > 1 else 0) + n + 2 * n + n
    rows += M * W + M * (W + 1)
    rows += 3 * n + P * M * (W - 1 if terminal_mode == "pinned" else W)
    return rows


def equality_row_count(P: int, M: int, W: int, terminal_mode: str = "free") -> int:
    rows = P * M * (W + 1) + M * (W + 1) + P * (W + 1) + P * M * W + P * M
    return rows + (P * M if terminal_mode == "pinned" else 0)


def build_problem(config: SystemConfig, observed_queues, forecast, prev_w,
                  terminal_mode: str = "free", window: Optional[int] = None) -> StackedProblem:
    layout = build_layout(config, window)
    A, b, eq_rows = build_equalities(config, layout, observed_queues, forecast,
                                     terminal_mode, return_rows=True)
    C, d, ineq_rows = build_inequalities(config, layout, prev_w, terminal_mode,
                                         return_rows=True)
    return StackedProblem(
        c=build_cost(config, layout), A=A, b=b, C=C, d=d, layout=layout, config=config,
        terminal_mode=terminal_mode, **eq_rows, **ineq_rows,
    )


def drop_everything_point(config, layout, observed_queues, forecast, prev_w=None) -> np.ndarray:
    """Equality-feasible point that transmits nothing.

    Weights sit at ``prev_w`` (uniform when absent), inflow is split evenly,
    queues hold the observation and every arrival is written off as loss.
    Satisfies balance, normalization and demand matching exactly.
    """
    obs = _as_pm(observed_queues, layout, "observed_queues")
    fc = _as_forecast(forecast, layout)
    P, M = layout.P, layout.M
    w0 = np.full((P, M), 1.0 / P) if prev_w is None else _as_pm(prev_w, layout, "prev_w")
    x = np.zeros(layout.N)
    layout.view(x, "w")[:] = w0.T
    layout.view(x, "f_in")[:] = fc[:, None, :] / M
    layout.view(x, "Q")[:] = obs.T
    layout.view(x, "loss")[:] = layout.view(x, "f_in")
    return x


def interior_witness(config, layout, observed_queues, forecast, prev_w=None,
                     terminal_mode="free") -> np.ndarray:
    """Equality-feasible point strictly inside the inequalities.

    Starts from :func:`drop_everything_point` and moves it inward: weights are
    blended toward uniform within the ramp box, a small outflow is sent,
    queues after slot 0 are pulled toward a quarter of capacity, and loss
    absorbs whatever balance remains. Strict interiority holds whenever every
    forecast entry is positive and ``P * Q0 < Q_bar`` in pinned mode; callers
    check the slacks and fall back to a phase-I solve otherwise.
    """
    obs = _as_pm(observed_queues, layout, "observed_queues")
    fc = _as_forecast(forecast, layout)
    P, M, W = layout.P, layout.M, layout.W
    pw = np.full((P, M), 1.0 / P) if prev_w is None else _as_pm(prev_w, layout, "prev_w")

    theta = min(0.5, config.dw_bar / 2)
    w = ((1 - theta) * pw + theta / P).T  # (M, P)
    f_in = np.broadcast_to(fc[:, None, :] / M, (W + 1, M, P))
    f_out = np.minimum(0.5 * np.minimum(w / config.ds, config.C_bar / P), 0.25 * f_in)

    inflow_floor = f_in.min()
    beta = min(0.5, 0.25 * inflow_floor * P / max(config.Q_bar, 1e-12)) if inflow_floor > 0 else 0.0
    target = config.Q_bar / (4 * P)
    Q = np.empty((W + 1, M, P))
    Q[0] = obs.T
    Q[1:] = (1 - beta) * obs.T + beta * target
    if terminal_mode == "pinned":
        Q[W] = config.Q0
    dQ = np.zeros((W + 1, M, P))
    dQ[:-1] = Q[1:] - Q[:-1]

    x = np.zeros(layout.N)
    layout.view(x, "w")[:] = w
    layout.view(x, "f_in")[:] = f_in
    layout.view(x, "f_out")[:] = f_out
    layout.view(x, "Q")[:] = Q
    layout.view(x, "dQ")[:] = dQ
    layout.view(x, "loss")[:] = f_in - f_out - dQ
    return x


def window_decision(x: np.ndarray, layout: VariableLayout, tau: int = 0):
    """Weights and inflow of slot ``tau`` as two ``(P, M)`` arrays."""
    return layout.view(x, "w")[tau].T.copy(), layout.view(x, "f_in")[tau].T.copy()

