"""Log-barrier interior-point machinery for ``min c.x s.t. Ax = b, Cx <= d``.

The barrier objective is ``eta * c.x - sum(log(d - C x))``. Everything here
works on any object exposing ``c, A, b, C, d`` (``A`` and ``C`` may be dense
or scipy sparse), e.g. :class:`ocmpc.model.StackedProblem` or
:class:`LinearProgram`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._kkt import SingularSystemError, dense_symmetric_solve, equality_projector, solve_kkt

__all__ = [
    "BarrierProblem", "CenteringError", "InfeasibleProblemError", "LinearProgram",
    "NotInteriorError", "SingularSystemError", "SolveResult", "StepResult", "barrier_eval",
    "dense_symmetric_solve", "newton_kkt_step", "phase_one", "solve_centering",
    "solve_to_optimality",
]

log = logging.getLogger(__name__)

FRACTION_TO_BOUNDARY = 0.99
# phase-I box half-width, relative to the scale of the start point and data
PHASE_ONE_BOX = 1e3


class NotInteriorError(ValueError):
    def __init__(self, row: int, slack: float):
        super().__init__(f"point is not interior: inequality row {row} has slack {slack:.3e}")
        self.row = row
        self.slack = slack


class CenteringError(RuntimeError):
    def __init__(self, message: str, primal_residual: float, decrement: float):
        super().__init__(f"{message} (|Ax-b|={primal_residual:.3e}, decrement={decrement:.3e})")
        self.primal_residual = primal_residual
        self.decrement = decrement


class InfeasibleProblemError(RuntimeError):
    """Raised with the phase-I certificate: the best achievable minimum slack."""

    def __init__(self, max_min_slack: float):
        super().__init__(f"no strictly feasible point: max achievable min slack {max_min_slack:.3e} <= 0")
        self.max_min_slack = max_min_slack


@dataclass
class LinearProgram:
    c: np.ndarray
    A: object
    b: np.ndarray
    C: object
    d: np.ndarray
    kkt_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_eq(self) -> int:
        return self.A.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.C.shape[0]


@dataclass
class BarrierProblem:
    stacked: object
    eta: float

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")


@dataclass
class StepResult:
    x_next: np.ndarray
    dual: np.ndarray
    primal_residual: float
    newton_decrement: float
    step_size: float = 1.0
    factorizations: int = 1


@dataclass
class SolveResult:
    x: np.ndarray
    objective: float
    eta: float
    gap_bound: float
    newton_steps: int
    factorizations: int
    path_objectives: list = field(default_factory=list)


def _slack(x, C, d) -> np.ndarray:
    return d - C @ x


def _check_interior(s: np.ndarray):
    if s.size and s.min() <= 0:
        i = int(np.argmin(s))
        raise NotInteriorError(i, float(s[i]))


def barrier_eval(x, stacked, eta, *, hessian=True):
    """Value, gradient and Hessian of ``eta * c.x - sum(log(d - Cx))``.

    The Hessian is returned in the storage format of ``stacked.C`` (sparse
    for sparse problems).
    """
    C = stacked.C
    s = _slack(x, C, stacked.d)
    _check_interior(s)
    inv = 1.0 / s
    value = eta * float(stacked.c @ x) - float(np.sum(np.log(s)))
    grad = eta * stacked.c + C.T @ inv
    if not hessian:
        return value, np.asarray(grad).ravel(), None
    if sp.issparse(C):
        H = (C.T @ sp.diags(inv * inv) @ C).tocsc()
    else:
        Cs = C * inv[:, None]
        H = Cs.T @ Cs
    return value, np.asarray(grad).ravel(), H


def _max_step(s, Cdx) -> float:
    pos = Cdx > 0
    if not np.any(pos):
        return np.inf
    return float(np.min(s[pos] / Cdx[pos]))


def _newton_direction(x, lp, eta, b, stats=None):
    """Slack, gradient, residual and the KKT direction ``(dx, nu)`` at ``x``."""
    s = _slack(x, lp.C, lp.d)
    _check_interior(s)
    inv = 1.0 / s
    g = eta * lp.c + np.asarray(lp.C.T @ inv).ravel()
    r = np.asarray(lp.A @ x - b).ravel()
    dx, nu = solve_kkt(lp, inv * inv, -g, -r, stats=stats)
    # the KKT tolerance is relative to a right-hand side dominated by the
    # gradient; restore A dx = -r so the equality residual does not drift
    e = -r - lp.A @ dx
    if lp.A.shape[0] and np.linalg.norm(e) > 1e-14 * (1.0 + np.linalg.norm(r)):
        dx = dx + equality_projector(lp).correct(e)
    return s, g, r, dx, nu


def newton_kkt_step(x, problem: BarrierProblem, b_current=None) -> StepResult:
    """One infeasible-start Newton step on the barrier objective.

    Solves ``[[H, A'], [A, 0]] [dx; nu] = -[grad; Ax - b]`` with a single KKT
    factorization and moves to ``x + alpha dx``, where ``alpha`` is the full
    step clipped to 0.99 of the distance to the nearest inequality boundary.
    """
    lp = problem.stacked
    b = lp.b if b_current is None else b_current
    stats = {}
    s, _, _, dx, nu = _newton_direction(np.asarray(x, dtype=float), lp, problem.eta, b, stats)
    Cdx = lp.C @ dx
    alpha = min(1.0, FRACTION_TO_BOUNDARY * _max_step(s, Cdx))
    x_next = x + alpha * dx
    decrement = float(np.sqrt(np.sum((Cdx / s) ** 2)))
    res_next = float(np.linalg.norm(lp.A @ x_next - b))
    return StepResult(x_next, nu, res_next, decrement, alpha, stats.get("factorizations", 0))


def solve_centering(problem: BarrierProblem, x0, b=None, tol=1e-8, max_iter=200,
                    *, stop: Optional[Callable] = None, stats: Optional[dict] = None):
    """Minimize the barrier objective subject to ``Ax = b`` by damped Newton.

    While ``Ax != b`` the method is the infeasible-start Newton method with
    backtracking on the KKT residual norm. Once feasible it backtracks on the
    barrier objective and takes full steps inside the quadratic region.
    Stops when ``|Ax - b| <= tol (1 + |b|)`` and half the squared Newton
    decrement is at most ``tol``, or earlier once the iterate is feasible and
    roundoff stops the decrement from shrinking (counted as ``stalls`` in
    ``stats``).
    """
    lp = problem.stacked
    b = lp.b if b is None else b
    eta = problem.eta
    x = np.array(x0, dtype=float)
    nu = np.zeros(lp.A.shape[0])
    alpha_ls, beta_ls = 0.01, 0.5
    decrement = np.inf
    feas_tol = tol * (1.0 + float(np.linalg.norm(b)))
    prev_decrement, stagnant = np.inf, 0
    for _ in range(max_iter):
        s, g, r, dx, nu_new = _newton_direction(x, lp, eta, b, stats)
        if stats is not None:
            stats["newton_steps"] = stats.get("newton_steps", 0) + 1
        rnorm = float(np.linalg.norm(r))
        Cdx = lp.C @ dx
        lam2 = float(np.sum((Cdx / s) ** 2))
        decrement = np.sqrt(lam2)
        if rnorm <= feas_tol and lam2 / 2 <= tol:
            return x
        t = min(1.0, FRACTION_TO_BOUNDARY * _max_step(s, Cdx))
        if rnorm > feas_tol:
            dnu = nu_new - nu
            def kkt_norm(xx, nn):
                gg = barrier_eval(xx, lp, eta, hessian=False)[1]
                return np.linalg.norm(np.concatenate([gg + lp.A.T @ nn, lp.A @ xx - b]))
            base = kkt_norm(x, nu)
            while t > 1e-12 and kkt_norm(x + t * dx, nu + t * dnu) > (1 - alpha_ls * t) * base:
                t *= beta_ls
            nu = nu + t * dnu
        elif decrement > 0.25:
            f = eta * float(lp.c @ x) - float(np.sum(np.log(s)))
            slope = float(g @ dx)
            accepted = False
            while slope < 0 and t > 1e-12:
                s_new = s - t * Cdx
                if s_new.min() > 0:
                    f_new = eta * float(lp.c @ (x + t * dx)) - float(np.sum(np.log(s_new)))
                    if f_new <= f + alpha_ls * t * slope:
                        accepted = True
                        break
                t *= beta_ls
            if not accepted:
                # roundoff dominates the direction: centered to working precision
                if stats is not None:
                    stats["stalls"] = stats.get("stalls", 0) + 1
                log.debug("centering stalled at eta=%.3g (decrement %.3e)", eta, decrement)
                return x
        else:
            # inside the quadratic region the decrement should contract every step
            stagnant = stagnant + 1 if decrement > 0.5 * prev_decrement else 0
            if stagnant >= 5:
                if stats is not None:
                    stats["stalls"] = stats.get("stalls", 0) + 1
                log.debug("centering stagnated at eta=%.3g (decrement %.3e)", eta, decrement)
                return x
        prev_decrement = decrement
        x = x + t * dx
        if stop is not None and stop(x):
            return x
    raise CenteringError(f"centering did not converge in {max_iter} iterations",
                         float(np.linalg.norm(lp.A @ x - b)), float(decrement))


def phase_one(stacked, b=None, *, x_start=None, margin=1e-3, tol=1e-8, stats=None):
    """Strictly interior point with ``Ax = b`` and every slack at least ``margin``.

    ``x_start`` (typically the model's interior witness) is returned untouched
    when it already qualifies. Otherwise the auxiliary problem
    ``min t  s.t. Ax = b,  Cx - d <= t,  |x_i| - R <= t,  t >= -1``, with
    ``R`` a distant box, is followed along its barrier path until
    ``t <= -margin``. The path stops early with the best interior point found
    once its duality bound shows ``margin`` is out of reach, and a lower
    bound ``t >= 0`` certifies that no strictly feasible point exists.
    """
    b = stacked.b if b is None else b
    A, C, d = stacked.A, stacked.C, stacked.d
    n = A.shape[1]
    if x_start is None:
        x_start = _least_norm_solution(A, b)
    x_start = np.asarray(x_start, dtype=float)
    s = _slack(x_start, C, d)
    rnorm = float(np.linalg.norm(A @ x_start - b))
    if rnorm <= tol and (s.size == 0 or s.min() >= margin):
        return x_start
    if rnorm > tol:
        x_start = x_start + _least_norm_solution(A, b - A @ x_start)
        s = _slack(x_start, C, d)
    if s.size == 0:
        return x_start

    # a distant box |x_i| <= R keeps the auxiliary barrier bounded along
    # recession directions of the feasible set; interior points of the
    # boxed set are interior points of the original one
    R = PHASE_ONE_BOX * (1.0 + max(np.abs(x_start).max(initial=0.0), np.abs(b).max(initial=0.0),
                                   np.abs(d).max(initial=0.0)))
    m = C.shape[0] + 2 * n
    if sp.issparse(C):
        eye = sp.identity(n, format="csr")
        C_box = sp.vstack([C, eye, -eye])
        col = sp.csr_matrix(-np.ones((m, 1)))
        C_aux = sp.vstack([sp.hstack([C_box, col]), sp.csr_matrix(([-1.0], ([0], [n])), shape=(1, n + 1))])
        A_aux = sp.hstack([A, sp.csr_matrix((A.shape[0], 1))])
        C_aux, A_aux = sp.csr_matrix(C_aux), sp.csr_matrix(A_aux)
    else:
        C_box = np.vstack([np.asarray(C), np.eye(n), -np.eye(n)])
        C_aux = np.vstack([np.hstack([C_box, -np.ones((m, 1))]), np.eye(1, n + 1, n) * -1.0])
        A_aux = np.hstack([A, np.zeros((A.shape[0], 1))])
    c_aux = np.zeros(n + 1)
    c_aux[-1] = 1.0
    aux = LinearProgram(c_aux, A_aux, b, C_aux, np.concatenate([d, np.full(2 * n, R), [1.0]]))

    t0 = max(float(-s.min()) + 1.0, 0.0)
    z = np.concatenate([x_start, [t0]])
    stop = lambda zz: zz[-1] <= -margin  # noqa: E731
    eta = 1.0
    while True:
        z = solve_centering(BarrierProblem(aux, eta), z, b, tol=tol, stop=stop, stats=stats)
        if stop(z):
            return z[:-1]
        # t - (m + 1) / eta bounds the auxiliary optimum from below
        lower = float(z[-1]) - (m + 1) / eta
        if lower >= 0:
            raise InfeasibleProblemError(-lower)
        if lower > -margin and z[-1] < 0:
            log.debug("phase one: margin %.1e unreachable, min slack %.3e", margin, -z[-1])
            return z[:-1]
        if (m + 1) / eta < 1e-9:
            break
        eta *= 10.0
    t_star = float(z[-1])
    if t_star >= -1e-9:
        raise InfeasibleProblemError(-t_star)
    log.warning("phase one: best min slack %.3e below margin %.1e", -t_star, margin)
    return z[:-1]


def _least_norm_solution(A, b):
    if sp.issparse(A):
        AAt = (A @ A.T).tocsc()
        y = spla.spsolve(AAt, b)
        return np.asarray(A.T @ y).ravel()
    return np.linalg.lstsq(np.asarray(A), b, rcond=None)[0]


def _usable_start(x, stacked, b, tol) -> bool:
    x = np.asarray(x, dtype=float)
    s = _slack(x, stacked.C, stacked.d)
    r = np.linalg.norm(stacked.A @ x - b)
    return (s.size == 0 or s.min() > 0) and r <= tol * (1.0 + np.linalg.norm(b))


def solve_to_optimality(stacked, b=None, mu=20.0, eta0=10.0, tol=1e-6, *, x0=None,
                        center_tol=1e-8, witness=None) -> SolveResult:
    """Barrier path: center at ``eta``, multiply by ``mu``, stop once ``m / eta < tol``.

    ``x0`` must be strictly interior. When absent, a strictly interior,
    equality-feasible ``witness`` is used as is; otherwise :func:`phase_one`
    supplies a start (from ``witness`` if given).
    """
    b = stacked.b if b is None else b
    stats = {"factorizations": 0, "newton_steps": 0}
    if x0 is None and witness is not None and _usable_start(witness, stacked, b, center_tol):
        # strictly interior already; the first centering pass moves it inward
        x0 = witness
    if x0 is None:
        x0 = phase_one(stacked, b, x_start=witness, stats=stats)
    m = stacked.C.shape[0]
    x = np.asarray(x0, dtype=float)
    eta = float(eta0)
    path = []
    while True:
        x = solve_centering(BarrierProblem(stacked, eta), x, b, tol=center_tol, stats=stats)
        path.append(float(stacked.c @ x))
        if m / eta < tol or m == 0:
            break
        eta *= mu
    return SolveResult(x=x, objective=path[-1], eta=eta, gap_bound=m / eta,
                       newton_steps=stats["newton_steps"], factorizations=stats["factorizations"],
                       path_objectives=path)
