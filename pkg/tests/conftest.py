"""Shared fixtures: tiny routing instances and exact LP oracles."""
from fractions import Fraction

import numpy as np
import pytest

from ocmpc.model import SystemConfig, build_problem


def dyadic(rng, lo, hi, denom=8):
    # multiples of 1/denom keep the exact oracle arithmetic cheap
    return float(rng.integers(int(lo * denom), int(hi * denom) + 1)) / denom


def tiny_instance(P, M, W, rng):
    """Random one-window problem with dyadic data; ``T = W + 1``."""
    k = tuple(float(rng.integers(1, 11)) for _ in range(P))
    cfg = SystemConfig(M=M, P=P, W=W, T=W + 1, k=k, C_bar=dyadic(rng, 0.5, 2),
                       ds=dyadic(rng, 0.25, 1.5), Q_bar=dyadic(rng, 1, 3),
                       dw_bar=dyadic(rng, 0.125, 0.5))
    obs = np.array([[dyadic(rng, 0, cfg.Q_bar / P) for _ in range(M)] for _ in range(P)])
    fc = np.array([[dyadic(rng, 0.125, 4) for _ in range(W + 1)] for _ in range(P)])
    return build_problem(cfg, obs, fc, np.full((P, M), 1.0 / P))


def _cdd_matrix(problem):
    import cdd

    A, C = problem.A.toarray(), problem.C.toarray()
    rows = np.vstack([np.hstack([problem.b[:, None], -A]),
                      np.hstack([problem.d[:, None], -C])])
    exact = [[Fraction(float(v)) for v in r] for r in rows]
    mat = cdd.Matrix(exact, number_type="fraction")
    mat.rep_type = cdd.RepType.INEQUALITY
    mat.lin_set = frozenset(range(A.shape[0]))
    return mat


def vertex_oracle(problem):
    """Exact minimum of ``c.x`` over the vertices of the feasible polytope.

    Double description in rational arithmetic lists every vertex; returns
    ``(optimum, n_vertices)`` as a Fraction and an int.
    """
    import cdd

    mat = _cdd_matrix(problem)
    mat.canonicalize()
    gens = cdd.Polyhedron(mat).get_generators()
    c = [Fraction(float(v)) for v in problem.c]
    values = [sum(a * b for a, b in zip(c, g[1:])) for g in gens if g[0] == 1]
    return min(values), len(values)


def simplex_oracle(problem):
    """Exact rational simplex optimum, for shapes too large to enumerate."""
    import cdd

    mat = _cdd_matrix(problem)
    mat.obj_type = cdd.LPObjType.MIN
    mat.obj_func = [Fraction(0)] + [Fraction(float(v)) for v in problem.c]
    lp = cdd.LinProg(mat)
    lp.solve()
    assert lp.status == cdd.LPStatusType.OPTIMAL, lp.status
    return lp.obj_value


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
