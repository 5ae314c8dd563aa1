import numpy as np
import pytest
import scipy.sparse as sp

from ocmpc._kkt import SingularSystemError, dense_symmetric_solve, solve_kkt
from ocmpc.barrier import (
    BarrierProblem, InfeasibleProblemError, LinearProgram, NotInteriorError, barrier_eval,
    newton_kkt_step, phase_one, solve_centering, solve_to_optimality,
)
from ocmpc.model import build_layout, drop_everything_point

from conftest import tiny_instance


def box_lp(n=4, c=None):
    # 0 <= x <= 1 and sum(x) = n / 2
    C = np.vstack([np.eye(n), -np.eye(n)])
    d = np.concatenate([np.ones(n), np.zeros(n)])
    c = np.zeros(n) if c is None else np.asarray(c, dtype=float)
    return LinearProgram(c, np.ones((1, n)), np.array([n / 2]), C, d)


def test_barrier_derivatives_match_finite_differences():
    rng = np.random.default_rng(0)
    lp = box_lp(5, rng.standard_normal(5))
    x = rng.uniform(0.2, 0.8, 5)
    f, g, H = barrier_eval(x, lp, 3.0)
    h = 1e-6
    for i in range(5):
        e = np.zeros(5)
        e[i] = h
        fp, gp, _ = barrier_eval(x + e, lp, 3.0, hessian=False)
        fm, gm, _ = barrier_eval(x - e, lp, 3.0, hessian=False)
        assert (fp - fm) / (2 * h) == pytest.approx(g[i], rel=1e-7)
        assert np.allclose((gp - gm) / (2 * h), H[:, i], rtol=1e-6)


def test_barrier_requires_interior_point():
    lp = box_lp(3)
    with pytest.raises(NotInteriorError):
        barrier_eval(np.array([0.5, 1.0, 0.5]), lp, 1.0)


def test_dense_indefinite_solve():
    rng = np.random.default_rng(1)
    B = rng.standard_normal((6, 6))
    K = B + B.T
    K[:3, :3] += 10 * np.eye(3)
    K[3:, 3:] -= 10 * np.eye(3)
    rhs = rng.standard_normal(6)
    assert np.allclose(dense_symmetric_solve(K, rhs), np.linalg.solve(K, rhs), atol=1e-12)


def test_dense_singular_raises():
    K = np.array([[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(SingularSystemError):
        dense_symmetric_solve(K, np.array([1.0, 0.0]))


def test_sparse_kkt_solve_matches_dense_reference():
    rng = np.random.default_rng(2)
    n, me = 260, 60
    A = sp.random(me, n, density=0.05, random_state=3, format="csr") + sp.eye(me, n, format="csr")
    C = sp.vstack([sp.eye(n), -sp.eye(n), sp.random(40, n, density=0.1, random_state=4)], format="csr")
    lp = LinearProgram(np.zeros(n), A, np.zeros(me), C, np.ones(C.shape[0]))
    v = rng.uniform(0.1, 100.0, C.shape[0])
    top, bot = rng.standard_normal(n), rng.standard_normal(me)
    stats = {}
    dx, nu = solve_kkt(lp, v, top, bot, stats=stats)
    H = (C.T @ sp.diags(v) @ C).toarray()
    K = np.block([[H, A.T.toarray()], [A.toarray(), np.zeros((me, me))]])
    rhs = np.concatenate([top, bot])
    z = np.concatenate([dx, nu])
    # the solver's tolerance applies to the equilibrated system
    assert np.linalg.norm(K @ z - rhs) <= 1e-8 * np.linalg.norm(rhs)
    assert np.allclose(z, np.linalg.solve(K, rhs), rtol=1e-6, atol=1e-8)
    assert stats["factorizations"] >= 1


def test_newton_step_uses_one_factorization():
    lp = box_lp(4, [1.0, 0.0, -1.0, 0.5])
    step = newton_kkt_step(np.full(4, 0.5), BarrierProblem(lp, 2.0))
    assert step.factorizations == 1
    assert step.primal_residual < 1e-12
    assert 0 < step.step_size <= 1


def test_centering_finds_analytic_center():
    lp = box_lp(4)
    x = solve_centering(BarrierProblem(lp, 1.0), np.array([0.3, 0.7, 0.4, 0.6]))
    assert np.allclose(x, 0.5, atol=1e-8)


def test_centering_from_infeasible_start_restores_equalities():
    lp = box_lp(4, [1.0, 2.0, 3.0, 4.0])
    x = solve_centering(BarrierProblem(lp, 1.0), np.full(4, 0.1))
    assert abs(x.sum() - 2.0) < 1e-10


def test_newton_fixed_point_matches_centering():
    lp = box_lp(4, [1.0, 2.0, 3.0, 4.0])
    bp = BarrierProblem(lp, 2.0)
    ref = solve_centering(bp, np.full(4, 0.5), tol=1e-14)
    x = np.full(4, 0.5)
    for _ in range(50):
        x = newton_kkt_step(x, bp).x_next
    assert np.allclose(x, ref, atol=1e-10)


def test_solve_to_optimality_simple_lp():
    # min x1 + 2 x2 s.t. x1 + x2 = 1, x >= 0
    lp = LinearProgram(np.array([1.0, 2.0]), np.ones((1, 2)), np.array([1.0]),
                       -np.eye(2), np.zeros(2))
    res = solve_to_optimality(lp, x0=np.array([0.5, 0.5]))
    assert res.objective == pytest.approx(1.0, abs=1e-6)
    assert res.gap_bound < 1e-6
    assert res.path_objectives == sorted(res.path_objectives, reverse=True)


def test_phase_one_certifies_infeasibility():
    # x <= -1 and x >= 1
    lp = LinearProgram(np.zeros(1), np.zeros((0, 1)), np.zeros(0),
                       np.array([[1.0], [-1.0]]), np.array([-1.0, -1.0]))
    with pytest.raises(InfeasibleProblemError):
        phase_one(lp)


def test_phase_one_on_unbounded_direction():
    # the free terminal queue has a recession ray; the boxed auxiliary
    # problem must still return an interior point
    rng = np.random.default_rng(5)
    pr = tiny_instance(2, 1, 1, rng)
    cfg = pr.config
    obs = pr.b[pr.init_rows].reshape(cfg.M, cfg.P).T
    fc = pr.b[pr.demand_rows].reshape(cfg.W + 1, cfg.P).T
    x0 = drop_everything_point(cfg, build_layout(cfg), obs, fc)
    x = phase_one(pr, x_start=x0)
    assert pr.slack(x).min() > 0
    assert np.abs(pr.residual(x)).max() < 1e-8


def test_bad_eta_rejected():
    with pytest.raises(ValueError):
        BarrierProblem(box_lp(2), 0.0)
