import numpy as np
import pytest

from ocmpc.controllers import (
    MpcController, OcmpcController, ProportionalController, batch_hindsight,
    feedback_correction, project_weights, warm_shift,
)
from ocmpc.model import SystemConfig, VariableLayout
from ocmpc.plant import PlantState, check_decision
from ocmpc.traffic import MmppConfig, forecast, run_rng, sample_trace


def small_cfg(**kw):
    base = dict(M=2, P=3, W=2, T=10, k=(10.0, 4.0, 1.0), C_bar=1.5, ds=1 / 1.5)
    base.update(kw)
    return SystemConfig(**base)


def simplex_projection(v):
    # sort-based Euclidean projection onto the probability simplex
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    j = np.arange(1, len(v) + 1)
    r = j[u - (css - 1) / j > 0][-1]
    return np.maximum(v - (css[r - 1] - 1) / r, 0.0)


def run_controller(ctrl, cfg, mm, trace):
    state = PlantState.initial(cfg)
    ctrl.start(forecast(int(trace.states[0]), cfg.W + 1, mm), state)
    records = []
    for t in range(cfg.T):
        rec = ctrl.round(state, forecast(int(trace.states[t]), cfg.W + 1, mm), trace.arrivals[t])
        check_decision(rec.decision, cfg, state.last_w)
        state = rec.state
        records.append(rec)
    return state, records


def test_feedback_correction_matches_arrivals_exactly():
    rng = np.random.default_rng(0)
    for _ in range(200):
        f = rng.exponential(1.0, (3, 16))
        F = rng.integers(0, 40, 3).astype(float)
        out = feedback_correction(f, F)
        assert np.array_equal(out.sum(axis=1), F)
        assert np.all(out >= 0)


def test_feedback_correction_splits_zero_rows_uniformly():
    out = feedback_correction(np.zeros((1, 4)), np.array([2.0]))
    assert np.array_equal(out, [[0.5, 0.5, 0.5, 0.5]])
    with pytest.raises(ValueError):
        feedback_correction(np.ones((2, 3)), np.ones(3))
    with pytest.raises(ValueError):
        feedback_correction(-np.ones((1, 3)), np.ones(1))


def test_projection_matches_sorting_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        v = rng.normal(0, 1, (4, 3))
        w = project_weights(v)
        ref = np.column_stack([simplex_projection(v[:, m]) for m in range(3)])
        assert np.allclose(w, ref, atol=1e-12)


def test_projection_respects_ramp_box_and_is_idempotent():
    rng = np.random.default_rng(2)
    prev = np.full((3, 5), 1 / 3)
    w = project_weights(rng.normal(0, 1, (3, 5)), prev, 0.1)
    assert np.allclose(w.sum(axis=0), 1.0)
    assert np.all(np.abs(w - prev) <= 0.1 + 1e-12)
    assert np.allclose(project_weights(w, prev, 0.1), w, atol=1e-12)


def test_proportional_weights():
    cfg = small_cfg()
    ctrl = ProportionalController(cfg)
    assert np.allclose(ctrl.w[:, 0], [10 / 15, 4 / 15, 1 / 15])
    assert np.allclose(ctrl.w.sum(axis=0), 1.0)
    even = ProportionalController(small_cfg(k=(2.0, 2.0, 2.0)))
    assert np.allclose(even.w, 1 / 3)


def test_warm_shift_moves_blocks_forward():
    lay = VariableLayout(P=1, M=1, W=2)
    x = np.arange(lay.N, dtype=float)
    y = warm_shift(x, lay, np.array([[7.0]]))
    w = lay.view(x, "w").ravel()
    assert np.array_equal(lay.view(y, "w").ravel(), [w[1], w[2], w[2]])
    assert lay.view(y, "Q")[0, 0, 0] == 7.0


def test_ocmpc_one_factorization_per_round():
    cfg, mm = small_cfg(), MmppConfig(rate_scale=0.05)
    trace = sample_trace(mm, cfg.T, run_rng(3, 0))
    _, records = run_controller(OcmpcController(cfg), cfg, mm, trace)
    assert [r.diagnostics["factorizations"] for r in records] == [1] * cfg.T
    for r, a in zip(records, trace.arrivals):
        assert np.array_equal(r.decision.f_in.sum(axis=1), a)


def test_online_controllers_lose_nothing_without_traffic():
    cfg, mm = small_cfg(T=6), MmppConfig(rate_scale=0.0)
    trace = sample_trace(mm, cfg.T, run_rng(0, 0))
    for ctrl in (OcmpcController(cfg), MpcController(cfg), ProportionalController(cfg)):
        state, _ = run_controller(ctrl, cfg, mm, trace)
        assert state.cumulative_loss_cost == 0.0


def test_batch_zero_arrivals_cost_nothing():
    cfg = small_cfg(T=5)
    res = batch_hindsight(cfg, np.zeros((5, 3)))
    assert res.total_cost == 0.0
    assert res.lp_objective == pytest.approx(0.0, abs=1e-6)


def test_batch_light_traffic_forwards_everything():
    cfg = small_cfg(T=4, W=1, M=2, C_bar=4.0, ds=0.25)
    arrivals = np.array([[1, 0, 1], [0, 1, 0], [1, 1, 0], [0, 0, 0]], dtype=float)
    res = batch_hindsight(cfg, arrivals)
    assert res.total_cost == 0.0
    assert len(res.decisions) == 4


def test_benchmarks_beat_proportional_on_congested_trace():
    cfg, mm = small_cfg(T=12), MmppConfig(rate_scale=0.2)
    trace = sample_trace(mm, cfg.T, run_rng(11, 0))
    batch = batch_hindsight(cfg, trace.arrivals).total_cost
    mpc, _ = run_controller(MpcController(cfg), cfg, mm, trace)
    prop, _ = run_controller(ProportionalController(cfg), cfg, mm, trace)
    assert prop.cumulative_loss_cost > 0
    assert batch <= prop.cumulative_loss_cost
    assert mpc.cumulative_loss_cost <= prop.cumulative_loss_cost


def test_batch_rejects_bad_shape():
    with pytest.raises(ValueError):
        batch_hindsight(small_cfg(), np.zeros((10, 2)))
