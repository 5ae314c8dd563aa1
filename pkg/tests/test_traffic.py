import csv

import numpy as np
import pytest

from ocmpc.traffic import (
    MmppConfig, ReducibleChainError, TrafficTrace, forecast, run_rng, sample_trace,
    stationary_distribution, step_chain,
)


def test_forecast_slot0_uses_current_state():
    cfg = MmppConfig()
    fc = forecast(2, 5, cfg)
    assert fc.shape == (3, 6)
    assert np.allclose(fc[:, 0], [3.0, 7.5, 30.0])


def test_forecast_propagates_chain():
    cfg = MmppConfig()
    fc = forecast(0, 3, cfg)
    Pm = cfg.P_matrix
    for j in range(4):
        dist = np.linalg.matrix_power(Pm, j)[0]
        assert np.allclose(fc[:, j], dist @ cfg.rates)


def test_forecast_converges_to_stationary_mean():
    cfg = MmppConfig()
    pi = stationary_distribution(cfg.P_matrix)
    fc = forecast(0, 200, cfg)
    assert np.allclose(fc[:, -1], pi @ cfg.rates)


def test_stationary_distribution_solves_balance():
    P = np.array(MmppConfig().Pmat)
    pi = stationary_distribution(P)
    assert np.allclose(pi @ P, pi, atol=1e-14)
    assert pi.sum() == pytest.approx(1.0)


def test_reducible_chain_rejected():
    with pytest.raises(ReducibleChainError):
        stationary_distribution(np.array([[1.0, 0.0], [0.0, 1.0]]))


def test_invalid_mmpp_rejected():
    with pytest.raises(ValueError):
        MmppConfig(Pmat=((0.5, 0.4, 0.0), (0.1, 0.8, 0.1), (0.05, 0.2, 0.75)))
    with pytest.raises(ValueError):
        MmppConfig(lam=(1.0, 2.0))
    with pytest.raises(ValueError):
        MmppConfig(rate_scale=-1.0)
    with pytest.raises(ValueError):
        MmppConfig(initial_state=3)


def test_same_seed_same_trace_and_runs_differ():
    cfg = MmppConfig()
    a = sample_trace(cfg, 50, run_rng(7, 0))
    b = sample_trace(cfg, 50, run_rng(7, 0))
    c = sample_trace(cfg, 50, run_rng(7, 1))
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()


def test_zero_rate_scale_is_silent():
    tr = sample_trace(MmppConfig(rate_scale=0.0), 30, run_rng(1, 0))
    assert tr.arrivals.sum() == 0


def test_initial_state_is_honoured():
    tr = sample_trace(MmppConfig(initial_state=2), 5, run_rng(3, 0))
    assert tr.states[0] == 2


def test_step_chain_follows_deterministic_rows():
    P = np.array([[0.0, 1.0], [1.0, 0.0]])
    rng = np.random.default_rng(0)
    assert [step_chain(s, P, rng) for s in (0, 1, 0)] == [1, 0, 1]


def test_trace_csv_uses_one_based_states(tmp_path):
    tr = TrafficTrace(np.array([0, 2]), np.array([[1, 2, 3], [4, 5, 6]]))
    path = tmp_path / "trace.csv"
    tr.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "state", "arrivals_p1", "arrivals_p2", "arrivals_p3"]
    assert rows[2] == ["1", "3", "4", "5", "6"]


def test_trace_validation():
    with pytest.raises(ValueError):
        TrafficTrace(np.array([0, 1]), np.array([[1, 2]]))
    with pytest.raises(ValueError):
        TrafficTrace(np.array([0]), np.array([[-1, 2]]))
