import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from powerbert import attacks
from powerbert.estimation import Estimator, RankDeficientError, bdd_check, estimate_state, tie_line_estimator
from powerbert.grid import (
    AreaParams, GridConfig, GridModel, GridState, Trace, UnstableConfigError, compute_ace, read_trace,
    simulate_corpus, simulate_trace, step, write_trace,
)

MODEL = GridModel()


# ------------------------------------------------------------ estimation

def test_identity_estimator_returns_measurements():
    est = Estimator(np.eye(3), np.eye(3), 1.0)
    x, y_hat, r = estimate_state(est, [1.0, -2.0, 0.5])
    assert np.allclose(x, [1.0, -2.0, 0.5]) and r == pytest.approx(0.0, abs=1e-15)


def test_scalar_least_squares():
    est = Estimator([[1.0], [1.0]], np.eye(2), 1.0)
    x, _, r = estimate_state(est, [1.0, 2.0])
    assert x[0] == pytest.approx(1.5) and r == pytest.approx(np.sqrt(0.5))


def test_consistent_system_has_no_residual():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(8, 4))
    est = Estimator(M, np.ones(8), 1.0)
    assert estimate_state(est, M @ rng.normal(size=4))[2] < 1e-9


def test_rank_deficient_rejected():
    with pytest.raises(RankDeficientError):
        Estimator([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]], np.ones(3), 1.0)


def test_measurement_length_checked():
    with pytest.raises(ValueError):
        estimate_state(Estimator(np.eye(2), np.eye(2), 1.0), [1.0, 2.0, 3.0])


@pytest.mark.parametrize("residual, threshold, alarm", [(0.1, 0.2, False), (0.3, 0.2, True), (0.2, 0.2, False)])
def test_bdd_strict_inequality(residual, threshold, alarm):
    assert bdd_check(residual, threshold) is alarm


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 12))
def test_wls_residual_orthogonality(seed, m):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, m))
    M = rng.normal(size=(m, n))
    W = np.diag(rng.uniform(0.1, 10.0, m))
    est = Estimator(M, W, 1.0)
    y = rng.normal(size=m)
    _, y_hat, _ = estimate_state(est, y)
    assert np.max(np.abs(M.T @ W @ (y - y_hat))) < 1e-9


def test_default_bdd_rarely_alarms_on_noise():
    est = tie_line_estimator(5, GridConfig().tie_lines)
    rng = np.random.default_rng(1)
    alarms = sum(bdd_check(estimate_state(est, rng.normal(0, 0.005, est.n_measurements))[2], est.bdd_threshold)
                 for _ in range(4000))
    # chi-square 0.99 quantile: about 1 % false alarms
    assert 0.004 < alarms / 4000 < 0.02


# ------------------------------------------------------------------ ACE

def test_ace_examples():
    p = [AreaParams(a=0.5, b=10.0)]
    assert compute_ace([-0.01], [0.02], p)[0] == pytest.approx(-0.09)
    assert compute_ace([0.0], [0.0], p)[0] == 0.0
    assert compute_ace([0.3], [0.02], [AreaParams(a=1.0, b=0.0)])[0] == 0.02


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 1000))
def test_ace_linearity(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    params = GridConfig().areas
    w1, w2, p1, p2 = rng.normal(size=(4, 5))
    lhs = compute_ace(alpha * w1 + beta * w2, alpha * p1 + beta * p2, params)
    rhs = alpha * compute_ace(w1, p1, params) + beta * compute_ace(w2, p2, params)
    assert np.allclose(lhs, rhs, atol=1e-12)


# ----------------------------------------------------------------- plant

def test_zero_state_is_fixed_point():
    s = GridState.zero()
    for _ in range(50):
        s = MODEL.step(s, np.zeros(5), np.zeros(5))
    assert np.all(s.vector() == 0.0)


def test_load_step_without_agc_settles_negative():
    s = GridState.zero()
    load = np.array([0.05, 0, 0, 0, 0])
    for _ in range(500):
        s = MODEL.step(s, np.zeros(5), load)
    # steady state of the continuous model: A x + B u = 0
    u = np.concatenate([np.zeros(5), load])
    x_ss = np.linalg.lstsq(MODEL.A_c, -MODEL.B_c @ u, rcond=None)[0]
    assert s.dw[0] < 0
    assert s.dw[0] == pytest.approx(x_ss[0], rel=1e-6)
    # synchronous frequency: all areas share it
    assert np.allclose(s.dw, s.dw[0], rtol=1e-6)


def test_step_rejects_non_finite():
    with pytest.raises(ValueError):
        MODEL.step(GridState.zero(), np.array([np.nan, 0, 0, 0, 0]), np.zeros(5))
    with pytest.raises(ValueError):
        step(GridState.zero(), np.zeros(4), np.zeros(5))


def test_discretisation_matches_rk4():
    rng = np.random.default_rng(2)
    s = GridState(rng.normal(0, 0.01, 5), rng.normal(0, 0.01, 5), rng.normal(0, 0.01, 4), np.zeros(5))
    u = rng.normal(0, 0.01, 10)
    x = s.vector()
    f = lambda v: MODEL.A_c @ v + MODEL.B_c @ u
    h = 1e-3
    for _ in range(4000):
        k1 = f(x)
        k2 = f(x + h / 2 * k1)
        k3 = f(x + h / 2 * k2)
        k4 = f(x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    exact = MODEL.step(s, u[:5], u[5:]).vector()
    assert np.allclose(exact, x, rtol=1e-8, atol=1e-12)


def test_default_config_is_stable():
    assert MODEL.spectral_radius() < 1.0


def test_unstable_config_rejected():
    cfg = GridConfig(areas=[AreaParams(agc_gain=5.0) for _ in range(5)])
    with pytest.raises(UnstableConfigError):
        simulate_trace(cfg, 0)


@pytest.mark.parametrize("bad", [
    {"tie_lines": [(1, 1), (1, 2), (2, 3), (3, 4), (4, 5)]},
    {"tie_lines": [(1, 2), (2, 3), (4, 5)]},
    {"tie_lines": [(1, 2), (2, 1), (2, 3), (3, 4), (4, 5)]},
    {"tie_lines": [(1, 2), (2, 3), (3, 4), (4, 9)]},
])
def test_topology_validation(bad):
    with pytest.raises(ValueError):
        GridConfig(**bad)


# ---------------------------------------------------------------- traces

def test_trace_determinism():
    a, b = simulate_trace(None, 7), simulate_trace(None, 7)
    assert np.array_equal(a.ace, b.ace) and np.array_equal(a.dw, b.dw) and np.array_equal(a.dpe, b.dpe)


def test_normal_trace_annotation():
    t = simulate_trace(None, 3)
    assert t.attack_kind == "none" and not t.active.any() and t.ace.shape == (300, 5)
    assert t.meta["bdd_alarms"] < 15


def test_zero_delay_tda_is_identity():
    base = simulate_trace(None, 11)
    t = simulate_trace(None, 11, attacks.TdaSpec(target_area=1, tau=0, duration=100))
    assert np.array_equal(base.ace, t.ace) and t.attack_kind == "none" and not t.active.any()


def test_attack_leaves_pre_attack_slots_untouched():
    base = simulate_trace(None, 5)
    for spec in (attacks.FdiaSpec(start=120), attacks.TdaSpec(tau=8, start=120)):
        t = simulate_trace(None, 5, spec)
        assert np.array_equal(base.ace[:120], t.ace[:120])
        assert t.active.sum() == 100 and t.active[120] and not t.active[119]
        assert not np.array_equal(base.ace[120:], t.ace[120:])


def test_fdia_is_invisible_to_bdd():
    base = simulate_trace(None, 9)
    t = simulate_trace(None, 9, attacks.FdiaSpec(start=50))
    assert t.meta["bdd_alarms"] == base.meta["bdd_alarms"]


def test_frequency_safety_annotation():
    dw = np.zeros((4, 5))
    dw[2, 3] = 0.6
    dw[1, 0] = -0.5
    t = Trace(dw, np.zeros((4, 5)), np.zeros((4, 5)))
    assert t.unsafe_slots().tolist() == [2]


def test_trace_file_round_trip(tmp_path):
    t = simulate_trace(None, 4, attacks.TdaSpec(tau=5, start=10))
    write_trace(t, tmp_path / "t.csv")
    r = read_trace(tmp_path / "t.csv")
    assert np.array_equal(r.ace, t.ace) and np.array_equal(r.dw, t.dw) and np.array_equal(r.dpe, t.dpe)
    assert r.attack_kind == "tda" and np.array_equal(r.active, t.active) and r.meta == t.meta
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header.startswith("slot,dw_1,dpe_1,ace_1,dw_2") and header.endswith("attack_kind,attack_active")


def test_corpus_counts_and_order():
    traces = simulate_corpus(None, {"none": 2, "fdia": 2, "tda": 1}, seed=3)
    assert [t.attack_kind for t in traces] == ["none", "none", "fdia", "fdia", "tda"]
    again = simulate_corpus(None, {"none": 2, "fdia": 2, "tda": 1}, seed=3)
    assert all(np.array_equal(a.ace, b.ace) for a, b in zip(traces, again))
    with pytest.raises(ValueError):
        simulate_corpus(None, {"replay": 1})
