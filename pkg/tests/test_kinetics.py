
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from glucokin import kinetics as kin

P = kin.KineticModelParams(0.00044, -0.0498, 0.01)


def test_params_validation_and_roundtrip():
    for bad in [(0.0, -0.1), (0.01, 0.1), (0.01, -0.1, 0.0)]:
        with pytest.raises(ValueError):
            kin.KineticModelParams(*bad)
    assert kin.KineticModelParams.from_dict(P.to_dict()) == P


def test_model_values():
    assert kin.model_eval(0, 90.0, 50.0, P) == 90.0
    assert kin.model_eval(1e6, 90.0, 50.0, P) == pytest.approx(50.0)
    t = np.arange(5.0)
    tau = P.tau(50.0)
    assert np.allclose(kin.model_eval(t, 90.0, 50.0, P), 40.0 * np.exp(tau * t) + 50.0)


def test_jacobian_at_origin_and_far():
    assert kin.model_jacobian(0, 90.0, 50.0, P) == 0.0
    assert kin.model_jacobian(1e6, 90.0, 50.0, P) == pytest.approx(1.0)


@given(st.floats(0, 500), st.floats(20, 100), st.floats(20, 100))
def test_jacobian_matches_central_difference(t, r_d, r_c):
    eps = 1e-4
    fd = (kin.model_eval(t, r_d, r_c + eps, P) - kin.model_eval(t, r_d, r_c - eps, P)) / (2 * eps)
    assert kin.model_jacobian(t, r_d, r_c, P) == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_exponent_clamp():
    p = kin.KineticModelParams(0.01, -0.1)  # tau > 0 for r_c above 10
    assert np.isfinite(kin.model_eval(1e4, 90.0, 50.0, p))


def test_regression_two_points():
    p = kin.regress_tau([50.0, 90.0], [-0.3, -0.1])
    assert p.delta_tau == pytest.approx(0.005)
    assert p.tau0 == pytest.approx(-0.55)
    with pytest.raises(ValueError):
        kin.regress_tau([50.0, 50.0], [-0.3, -0.1])
    with pytest.raises(ValueError):
        kin.regress_tau([50.0], [-0.3])


def test_fit_recovers_noise_free_curve():
    t = np.arange(300.0)
    r = 35.0 * np.exp(-0.02 * t) + 55.0
    fit = kin.fit_exponential(r)
    assert fit.ok
    assert fit.r_d == pytest.approx(90.0, abs=1e-6)
    assert fit.r_c == pytest.approx(55.0, abs=1e-6)
    assert fit.tau == pytest.approx(-0.02, abs=1e-6)


def test_fit_noise_variance(rng):
    t = np.arange(400.0)
    r = 35.0 * np.exp(-0.02 * t) + 55.0 + rng.normal(0, 0.1, t.size)
    fit = kin.fit_exponential(r)
    assert fit.noise_var == pytest.approx(0.01, rel=0.2)


def test_fit_edge_cases():
    with pytest.raises(ValueError):
        kin.fit_exponential(np.ones(5))
    assert not kin.fit_exponential(np.full(20, 3.0)).ok


def test_standard_convergence_on_step():
    r = np.r_[np.full(10, 100.0), np.linspace(90, 60, 30), np.full(40, 60.0)]
    d = kin.standard_convergence(r, 10, t_slope=0.01, window=15)
    assert d is not None and d.method == "standard"
    assert d.r_c_hat == 60.0
    # slope of 15-frame windows is exactly zero from frame 54 onwards
    assert 54 <= d.n_c <= 54 + 15
    assert kin.standard_convergence(np.linspace(100, 0, 80), 10) is None


def test_slope_monitor_validation():
    with pytest.raises(ValueError):
        kin.SlopeMonitor(0, t_slope=0.0)
    with pytest.raises(ValueError):
        kin.SlopeMonitor(0, window=1)


def test_ekf_infinite_noise_keeps_state():
    s = kin.EkfState(60.0, 4.0, 0.0, 1e300)
    out = kin.ekf_step(s, 10.0, 90.0, P, t=5)
    assert out.r_c == pytest.approx(60.0, abs=1e-12)
    assert out.P == pytest.approx(4.0)


def test_ekf_exact_measurement_fixed_point():
    s = kin.EkfState(60.0, 4.0, 1e-4, 0.01)
    y = kin.model_eval(20, 90.0, 60.0, P)
    out = kin.ekf_step(s, y, 90.0, P, t=20)
    assert out.r_c == pytest.approx(60.0, abs=1e-12)
    assert out.P < s.P + s.Q


def test_ekf_scalar_update_formula():
    s = kin.EkfState(60.0, 2.0, 0.5, 0.3)
    t, y, r_d = 30, 70.0, 90.0
    h = kin.model_jacobian(t, r_d, 60.0, P)
    pp = 2.5
    gain = pp * h / (h * h * pp + 0.3)
    out = kin.ekf_step(s, y, r_d, P, t=t)
    assert out.r_c == pytest.approx(60.0 + gain * (y - kin.model_eval(t, r_d, 60.0, P)))
    assert out.P == pytest.approx((1 - gain * h) * pp)
    assert out.n == t


def test_ekf_state_validation():
    with pytest.raises(ValueError):
        kin.EkfState(50.0, -1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        kin.EkfState(50.0, 1.0, 0.0, 0.0)


def test_ekf_convergence_rule():
    assert kin.ekf_convergence([1.0] * 16, 0.02, 15) == 15
    assert kin.ekf_convergence([1.0] * 15, 0.02, 15) is None
    assert kin.ekf_convergence([0.0, 1.0] + [1.0] * 15, 0.02, 15) == 16
    with pytest.raises(ValueError):
        kin.ekf_convergence([1.0], 0.0)


def test_ekf_tracks_noisy_curve(rng):
    n_drop, r_d, r_c = 20, 85.0, 55.0
    n = np.arange(600)
    r = np.where(n < n_drop, 100.0, kin.model_eval(np.maximum(n - n_drop, 0), r_d, r_c, P))
    r = r + rng.normal(0, 0.1, n.size)
    decision, tracker = kin.run_ekf(r, n_drop, P)
    assert decision is not None
    assert decision.r_c_hat == pytest.approx(r_c, abs=1.0)
    std = kin.standard_convergence(r, n_drop)
    assert std is not None and decision.n_c < std.n_c
    assert tracker.n0 == n_drop + 10
    assert len(tracker.history) == len(tracker.variances) == decision.n_c - tracker.n0 + 1
    assert all(0.0 <= v <= 100.0 for v in tracker.history)


def test_decision_dict():
    assert kin.ConvergenceDecision("ekf", 7, 55.5).to_dict() == {"method": "ekf", "n_C": 7, "r_C_hat": 55.5}


def test_trace():
    tr = kin.KineticTrace([1.0, 2.0, 3.0], 1)
    assert tr.r_drop == 2.0
    assert tr.post_drop().tolist() == [2.0, 3.0]
    with pytest.raises(ValueError):
        kin.KineticTrace([1.0], 3)
