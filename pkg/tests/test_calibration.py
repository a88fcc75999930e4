import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.base import clone

from maxtomo.calibration import (
    Calibrator,
    calibrate,
    calibration_residual,
    cross_calibration_scale,
    gauge_fix,
    initial_weights,
)
from maxtomo.inverse import data_consistency, data_weights


def synthetic(seed, L=4, n=60):
    r = np.random.default_rng(seed)
    sim = r.normal(size=(L, n)) + 1j * r.normal(size=(L, n))
    q_true = r.uniform(0.5, 2.0, L) * np.exp(1j * r.uniform(-np.pi, np.pi, L))
    # measured maps are the simulated ones seen through 1/q*
    return sim / q_true[:, None], sim, q_true


def test_identity_is_a_minimizer():
    _, sim, _ = synthetic(0)
    assert calibration_residual(np.ones(4), sim, sim) == 0
    res = calibrate(sim, sim)
    np.testing.assert_allclose(res.q, 1, atol=1e-8)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_recovers_synthetic_weights(seed):
    meas, sim, q_true = synthetic(seed)
    res = calibrate(meas, sim)
    q_ref = gauge_fix(q_true)
    assert np.abs(np.abs(res.q) / np.abs(q_ref) - 1).max() < 1e-6
    assert np.abs(np.angle(res.q / q_ref)).max() < 1e-6
    assert res.residual < 1e-10
    assert res.q[0].imag == 0 and res.q[0].real > 0


def test_recovered_weights_reduce_misfit():
    meas, sim, _ = synthetic(5)
    w = data_weights(meas)
    res = calibrate(meas, sim, w)
    before = data_consistency(meas, sim, w)[0]
    after = data_consistency(res.q[:, None] * meas, sim, w)[0]
    assert after < before


@given(st.floats(-np.pi, np.pi), st.integers(0, 500))
def test_residual_global_phase_invariant(theta, seed):
    meas, sim, q_true = synthetic(seed)
    q = q_true * (1 + 0.1j)
    a = calibration_residual(q, meas, sim)
    b = calibration_residual(np.exp(1j * theta) * q, meas, sim)
    assert b == pytest.approx(a, rel=1e-12, abs=1e-15)


def test_initial_weights_are_magnitude_ratios():
    meas = np.array([[1.0, 2.0], [0.5, 0.25]], complex)
    sim = np.array([[4.0, 1.0], [1.0j, 0.0]])
    np.testing.assert_allclose(initial_weights(meas, sim), [2.0, 2.0])


def test_gauge_fix():
    q = np.array([1j, 2.0])
    np.testing.assert_allclose(gauge_fix(q), [1.0, -2j])


def test_degenerate_channel_rejected():
    meas, sim, _ = synthetic(0)
    meas[2] = 0
    with pytest.raises(ValueError):
        calibrate(meas, sim)
    with pytest.raises(ValueError):
        calibrate(sim[:2], sim)


def test_cross_calibration_scale():
    q = np.array([1 + 1j, 0.5])
    np.testing.assert_allclose(cross_calibration_scale(q, 80.0, 48.0), q * 5 / 3)
    np.testing.assert_array_equal(cross_calibration_scale(q, 7.0, 7.0), q)
    with pytest.raises(ValueError):
        cross_calibration_scale(q, 1.0, 0.0)
    with pytest.raises(ValueError):
        cross_calibration_scale(q, 1.0, -2.0)


@given(st.floats(0.1, 100), st.floats(0.1, 100), st.floats(0.1, 100))
def test_cross_calibration_multiplicative(a, b, c):
    q = np.array([1.0 - 2j, 3.0])
    twice = cross_calibration_scale(cross_calibration_scale(q, b, a), c, b)
    np.testing.assert_allclose(twice, cross_calibration_scale(q, c, a), rtol=1e-12)


def test_calibrator_estimator():
    meas, sim, q_true = synthetic(7)
    cal = Calibrator(max_iter=300)
    assert clone(cal).get_params() == {"weight_mode": "sqrt", "max_iter": 300}
    out = cal.fit(meas, sim).transform(meas)
    assert cal.residual_ < 1e-10
    # the calibrated maps reproduce the simulated ones up to one global phase
    ph = np.vdot(out, sim) / abs(np.vdot(out, sim))
    np.testing.assert_allclose(out * ph, sim, atol=1e-6)
    with pytest.raises(ValueError):
        cal.transform(meas[:2])
