"""Per-channel complex calibration weights and cross-calibration scaling.

The weights ``q`` rescale the measured maps, ``q_l Bm_l``, so that their pair
products match the simulated ones. Only ``q_l conj(q_l')`` enters, so one
global phase is unobservable; results are reported with ``q_1`` real and
positive.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .inverse import data_weights, pair_products
from .optim import minimize_lbfgsb


@dataclass
class CalibrationResult:
    q: np.ndarray
    residual: float
    iterations: int


def _check_maps(measured, simulated):
    measured = np.asarray(measured, complex)
    simulated = np.asarray(simulated, complex)
    if measured.ndim != 2 or measured.shape != simulated.shape:
        raise ValueError("measured and simulated maps must share shape (channels, voxels)")
    if np.any(np.abs(measured).max(axis=1) == 0) or np.any(np.abs(simulated).max(axis=1) == 0):
        raise ValueError("degenerate all-zero channel")
    return measured, simulated


class _Residual:
    """``F(q) = sum |w_l w_l' (q_l conj(q_l') M_ll' - S_ll')|^2`` and its gradient."""

    def __init__(self, measured, simulated, weights):
        self.ww2 = (weights[:, None, :] * weights[None, :, :]) ** 2
        self.M = pair_products(measured)
        self.S = pair_products(simulated)
        self.eta2 = float(np.sum(self.ww2 * np.abs(self.M) ** 2))
        if self.eta2 == 0:
            raise ValueError("normalization eta vanishes")

    def delta(self, q):
        return q[:, None, None] * np.conj(q)[None, :, None] * self.M - self.S

    def value(self, q):
        return float(np.sum(self.ww2 * np.abs(self.delta(q)) ** 2))

    def f_d(self, q):
        return np.sqrt(self.value(q) / self.eta2)

    def grad_conj(self, q):
        """``dF / d conj(q)``."""
        d = self.delta(q)
        return 2.0 * np.einsum("abv,abv,b,abv->a", self.ww2, d, q, np.conj(self.M))


def gauge_fix(q):
    """Rotate ``q`` by a global phase so that ``q[0]`` is real positive."""
    q = np.asarray(q, complex)
    if q[0] == 0:
        return q.copy()
    out = q * (np.conj(q[0]) / abs(q[0]))
    out[0] = abs(q[0])
    return out


def initial_weights(measured, simulated):
    """Ratio of channelwise max magnitudes (simulated over measured), zero phase."""
    return (np.abs(simulated).max(axis=1) / np.abs(measured).max(axis=1)).astype(complex)


def calibration_residual(q, measured, simulated, weights=None):
    """Data-consistency ``f_d`` between ``q``-weighted measured maps and simulated maps."""
    measured, simulated = _check_maps(measured, simulated)
    weights = data_weights(measured) if weights is None else np.asarray(weights, float)
    return _Residual(measured, simulated, weights).f_d(np.asarray(q, complex))


def calibrate(measured, simulated, weights=None, max_iter=500, q0=None):
    """Fit complex per-channel weights by L-BFGS on the pair-product residual.

    The optimizer minimizes ``f_d^2`` (same minimizers, smooth at a zero
    residual). Returns a gauge-fixed :class:`CalibrationResult`.
    """
    measured, simulated = _check_maps(measured, simulated)
    weights = data_weights(measured) if weights is None else np.asarray(weights, float)
    res = _Residual(measured, simulated, weights)
    nl = measured.shape[0]
    q0 = initial_weights(measured, simulated) if q0 is None else np.asarray(q0, complex)
    # work on a normalized cost so tolerances are scale free
    scale = res.eta2

    def fun(x):
        q = x[:nl] + 1j * x[nl:]
        g = 2.0 * res.grad_conj(q) / scale
        return res.value(q) / scale, np.concatenate([g.real, g.imag])

    count = [0]

    def tick(_):
        count[0] += 1

    out = minimize_lbfgsb(fun, np.concatenate([q0.real, q0.imag]), [(None, None)] * (2 * nl), max_iter, on_iterate=tick)
    q = gauge_fix(out.x[:nl] + 1j * out.x[nl:])
    return CalibrationResult(q, res.f_d(q), count[0])


def cross_calibration_scale(q, v_target, v_ref):
    """Scale weights measured at drive voltage ``v_ref`` to ``v_target``."""
    if v_ref == 0:
        raise ValueError("reference voltage must be nonzero")
    if v_ref < 0:
        raise ValueError("reference voltage must be positive")
    return np.asarray(q, complex) * (v_target / v_ref)


class Calibrator(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit(measured, simulated)`` then ``transform(measured)``.

    Maps are ``(channels, voxels)`` complex arrays.
    """

    def __init__(self, weight_mode="sqrt", max_iter=500):
        self.weight_mode = weight_mode
        self.max_iter = max_iter

    def fit(self, X, y):
        measured, simulated = _check_maps(X, y)
        result = calibrate(measured, simulated, data_weights(measured, self.weight_mode), self.max_iter)
        self.q_ = result.q
        self.residual_ = result.residual
        self.n_iter_ = result.iterations
        return self

    def transform(self, X):
        check_is_fitted(self, "q_")
        X = np.asarray(X, complex)
        if X.ndim != 2 or X.shape[0] != len(self.q_):
            raise ValueError("channel count differs from the fitted weights")
        return self.q_[:, None] * X
