from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mavdesign.core import CandidateModel, DesignSpace, ModelKind, TargetED
from mavdesign.models import (
    DomainError,
    NonRegularTarget,
    TargetNotAttained,
    admissible,
    ed_alpha,
    ed_derivatives,
    ed_gradient,
    log_density,
    log_density_derivs,
    mean_derivs,
    mean_eval,
    mean_value,
)

SPACE = DesignSpace(0.0, 150.0)
TARGET = TargetED(0.4, SPACE)

# (kind, vartheta) pairs spanning every family
PARAMS = [
    (ModelKind.CONSTANT, [0.3]),
    (ModelKind.LINEAR, [0.1, 0.004]),
    (ModelKind.QUADRATIC, [0.0, 0.00533, -0.00533 / 300.0]),
    (ModelKind.LOGLINEAR, [0.0, 0.0797, 1.0]),
    (ModelKind.LOGLINEAR, [0.2, -0.05, 7.5]),
    (ModelKind.EMAX, [0.0, 0.467, 25.0]),
    (ModelKind.EMAX, [0.1, 0.3, 110.0]),
    (ModelKind.EXPONENTIAL, [-0.08265, 0.08265, 85.0]),
    (ModelKind.EXPONENTIAL, [0.0, 0.2, -60.0]),
]
DOSES = np.array([0.0, 3.7, 25.0, 80.0, 150.0])


def _rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def _fd_jac(f, v, h=1e-6):
    """Central differences of a vector/array-valued ``f`` along each coordinate of ``v``."""
    v = np.asarray(v, dtype=float)
    cols = []
    for j in range(v.size):
        step = h * abs(v[j]) if v[j] != 0 else h
        up, dn = v.copy(), v.copy()
        up[j] += step
        dn[j] -= step
        cols.append((np.asarray(f(up)) - np.asarray(f(dn))) / (2 * step))
    return np.stack(cols, axis=-1)


class TestMeanFunctions:
    def test_loglinear_at_zero(self):
        assert mean_eval(ModelKind.LOGLINEAR, [0.0, 0.0797, 1.0], 0.0).value == 0.0

    def test_emax_at_top(self):
        v = mean_eval(ModelKind.EMAX, [0.0, 0.467, 25.0], 150.0).value
        assert v == pytest.approx(0.467 * 150 / 175, rel=1e-14)

    def test_loglinear_domain(self):
        with pytest.raises(DomainError):
            mean_value(ModelKind.LOGLINEAR, [0.0, 1.0, -5.0], [2.0])

    def test_exponential_rate_nonzero(self):
        with pytest.raises(DomainError):
            mean_value(ModelKind.EXPONENTIAL, [0.0, 1.0, 0.0], [2.0])

    def test_shape_preserved(self):
        x = np.linspace(0, 150, 6).reshape(2, 3)
        assert mean_value(ModelKind.EMAX, [0, 1, 10], x).shape == (2, 3)

    @pytest.mark.parametrize("kind, vt", PARAMS)
    def test_derivatives_match_finite_differences(self, kind, vt):
        _, g, H, T = mean_derivs(kind, vt, DOSES)
        assert _rel_err(g, _fd_jac(lambda t: mean_value(kind, t, DOSES), vt)) <= 1e-6
        assert _rel_err(H, _fd_jac(lambda t: mean_derivs(kind, t, DOSES)[1], vt)) <= 1e-6
        assert _rel_err(T, _fd_jac(lambda t: mean_derivs(kind, t, DOSES)[2], vt)) <= 1e-6

    @pytest.mark.parametrize("kind, vt", PARAMS)
    def test_symmetry(self, kind, vt):
        _, _, H, T = mean_derivs(kind, vt, DOSES)
        np.testing.assert_array_equal(H, np.swapaxes(H, 1, 2))
        for axes in ((1, 2), (2, 3), (1, 3)):
            np.testing.assert_array_equal(T, np.swapaxes(T, *axes))

    def test_admissible(self):
        assert admissible(ModelKind.EMAX, [0, 1, 5], SPACE)
        assert not admissible(ModelKind.EMAX, [0, 1, 0.0], SPACE)
        assert not admissible(ModelKind.EXPONENTIAL, [0, 1, 0.0], SPACE)
        assert not admissible(ModelKind.LINEAR, [np.nan, 1.0], SPACE)


class TestLogDensity:
    def test_constant_score(self):
        m = CandidateModel(ModelKind.CONSTANT, [0.0], 1.0)
        score, _, _ = log_density_derivs(m, 0.0, 0.0)
        np.testing.assert_allclose(score, [-0.5, 0.0])

    @pytest.mark.parametrize("kind, vt", PARAMS)
    def test_score_vanishes_at_mean(self, kind, vt):
        m = CandidateModel(kind, vt, 0.1)
        x = 25.0
        score, _, _ = log_density_derivs(m, x, float(mean_value(kind, vt, x)))
        np.testing.assert_allclose(score[1:], 0.0, atol=1e-15)

    @pytest.mark.parametrize("kind, vt", PARAMS)
    @pytest.mark.parametrize("x, y", [(0.0, 0.3), (37.0, -0.2), (150.0, 0.45)])
    def test_derivatives_match_finite_differences(self, kind, vt, x, y):
        theta = np.concatenate(([0.1], vt))

        def logf(t):
            return float(log_density(CandidateModel(kind, t[1:], t[0]), x, y))

        def score(t):
            return log_density_derivs(CandidateModel(kind, t[1:], t[0]), x, y)[0]

        def hess(t):
            return log_density_derivs(CandidateModel(kind, t[1:], t[0]), x, y)[1]

        S, H, T = log_density_derivs(CandidateModel(kind, vt, 0.1), x, y)
        assert _rel_err(S, _fd_jac(logf, theta)) <= 1e-6
        assert _rel_err(H, _fd_jac(score, theta)) <= 1e-6
        assert _rel_err(T, _fd_jac(hess, theta)) <= 1e-6
        np.testing.assert_allclose(H, H.T, rtol=0, atol=0)
        for axes in ((0, 1), (1, 2), (0, 2)):
            np.testing.assert_allclose(T, np.swapaxes(T, *axes), rtol=1e-14, atol=1e-14)

    def test_requires_positive_variance(self):
        with pytest.raises(ValueError):
            log_density_derivs(CandidateModel(ModelKind.LINEAR, [0, 1], 0.0), 1.0, 1.0)


class TestEd:
    @pytest.mark.parametrize("slope", [0.004, -2.0, 1e-6])
    def test_linear(self, slope):
        assert ed_alpha(ModelKind.LINEAR, [0.3, slope], TARGET) == pytest.approx(60.0, abs=1e-8)

    def test_emax_closed_form(self):
        assert ed_alpha(ModelKind.EMAX, [0.0, 0.467, 25.0], TARGET) == pytest.approx(1500 / 115, abs=1e-8)

    def test_loglinear_closed_form(self):
        assert ed_alpha(ModelKind.LOGLINEAR, [0.0, 0.0797, 1.0], TARGET) == pytest.approx(151**0.4 - 1, abs=1e-8)

    def test_exponential_closed_form(self):
        # (exp(x/c) - 1) / (exp(b/c) - 1) = alpha
        c = 85.0
        expected = c * np.log(1 + 0.4 * (np.exp(150 / c) - 1))
        assert ed_alpha(ModelKind.EXPONENTIAL, [-0.08265, 0.08265, c], TARGET) == pytest.approx(expected, abs=1e-8)

    def test_quadratic_first_crossing(self):
        # vertex at 100 overshoots the end value: the first crossing is taken
        vt = [0.0, 0.02, -0.0001]
        mu = ed_alpha(ModelKind.QUADRATIC, vt, TARGET)
        ratio = lambda x: np.polyval([vt[2], vt[1], 0.0], x) / np.polyval([vt[2], vt[1], 0.0], 150.0)
        assert mu == pytest.approx((0.02 - np.sqrt(0.0004 - 0.00012)) / 0.0002, abs=1e-8)
        assert ratio(mu) == pytest.approx(0.4, abs=1e-10)

    def test_flat_mean_rejected(self):
        with pytest.raises(TargetNotAttained):
            ed_alpha(ModelKind.CONSTANT, [1.0], TARGET)

    def test_equal_end_values_rejected(self):
        # symmetric parabola: eta(0) == eta(150)
        with pytest.raises(TargetNotAttained):
            ed_alpha(ModelKind.QUADRATIC, [0.0, 0.03, -0.0002], TARGET)

    def test_decreasing_mean(self):
        # the ratio is invariant to the sign of the effect
        up = ed_alpha(ModelKind.EMAX, [0.0, 0.467, 25.0], TARGET)
        down = ed_alpha(ModelKind.EMAX, [1.0, -0.467, 25.0], TARGET)
        assert down == pytest.approx(up, abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1.0, 200.0), st.floats(0.05, 0.5), st.floats(0.55, 0.95))
    def test_monotone_in_alpha(self, c, a1, a2):
        vt = [0.0, 0.5, c]
        assert ed_alpha(ModelKind.EMAX, vt, TargetED(a1, SPACE)) <= ed_alpha(ModelKind.EMAX, vt, TargetED(a2, SPACE))


class TestEdGradient:
    @pytest.mark.parametrize("kind, vt", [p for p in PARAMS if p[0] is not ModelKind.CONSTANT])
    def test_gradient_and_hessian_match_fd(self, kind, vt):
        mu, grad, hess = ed_derivatives(kind, vt, TARGET)
        assert grad[0] == 0.0 and np.all(hess[0] == 0.0) and np.all(hess[:, 0] == 0.0)
        fd_g = _fd_jac(lambda t: ed_alpha(kind, t, TARGET), vt, h=1e-6)
        fd_h = _fd_jac(lambda t: ed_derivatives(kind, t, TARGET)[1][1:], vt, h=1e-6)
        assert _rel_err(grad[1:], fd_g) <= 1e-6 * max(1.0, mu)
        assert _rel_err(hess[1:, 1:], fd_h) <= 1e-5 * max(1.0, mu)

    def test_linear_gradient_zero(self):
        np.testing.assert_allclose(ed_gradient(ModelKind.LINEAR, [0.2, 0.01], TARGET), 0.0, atol=1e-12)

    def test_non_regular_crossing(self):
        # eta = ((x - 60) / 60)^3: flat at x = 60 where the ratio equals alpha exactly
        e0, e1 = -1.0, 1.5**3
        alpha = (0.0 - e0) / (e1 - e0)
        c = 1.0 / 60.0**3
        vt = [0.0, 0.0, 0.0]
        space = SPACE

        import mavdesign.models as models

        class _Cubic:
            q = 1

            @staticmethod
            def value(v, x):
                return c * (x - 60.0) ** 3 + v[0]

            @staticmethod
            def derivs(v, x):
                m = x.size
                return np.ones((m, 1)), np.zeros((m, 1, 1)), np.zeros((m, 1, 1, 1))

            @staticmethod
            def dose_derivs(v, x):
                return 3 * c * (x - 60.0) ** 2, 6 * c * (x - 60.0), np.zeros((x.size, 1))

        saved = models._REGISTRY[ModelKind.CONSTANT]
        models._REGISTRY[ModelKind.CONSTANT] = _Cubic
        try:
            with pytest.raises(NonRegularTarget):
                ed_derivatives(ModelKind.CONSTANT, vt[:1], TargetED(alpha, space))
        finally:
            models._REGISTRY[ModelKind.CONSTANT] = saved
