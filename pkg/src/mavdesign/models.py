"""Mean functions, Gaussian log-density derivatives and the ED_alpha target.

Every mean function is vectorized over doses ``x`` and returns derivatives
with respect to ``vartheta`` up to third order, plus the dose derivatives
needed to differentiate ED_alpha implicitly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .core import CandidateModel, DesignSpace, ModelKind, TargetED

ED_SCAN_CELLS = 512


class DomainError(ValueError):
    """Mean function evaluated outside its domain."""


class TargetNotAttained(ValueError):
    """No dose in the design space reaches the requested effect fraction."""


class NonRegularTarget(ArithmeticError):
    """ED_alpha is not differentiable in the parameters (flat crossing)."""


@dataclass(frozen=True)
class MeanEval:
    """Mean function and its vartheta-derivatives at one dose."""

    value: float
    grad: np.ndarray
    hess: np.ndarray
    third: np.ndarray


# Each mean function returns, for doses x of shape (m,):
#   value (m,), grad (m,q), hess (m,q,q), third (m,q,q,q)
# and the dose derivatives dx (m,), dxx (m,), dx_dtheta (m,q).


def _zeros(m, q, order):
    return np.zeros((m,) + (q,) * order)


class _Constant:
    q = 1

    @staticmethod
    def value(vt, x):
        return np.full_like(x, vt[0])

    @staticmethod
    def derivs(vt, x):
        m = x.size
        grad = np.ones((m, 1))
        return grad, _zeros(m, 1, 2), _zeros(m, 1, 3)

    @staticmethod
    def dose_derivs(vt, x):
        m = x.size
        return np.zeros(m), np.zeros(m), np.zeros((m, 1))


class _Linear:
    q = 2

    @staticmethod
    def value(vt, x):
        return vt[0] + vt[1] * x

    @staticmethod
    def derivs(vt, x):
        m = x.size
        grad = np.stack([np.ones(m), x], axis=1)
        return grad, _zeros(m, 2, 2), _zeros(m, 2, 3)

    @staticmethod
    def dose_derivs(vt, x):
        m = x.size
        dxdt = np.zeros((m, 2))
        dxdt[:, 1] = 1.0
        return np.full(m, vt[1]), np.zeros(m), dxdt


class _Quadratic:
    q = 3

    @staticmethod
    def value(vt, x):
        return vt[0] + vt[1] * x + vt[2] * x * x

    @staticmethod
    def derivs(vt, x):
        m = x.size
        grad = np.stack([np.ones(m), x, x * x], axis=1)
        return grad, _zeros(m, 3, 2), _zeros(m, 3, 3)

    @staticmethod
    def dose_derivs(vt, x):
        m = x.size
        dxdt = np.zeros((m, 3))
        dxdt[:, 1] = 1.0
        dxdt[:, 2] = 2.0 * x
        return vt[1] + 2.0 * vt[2] * x, np.full(m, 2.0 * vt[2]), dxdt


class _LogLinear:
    """eta = t0 + t1 * log(x + t2)"""

    q = 3

    @staticmethod
    def _u(vt, x):
        u = x + vt[2]
        if np.any(u <= 0):
            raise DomainError(f"log-linear offset {vt[2]:g} gives log of nonpositive argument")
        return u

    @classmethod
    def value(cls, vt, x):
        return vt[0] + vt[1] * np.log(cls._u(vt, x))

    @classmethod
    def derivs(cls, vt, x):
        u = cls._u(vt, x)
        m = x.size
        b = vt[1]
        grad = np.stack([np.ones(m), np.log(u), b / u], axis=1)
        hess = _zeros(m, 3, 2)
        hess[:, 1, 2] = hess[:, 2, 1] = 1.0 / u
        hess[:, 2, 2] = -b / u**2
        third = _zeros(m, 3, 3)
        for i, j, k in ((1, 2, 2), (2, 1, 2), (2, 2, 1)):
            third[:, i, j, k] = -1.0 / u**2
        third[:, 2, 2, 2] = 2.0 * b / u**3
        return grad, hess, third

    @classmethod
    def dose_derivs(cls, vt, x):
        u = cls._u(vt, x)
        b = vt[1]
        dxdt = np.stack([np.zeros_like(u), 1.0 / u, -b / u**2], axis=1)
        return b / u, -b / u**2, dxdt


class _Emax:
    """eta = t0 + t1 * x / (t2 + x)"""

    q = 3

    @staticmethod
    def _u(vt, x):
        u = x + vt[2]
        if np.any(u == 0):
            raise DomainError("Emax denominator vanishes on the design points")
        return u

    @classmethod
    def value(cls, vt, x):
        return vt[0] + vt[1] * x / cls._u(vt, x)

    @classmethod
    def derivs(cls, vt, x):
        u = cls._u(vt, x)
        m = x.size
        b = vt[1]
        grad = np.stack([np.ones(m), x / u, -b * x / u**2], axis=1)
        hess = _zeros(m, 3, 2)
        hess[:, 1, 2] = hess[:, 2, 1] = -x / u**2
        hess[:, 2, 2] = 2.0 * b * x / u**3
        third = _zeros(m, 3, 3)
        for i, j, k in ((1, 2, 2), (2, 1, 2), (2, 2, 1)):
            third[:, i, j, k] = 2.0 * x / u**3
        third[:, 2, 2, 2] = -6.0 * b * x / u**4
        return grad, hess, third

    @classmethod
    def dose_derivs(cls, vt, x):
        u = cls._u(vt, x)
        b, c = vt[1], vt[2]
        dxdt = np.stack([np.zeros_like(u), c / u**2, b * (x - c) / u**3], axis=1)
        return b * c / u**2, -2.0 * b * c / u**3, dxdt


class _Exponential:
    """eta = t0 + t1 * exp(x / t2)"""

    q = 3

    @staticmethod
    def _check(vt):
        if vt[2] == 0:
            raise DomainError("exponential rate parameter must be nonzero")

    @classmethod
    def value(cls, vt, x):
        cls._check(vt)
        return vt[0] + vt[1] * np.exp(x / vt[2])

    @classmethod
    def derivs(cls, vt, x):
        cls._check(vt)
        b, c = vt[1], vt[2]
        m = x.size
        e = np.exp(x / c)
        grad = np.stack([np.ones(m), e, -b * x * e / c**2], axis=1)
        hess = _zeros(m, 3, 2)
        hess[:, 1, 2] = hess[:, 2, 1] = -x * e / c**2
        hess[:, 2, 2] = b * e * (x**2 / c**4 + 2.0 * x / c**3)
        third = _zeros(m, 3, 3)
        for i, j, k in ((1, 2, 2), (2, 1, 2), (2, 2, 1)):
            third[:, i, j, k] = e * (x**2 / c**4 + 2.0 * x / c**3)
        third[:, 2, 2, 2] = -b * e * (x**3 / c**6 + 6.0 * x**2 / c**5 + 6.0 * x / c**4)
        return grad, hess, third

    @classmethod
    def dose_derivs(cls, vt, x):
        cls._check(vt)
        b, c = vt[1], vt[2]
        e = np.exp(x / c)
        dxdt = np.stack([np.zeros_like(e), e / c, -b * e * (x + c) / c**3], axis=1)
        return b * e / c, b * e / c**2, dxdt


_REGISTRY = {
    ModelKind.CONSTANT: _Constant,
    ModelKind.LINEAR: _Linear,
    ModelKind.QUADRATIC: _Quadratic,
    ModelKind.LOGLINEAR: _LogLinear,
    ModelKind.EMAX: _Emax,
    ModelKind.EXPONENTIAL: _Exponential,
}


def _impl(kind):
    return _REGISTRY[ModelKind.parse(kind)]


def _as_x(x):
    return np.atleast_1d(np.asarray(x, dtype=float))


def mean_value(kind, vartheta, x) -> np.ndarray:
    """Vectorized mean function; returns an array shaped like ``x``."""
    xa = _as_x(x)
    return _impl(kind).value(np.asarray(vartheta, dtype=float), xa).reshape(np.shape(x))


def mean_derivs(kind, vartheta, x):
    """``(value, grad, hess, third)`` at doses ``x`` (leading axis = dose)."""
    xa = _as_x(x)
    impl = _impl(kind)
    vt = np.asarray(vartheta, dtype=float)
    return (impl.value(vt, xa),) + impl.derivs(vt, xa)


def mean_eval(kind, vartheta, x: float) -> MeanEval:
    value, grad, hess, third = mean_derivs(kind, vartheta, [x])
    return MeanEval(float(value[0]), grad[0], hess[0], third[0])


def admissible(kind, vartheta, space: DesignSpace) -> bool:
    """Whether the mean function is defined on the whole design space."""
    kind = ModelKind.parse(kind)
    vt = np.asarray(vartheta, dtype=float)
    if not np.all(np.isfinite(vt)):
        return False
    if kind in (ModelKind.LOGLINEAR, ModelKind.EMAX):
        return vt[2] > -space.lower
    if kind is ModelKind.EXPONENTIAL:
        return vt[2] != 0
    return True


# ---------------------------------------------------------------------------
# Gaussian log-density derivatives
# ---------------------------------------------------------------------------


def derivative_polys(model: CandidateModel, x, center):
    """Derivatives of ``log f_s(y | x, theta)`` as polynomials in ``z = y - center``.

    Returns ``(score, hess, third)`` with shapes ``(m, 3, p)``, ``(m, 3, p, p)``
    and ``(m, 3, p, p, p)``; axis 1 indexes the power of ``z``. Writing
    ``r = y - eta = z + e`` with ``e = center - eta`` makes every derivative a
    quadratic in ``z``, so Gaussian expectations only need central moments up
    to order four.
    """
    v = model.sigma2
    if not v > 0:
        raise ValueError("log-density derivatives need sigma2 > 0")
    xa = _as_x(x)
    eta, g, H, T = mean_derivs(model.kind, model.vartheta, xa)
    m, q = g.shape
    p = q + 1
    e = np.broadcast_to(np.asarray(center, dtype=float), eta.shape) - eta

    S = np.zeros((m, 3, p))
    S[:, 0, 0] = -0.5 / v + 0.5 * e**2 / v**2
    S[:, 1, 0] = e / v**2
    S[:, 2, 0] = 0.5 / v**2
    S[:, 0, 1:] = (e / v)[:, None] * g
    S[:, 1, 1:] = g / v

    ggT = g[:, :, None] * g[:, None, :]
    Hd = np.zeros((m, 3, p, p))
    Hd[:, 0, 0, 0] = 0.5 / v**2 - e**2 / v**3
    Hd[:, 1, 0, 0] = -2.0 * e / v**3
    Hd[:, 2, 0, 0] = -1.0 / v**3
    Hd[:, 0, 0, 1:] = Hd[:, 0, 1:, 0] = -(e / v**2)[:, None] * g
    Hd[:, 1, 0, 1:] = Hd[:, 1, 1:, 0] = -g / v**2
    Hd[:, 0, 1:, 1:] = (-ggT + e[:, None, None] * H) / v
    Hd[:, 1, 1:, 1:] = H / v

    Td = np.zeros((m, 3, p, p, p))
    Td[:, 0, 0, 0, 0] = -1.0 / v**3 + 3.0 * e**2 / v**4
    Td[:, 1, 0, 0, 0] = 6.0 * e / v**4
    Td[:, 2, 0, 0, 0] = 3.0 / v**4
    c0 = 2.0 * (e / v**3)[:, None] * g
    c1 = 2.0 * g / v**3
    for k in range(2):
        coef = (c0, c1)[k]
        Td[:, k, 0, 0, 1:] = Td[:, k, 0, 1:, 0] = Td[:, k, 1:, 0, 0] = coef
    c0 = (ggT - e[:, None, None] * H) / v**2
    c1 = -H / v**2
    for k in range(2):
        coef = (c0, c1)[k]
        Td[:, k, 0, 1:, 1:] = Td[:, k, 1:, 0, 1:] = Td[:, k, 1:, 1:, 0] = coef
    sym = (
        np.einsum("mik,mj->mijk", H, g)
        + np.einsum("mi,mjk->mijk", g, H)
        + np.einsum("mij,mk->mijk", H, g)
    )
    Td[:, 0, 1:, 1:, 1:] = (-sym + e[:, None, None, None] * T) / v
    Td[:, 1, 1:, 1:, 1:] = T / v
    return S, Hd, Td


def log_density(model: CandidateModel, x, y) -> np.ndarray:
    eta = mean_value(model.kind, model.vartheta, x)
    v = model.sigma2
    return -0.5 * np.log(2.0 * np.pi * v) - 0.5 * (np.asarray(y) - eta) ** 2 / v


def log_density_derivs(model: CandidateModel, x: float, y: float):
    """Score, Hessian and third-derivative tensor of ``log f(y | x, theta)``
    with respect to ``theta = (sigma2, vartheta)``."""
    S, H, T = derivative_polys(model, [x], [y])
    return S[0, 0], H[0, 0], T[0, 0]


# ---------------------------------------------------------------------------
# ED_alpha
# ---------------------------------------------------------------------------


def _ratio_fn(kind, vt, space):
    impl = _impl(kind)
    ends = impl.value(vt, np.array([space.lower, space.upper]))
    span = ends[1] - ends[0]
    if span == 0 or not np.isfinite(span):
        raise TargetNotAttained("mean function takes equal values at both ends of the dose range")
    return lambda x: (impl.value(vt, _as_x(x)) - ends[0]) / span


def ed_alpha(kind, vartheta, target: TargetED) -> float:
    """Smallest dose whose placebo-adjusted effect reaches ``alpha`` times the
    effect at the top of the range."""
    space = target.space
    vt = np.asarray(vartheta, dtype=float)
    ratio = _ratio_fn(kind, vt, space)
    grid = np.linspace(space.lower, space.upper, ED_SCAN_CELLS + 1)
    gap = ratio(grid) - target.alpha
    hit = np.flatnonzero(gap >= 0)
    if hit.size == 0:
        raise TargetNotAttained(f"ED_{target.alpha:g} not attained on [{space.lower:g}, {space.upper:g}]")
    j = int(hit[0])
    if j == 0 or gap[j] == 0:
        return float(grid[j])
    f = lambda x: float(ratio(x)[0]) - target.alpha
    return float(brentq(f, grid[j - 1], grid[j], xtol=1e-12 * space.width, rtol=4 * np.finfo(float).eps))


def ed_derivatives(kind, vartheta, target: TargetED):
    """ED_alpha with its gradient and Hessian in ``theta = (sigma2, vartheta)``.

    Differentiates ``h(x, t) = eta(x) - eta(a) - alpha (eta(b) - eta(a)) = 0``
    implicitly at the root. The sigma2 row and column are identically zero.
    """
    kind = ModelKind.parse(kind)
    vt = np.asarray(vartheta, dtype=float)
    impl = _impl(kind)
    space = target.space
    al = target.alpha
    mu = ed_alpha(kind, vt, target)

    xs = np.array([mu, space.lower, space.upper])
    g, H, _ = impl.derivs(vt, xs)
    hx, hxx, hxt = impl.dose_derivs(vt, xs[:1])
    hx, hxx, hxt = float(hx[0]), float(hxx[0]), hxt[0]
    if abs(hx) <= 1e-12 * max(1.0, float(np.max(np.abs(g[0])))):
        raise NonRegularTarget("ED_alpha sits at a flat crossing; derivative undefined")
    ht = g[0] - g[1] - al * (g[2] - g[1])
    htt = H[0] - H[1] - al * (H[2] - H[1])

    dmu = -ht / hx
    d2mu = -(
        htt
        + np.outer(hxt, dmu)
        + np.outer(dmu, hxt)
        + hxx * np.outer(dmu, dmu)
    ) / hx

    q = vt.size
    grad = np.zeros(q + 1)
    grad[1:] = dmu
    hess = np.zeros((q + 1, q + 1))
    hess[1:, 1:] = d2mu
    return mu, grad, hess


def ed_gradient(kind, vartheta, target: TargetED) -> np.ndarray:
    return ed_derivatives(kind, vartheta, target)[1]


def model_ed(model: CandidateModel, target: TargetED) -> float:
    return ed_alpha(model.kind, model.vartheta, target)
