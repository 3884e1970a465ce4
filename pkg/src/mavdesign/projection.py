"""Kullback-Leibler projection of a Gaussian truth onto a candidate family.

For Gaussian models with a common variance the projection splits into a
design-weighted nonlinear least-squares problem for ``vartheta`` and a closed
form for the variance, ``sigma2* = sigma2_g + sum_i w_i e_i^2``. The same
least-squares engine fits maximum-likelihood estimates to simulated data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .core import ApproximateDesign, CandidateModel, DesignSpace, ModelKind
from .models import DomainError, mean_derivs, mean_value

LINEAR_KINDS = (ModelKind.CONSTANT, ModelKind.LINEAR, ModelKind.QUADRATIC)
GRAD_TOL = 1e-8


@dataclass(frozen=True)
class Bounds:
    """Box for the nonlinear (third) mean parameter; ``None`` means free."""

    lower: float | None = None
    upper: float | None = None

    def clip(self, c: float) -> float:
        if self.lower is not None:
            c = max(c, self.lower)
        if self.upper is not None:
            c = min(c, self.upper)
        return c


@dataclass
class LSFit:
    vartheta: np.ndarray
    sse: float  # sum_i w_i (y_i - eta_i)^2
    grad: np.ndarray  # gradient of sse in vartheta (free coordinates only are meaningful)
    active: np.ndarray  # bool mask of parameters held at a bound
    converged: bool
    iterations: int = 0


@dataclass
class Projection:
    """Best-approximating candidate parameter for a truth under a design."""

    theta_star: np.ndarray
    kl_value: float
    converged: bool
    gradient_norm: float
    active: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def model(self, kind, label=None) -> CandidateModel:
        return CandidateModel(kind, self.theta_star[1:], self.theta_star[0], label)

    @property
    def free(self) -> np.ndarray:
        """Mask over ``theta = (sigma2, vartheta)`` of parameters not at a bound."""
        return np.concatenate(([True], ~self.active))


# ---------------------------------------------------------------------------
# Weighted least squares engine
# ---------------------------------------------------------------------------


def _param_box(kind: ModelKind, space: DesignSpace, bounds: Bounds | None):
    """Lower/upper arrays for vartheta, merging admissibility and user bounds."""
    q = kind.n_vartheta
    lo = np.full(q, -np.inf)
    hi = np.full(q, np.inf)
    if kind in (ModelKind.LOGLINEAR, ModelKind.EMAX):
        # keep x + c strictly positive on the design space
        lo[2] = -space.lower + 1e-9 * space.width
    if bounds is not None and q == 3:
        if bounds.lower is not None:
            lo[2] = max(lo[2], bounds.lower)
        if bounds.upper is not None:
            hi[2] = min(hi[2], bounds.upper)
    return lo, hi


def _linear_basis(kind, c, x):
    """Columns multiplying the two linear parameters when ``c`` is fixed."""
    one = np.ones_like(x)
    if kind is ModelKind.LOGLINEAR:
        return np.stack([one, np.log(x + c)], axis=1)
    if kind is ModelKind.EMAX:
        return np.stack([one, x / (c + x)], axis=1)
    if kind is ModelKind.EXPONENTIAL:
        return np.stack([one, np.exp(x / c)], axis=1)
    raise ValueError(kind)


def _design_matrix(kind, x):
    cols = {ModelKind.CONSTANT: 1, ModelKind.LINEAR: 2, ModelKind.QUADRATIC: 3}[kind]
    return np.stack([x**j for j in range(cols)], axis=1)


def _wls(X, y, w):
    sw = np.sqrt(w)
    Xw = X * sw[:, None]
    # equilibrate columns, then one refinement step on the residual
    cs = np.max(np.abs(Xw), axis=0)
    cs[cs == 0] = 1.0
    Xs = Xw / cs
    z, *_ = np.linalg.lstsq(Xs, y * sw, rcond=None)
    dz, *_ = np.linalg.lstsq(Xs, y * sw - Xs @ z, rcond=None)
    coef = (z + dz) / cs
    resid = y - X @ coef
    return coef, float(np.dot(w, resid * resid))


def _profile_sse(kind, c, x, y, w):
    with np.errstate(over="ignore", invalid="ignore"):
        X = _linear_basis(kind, c, x)
    if not np.all(np.isfinite(X)):
        return math.inf, None
    coef, sse = _wls(X, y, w)
    return sse, coef


def _scan_grid(kind, space: DesignSpace, lo, hi, n=48):
    """Candidate values for the nonlinear parameter, log-spaced in scale."""
    W = space.width
    mags = np.geomspace(1e-3 * W, 1e3 * W, n)
    if kind is ModelKind.EXPONENTIAL:
        grid = np.concatenate((-mags[::-1], mags))
    else:
        grid = -space.lower + mags
    grid = grid[(grid >= lo[2]) & (grid <= hi[2])]
    extra = [v for v in (lo[2], hi[2]) if np.isfinite(v)]
    return np.unique(np.concatenate((grid, extra)))


def _sse_grad_hess(kind, vt, x, y, w):
    eta, g, H, _ = mean_derivs(kind, vt, x)
    e = y - eta
    sse = float(np.dot(w, e * e))
    we = w * e
    grad = -2.0 * g.T @ we
    gn = 2.0 * (g * w[:, None]).T @ g
    hess = gn - 2.0 * np.einsum("i,ijk->jk", we, H)
    return sse, grad, hess, gn


def _root_polish(kind, vt, sse, grad, hess, x, y, w, lo, hi, steps=4):
    """Undamped Newton steps on the gradient once the SSE stalls at rounding
    level; a step is kept when it shrinks the free gradient and leaves the
    SSE unchanged to within rounding."""
    for _ in range(steps):
        free = ~(((vt <= lo) & (grad > 0)) | ((vt >= hi) & (grad < 0)))
        gnorm = np.max(np.abs(grad[free]), initial=0.0)
        if gnorm == 0.0:
            break
        try:
            step_f = np.linalg.solve(hess[np.ix_(free, free)], -grad[free])
        except np.linalg.LinAlgError:
            break
        cand = vt.copy()
        cand[free] += step_f
        if np.any(cand < lo) or np.any(cand > hi):
            break
        try:
            s_new, g_new, h_new, _ = _sse_grad_hess(kind, cand, x, y, w)
        except DomainError:
            break
        if not (np.max(np.abs(g_new[free]), initial=0.0) < gnorm and s_new <= sse * (1 + 1e-12) + 1e-300):
            break
        vt, sse, grad, hess = cand, s_new, g_new, h_new
    return vt, sse, grad


def _newton_polish(kind, vt, x, y, w, lo, hi, max_iter=100):
    """Damped Newton / Levenberg-Marquardt on the full parameter vector.

    Coordinates sitting on a bound with the descent direction pointing
    outward are frozen for the step.
    """
    vt = np.clip(np.asarray(vt, dtype=float), lo, hi)
    try:
        sse, grad, hess, gn = _sse_grad_hess(kind, vt, x, y, w)
    except DomainError:
        return None
    lam = 1e-6
    it = 0
    active = np.zeros(vt.size, dtype=bool)
    for it in range(1, max_iter + 1):
        active = ((vt <= lo) & (grad > 0)) | ((vt >= hi) & (grad < 0))
        free = ~active
        gf = grad[free]
        scale = np.abs(vt[free]) + 1e-8
        if np.max(np.abs(gf) * scale, initial=0.0) <= 1e-15 * max(sse, 1e-300) or not np.any(free):
            break
        Hf = hess[np.ix_(free, free)]
        # fall back to Gauss-Newton curvature when the full Hessian is indefinite
        try:
            np.linalg.cholesky(Hf)
        except np.linalg.LinAlgError:
            Hf = gn[np.ix_(free, free)]
        D = np.diag(np.diag(Hf)) + 1e-300
        accepted = False
        while lam < 1e16:
            try:
                step_f = np.linalg.solve(Hf + lam * D, -gf)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            step = np.zeros_like(vt)
            step[free] = step_f
            cand = np.clip(vt + step, lo, hi)
            try:
                s_new, g_new, h_new, gn_new = _sse_grad_hess(kind, cand, x, y, w)
            except DomainError:
                lam *= 10.0
                continue
            if np.isfinite(s_new) and s_new <= sse:
                moved = np.max(np.abs(cand - vt) / (np.abs(vt) + 1e-12))
                vt, sse, grad, hess, gn = cand, s_new, g_new, h_new, gn_new
                lam = max(lam / 10.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted or moved < 1e-15:
            break
    vt, sse, grad = _root_polish(kind, vt, sse, grad, hess, x, y, w, lo, hi)
    active = ((vt <= lo) & (grad > 0)) | ((vt >= hi) & (grad < 0))
    if active[-1] and not np.any(active[:-1]):
        # nonlinear parameter on its bound: the linear coefficients are exact
        s_prof, coef = _profile_sse(kind, vt[-1], x, y, w)
        if coef is not None and s_prof <= sse * (1 + 1e-12) + 1e-300:
            vt = np.array([coef[0], coef[1], vt[-1]])
            sse, grad, _, _ = _sse_grad_hess(kind, vt, x, y, w)
            active = ((vt <= lo) & (grad > 0)) | ((vt >= hi) & (grad < 0))
    return vt, sse, grad, active, it


def weighted_least_squares(
    kind,
    x,
    y,
    w,
    space: DesignSpace,
    start=None,
    bounds: Bounds | None = None,
    scan: bool = True,
) -> LSFit:
    """Minimize ``sum_i w_i (y_i - eta(x_i, t))^2`` over ``t``.

    Linear families are solved in closed form. For the three-parameter
    nonlinear families the two linear coefficients are profiled out and the
    nonlinear parameter is located by a log-scale scan plus bounded Brent
    search, then every candidate (scan winner and ``start``) is polished by
    damped Newton. With ``scan=False`` only ``start`` is polished, falling
    back to the scan if that fails.
    """
    kind = ModelKind.parse(kind)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    if kind in LINEAR_KINDS:
        coef, sse = _wls(_design_matrix(kind, x), y, w)
        _, grad, _, _ = _sse_grad_hess(kind, coef, x, y, w)
        return LSFit(coef, sse, grad, np.zeros(coef.size, dtype=bool), True, 1)

    lo, hi = _param_box(kind, space, bounds)
    starts = []
    if start is not None and np.all(np.isfinite(start)):
        starts.append(np.asarray(start, dtype=float))
    if scan or not starts:
        starts.extend(_profile_starts(kind, x, y, w, space, lo, hi))

    best = None
    for s0 in starts:
        res = _newton_polish(kind, s0, x, y, w, lo, hi)
        if res is None:
            continue
        if best is None or res[1] < best[1] - 1e-14 * max(best[1], 1e-300):
            best = res
        elif res[1] <= best[1] + 1e-14 * max(best[1], 1e-300) and _grad_ok(res, w) and not _grad_ok(best, w):
            best = res
        if not scan and _grad_ok(res, w):
            break
    if best is None:
        raise DomainError(f"no admissible {kind.value} fit found")
    vt, sse, grad, active, it = best
    return LSFit(vt, sse, grad, active, _grad_ok(best, w), it)


def _grad_ok(res, w) -> bool:
    vt, sse, grad, active, _ = res
    free = ~active
    return bool(np.max(np.abs(grad[free]), initial=0.0) <= GRAD_TOL * 1e-2 * max(1.0, np.sum(w)))


def _profile_starts(kind, x, y, w, space, lo, hi):
    grid = _scan_grid(kind, space, lo, hi)
    vals = np.array([_profile_sse(kind, c, x, y, w)[0] for c in grid])
    if not np.any(np.isfinite(vals)):
        return []
    j = int(np.nanargmin(np.where(np.isfinite(vals), vals, np.nan)))
    c_best = grid[j]
    left = grid[max(j - 1, 0)]
    right = grid[min(j + 1, grid.size - 1)]
    if left < c_best < right and (kind is not ModelKind.EXPONENTIAL or left * right > 0):
        res = minimize_scalar(
            lambda c: _profile_sse(kind, c, x, y, w)[0],
            bounds=(left, right),
            method="bounded",
            options={"xatol": 1e-10 * max(abs(c_best), 1e-8)},
        )
        if res.fun <= vals[j]:
            c_best = float(res.x)
    _, coef = _profile_sse(kind, c_best, x, y, w)
    return [np.array([coef[0], coef[1], c_best])]


# ---------------------------------------------------------------------------
# KL divergence and projection
# ---------------------------------------------------------------------------


def kl_divergence(g: CandidateModel, s: CandidateModel, design: ApproximateDesign) -> float:
    """Design-averaged KL divergence between Gaussian truth ``g`` and ``s``."""
    if not (g.sigma2 > 0 and s.sigma2 > 0):
        raise ValueError("KL divergence needs positive variances")
    x = design.points
    e = mean_value(g.kind, g.vartheta, x) - mean_value(s.kind, s.vartheta, x)
    per_point = (
        0.5 * math.log(s.sigma2 / g.sigma2) + (g.sigma2 + e * e) / (2.0 * s.sigma2) - 0.5
    )
    return float(np.dot(design.weights, per_point))


def default_start(kind, space: DesignSpace) -> np.ndarray:
    """A generic admissible starting parameter for ``kind``."""
    kind = ModelKind.parse(kind)
    W = space.width
    return {
        ModelKind.CONSTANT: np.array([0.0]),
        ModelKind.LINEAR: np.array([0.0, 1.0 / W]),
        ModelKind.QUADRATIC: np.array([0.0, 1.0 / W, 0.0]),
        ModelKind.LOGLINEAR: np.array([0.0, 1.0, -space.lower + 0.01 * W]),
        ModelKind.EMAX: np.array([0.0, 1.0, -space.lower + 0.2 * W]),
        ModelKind.EXPONENTIAL: np.array([0.0, 0.1, 0.5 * W]),
    }[kind]


def perturbed_starts(start) -> list[np.ndarray]:
    """Eight deterministic starts: ``start``, each coordinate scaled by
    0.75 and 1.25, and all coordinates scaled by 1.25."""
    start = np.asarray(start, dtype=float)
    out = [start.copy()]
    for i in range(start.size):
        for f in (0.75, 1.25):
            s = start.copy()
            s[i] *= f
            out.append(s)
    out.append(start * 1.25)
    return out[:8]


def project(
    g: CandidateModel,
    s_kind,
    start,
    design: ApproximateDesign,
    space: DesignSpace,
    bounds: Bounds | None = None,
    warm: bool = False,
) -> Projection:
    """KL projection of ``g`` onto the family ``s_kind`` under ``design``.

    ``warm=True`` trusts ``start`` as a warm start and only polishes it,
    falling back to the global search when the polish does not converge.
    """
    s_kind = ModelKind.parse(s_kind)
    x = design.points
    w = design.weights
    m = mean_value(g.kind, g.vartheta, x)
    if s_kind is g.kind and _in_box(s_kind, g.vartheta, space, bounds):
        fit = LSFit(g.vartheta.copy(), 0.0, np.zeros(g.vartheta.size), np.zeros(g.vartheta.size, bool), True)
    else:
        fit = weighted_least_squares(s_kind, x, m, w, space, start=start, bounds=bounds, scan=not warm)
        if warm and not fit.converged:
            fit = weighted_least_squares(s_kind, x, m, w, space, start=start, bounds=bounds, scan=True)
        if not fit.converged and start is not None:
            for s0 in perturbed_starts(start)[1:]:
                alt = weighted_least_squares(s_kind, x, m, w, space, start=s0, bounds=bounds, scan=False)
                if alt.converged and alt.sse <= fit.sse:
                    fit = alt
                    break
    sigma2 = g.sigma2 + fit.sse
    theta = np.concatenate(([sigma2], fit.vartheta))
    cand = CandidateModel(s_kind, fit.vartheta, sigma2)
    kl = kl_divergence(g, cand, design)
    # d KL / d vartheta = (1 / (2 sigma2)) d sse / d vartheta; d KL / d sigma2 = 0 at the profile
    grad = fit.grad / (2.0 * sigma2)
    gnorm = float(np.max(np.abs(grad[~fit.active]), initial=0.0))
    return Projection(theta, max(kl, 0.0), fit.converged and gnorm <= GRAD_TOL, gnorm, fit.active)


def _in_box(kind, vt, space, bounds) -> bool:
    lo, hi = _param_box(kind, space, bounds)
    return bool(np.all(vt >= lo) and np.all(vt <= hi))
