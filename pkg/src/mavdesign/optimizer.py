"""Numerical search for Bayesian optimal designs.

A k-point design is parameterized by its doses (scaled to [0, 1]) and the
first k-1 weights. Each multi-start runs COBYLA (or a penalized Nelder-Mead
fallback); the best run is polished by SLSQP with gradients assembled from
the directional derivatives of the criterion. When the sensitivity function
is still positive away from the support, the offending dose is inserted with
a small weight and the enlarged design is polished again.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize, root
from scipy.stats import qmc

from .core import ApproximateDesign, AveragingWeights, CandidateModel, TruthPrior, canonicalize
from .criterion import (
    CandidateSpec,
    CriterionContext,
    SensitivityReport,
    bayes_criterion,
    bayes_states,
    directional_derivative,
    verify_optimality,
)

log = logging.getLogger(__name__)

FAILED = 1e12


@dataclass(frozen=True)
class OptimizerConfig:
    k_points: int | tuple[int, ...] = (3, 4, 5, 6)
    restarts: int = 4
    max_evals: int = 3000
    merge_tol: float = 1e-3
    weight_tol: float = 1e-4
    seed: int = 20190101
    strategy: str = "cobyla"
    polish: bool = True
    grid_step: float = 0.25
    rhoend: float = 1e-7
    insertions: int = 3

    def __post_init__(self):
        ks = (self.k_points,) if isinstance(self.k_points, int) else tuple(self.k_points)
        if not ks or min(ks) < 2:
            raise ValueError("k_points must be at least 2")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if self.insertions < 0:
            raise ValueError("insertions must be nonnegative")
        if self.strategy not in ("cobyla", "neldermead"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        object.__setattr__(self, "k_points", ks)


@dataclass
class OptimResult:
    design: ApproximateDesign
    value: float
    evals: int
    per_start_values: list
    verified: SensitivityReport | None = None
    converged: bool = True
    k_values: dict = field(default_factory=dict)


class _Objective:
    """Criterion as a function of the packed vector, counting evaluations."""

    def __init__(self, context: CriterionContext, k: int):
        self.context = context
        self.k = k
        self.sp = context.space
        self.evals = 0
        self.best = (math.inf, None)

    def unpack(self, z) -> ApproximateDesign:
        k = self.k
        x = self.sp.lower + np.clip(z[:k], 0.0, 1.0) * self.sp.width
        w = np.clip(z[k:], 0.0, 1.0)
        wk = 1.0 - w.sum()
        weights = np.append(w, max(wk, 0.0))
        weights = np.maximum(weights, 1e-300)
        return ApproximateDesign(x, weights, self.sp)

    def __call__(self, z) -> float:
        self.evals += 1
        try:
            d = self.unpack(z)
            val = bayes_criterion(self.context, d)
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            log.debug("criterion failed at %s: %s", z, exc)
            return FAILED
        if not math.isfinite(val):
            return FAILED
        if val < self.best[0]:
            self.best = (val, np.array(z, dtype=float))
        return val

    def gradient(self, z) -> np.ndarray:
        """Gradient in packed coordinates from directional derivatives."""
        k = self.k
        d = self.unpack(z)
        W = self.sp.width
        h = 1e-5
        xs = d.points
        probe = np.concatenate((xs, np.clip(xs + h * W, self.sp.lower, self.sp.upper),
                                np.clip(xs - h * W, self.sp.lower, self.sp.upper)))
        states = bayes_states(self.context, d)
        D = np.zeros(probe.size)
        for p, st in zip(self.context.prior.probs, states):
            D += p * directional_derivative(st, probe)
        D0, Dp, Dm = D[:k], D[k : 2 * k], D[2 * k :]
        span = (probe[k : 2 * k] - probe[2 * k :]) / W
        dx = d.weights * (Dp - Dm) / np.where(span > 0, span, 1.0)
        dw = D0[: k - 1] - D0[k - 1]
        return np.concatenate((dx, dw))


def _initial_designs(k: int, restarts: int, seed: int, stream: int) -> list[np.ndarray]:
    """Equally spaced points with uniform weights, then Latin-hypercube
    perturbations seeded by ``(seed, k, stream)``."""
    base_x = np.linspace(0.0, 1.0, k)
    base_w = np.full(k - 1, 1.0 / k)
    out = [np.concatenate((base_x, base_w))]
    if restarts > 1:
        sampler = qmc.LatinHypercube(d=2 * k - 1, seed=np.random.default_rng([seed, k, stream]))
        u = sampler.random(restarts - 1)
        for row in u:
            x = np.sort(row[:k])
            x[0], x[-1] = 0.0, 1.0  # keep the range ends; interior points vary
            raw = np.append(row[k:], 1.0) + 0.25
            w = raw / raw.sum()
            out.append(np.concatenate((x, w[: k - 1])))
    return out


def _constraints(k: int):
    cons = []
    for i in range(k):
        cons.append({"type": "ineq", "fun": lambda z, i=i: z[i]})
        cons.append({"type": "ineq", "fun": lambda z, i=i: 1.0 - z[i]})
    for i in range(k - 1):
        cons.append({"type": "ineq", "fun": lambda z, i=k + i: z[i]})
    cons.append({"type": "ineq", "fun": lambda z: 1.0 - np.sum(z[k:])})
    return cons


def _run_start(obj: _Objective, z0, config: OptimizerConfig):
    k = obj.k
    if config.strategy == "cobyla":
        res = minimize(
            obj,
            z0,
            method="COBYLA",
            constraints=_constraints(k),
            options={"rhobeg": 0.1, "tol": config.rhoend, "maxiter": config.max_evals},
        )
    else:
        def penalized(z):
            excess = max(0.0, float(np.sum(z[k:])) - 1.0)
            return obj(z) + 1e6 * excess

        bounds = [(0.0, 1.0)] * (2 * k - 1)
        res = minimize(
            penalized,
            z0,
            method="Nelder-Mead",
            bounds=bounds,
            options={"maxfev": config.max_evals, "xatol": config.rhoend, "fatol": 1e-12, "adaptive": True},
        )
    return np.asarray(res.x, dtype=float), bool(res.success)


def _free_index(z, k: int, edge: float = 1e-6) -> np.ndarray:
    """Packed coordinates that are not doses sitting on the boundary."""
    x_free = np.flatnonzero((z[:k] > edge) & (z[:k] < 1.0 - edge))
    return np.concatenate((x_free, np.arange(k, 2 * k - 1)))


def _polish(obj: _Objective, z0):
    """SLSQP on the doses off the boundary and the weights.

    Boundary doses are held fixed: their huge outward gradients otherwise
    dominate the quasi-Newton scaling.
    """
    k = obj.k
    z0 = np.asarray(z0, dtype=float)
    idx = _free_index(z0, k)
    w_mask = idx >= k

    def embed(u):
        z = z0.copy()
        z[idx] = u
        return z

    def fun(u):
        return obj(embed(u))

    def jac(u):
        try:
            return obj.gradient(embed(u))[idx]
        except (ArithmeticError, ValueError, RuntimeError):
            return np.zeros_like(u)

    res = minimize(
        fun,
        z0[idx],
        jac=jac,
        method="SLSQP",
        bounds=[(0.0, 1.0)] * idx.size,
        constraints=[{
            "type": "ineq",
            "fun": lambda u: 1.0 - np.sum(u[w_mask]),
            "jac": lambda u: -w_mask.astype(float),
        }],
        options={"ftol": 1e-15, "maxiter": 200},
    )
    return embed(np.asarray(res.x, dtype=float))


def _kkt_refine(obj: _Objective, z0):
    """Solve the stationarity conditions on the current active set.

    Doses sitting on the design-space boundary stay fixed; the remaining
    unknowns are the interior doses and the first k-1 weights, whose gradient
    components must vanish at an optimum with all weights positive.
    """
    k = obj.k
    z0 = np.asarray(z0, dtype=float)
    idx = _free_index(z0, k)
    w_all = np.append(z0[k:], 1.0 - z0[k:].sum())
    if w_all.min() <= 0.0:
        return z0

    def embed(u):
        z = z0.copy()
        z[idx] = u
        return z

    def eqs(u):
        try:
            return obj.gradient(embed(u))[idx]
        except (ArithmeticError, ValueError, RuntimeError):
            return np.full(idx.size, 1e6)

    # FD Jacobian steps of about 1e-6 relative stay well above gradient noise
    sol = root(eqs, z0[idx], method="hybr", options={"xtol": 1e-12, "eps": 1e-12})
    z = embed(sol.x)
    w_new = np.append(z[k:], 1.0 - z[k:].sum())
    if not (np.all(w_new > 0.0) and np.all((z[:k] >= 0.0) & (z[:k] <= 1.0))):
        return z0
    if obj(z) > obj(z0) + 1e-10 * abs(obj(z0)):
        return z0
    return z


def _optimize_k(context, k, config, stream):
    obj = _Objective(context, k)
    per_start = []
    ok_any = False
    for z0 in _initial_designs(k, config.restarts, config.seed, stream):
        start_val = obj(z0)
        z, ok = _run_start(obj, z0, config)
        val = obj(z)
        ok_any |= ok
        per_start.append({"k": k, "start_value": start_val, "value": val, "success": ok})
        log.info("k=%d start value %.6g -> %.6g (%d evals)", k, start_val, val, obj.evals)
    best_val, best_z = obj.best
    if best_z is None:
        raise RuntimeError(f"no start produced a finite criterion for k={k}: {per_start}")
    if config.polish:
        z = _polish(obj, best_z)
        obj(z)
        z = _kkt_refine(obj, obj.best[1])
        obj(z)
        best_val, best_z = obj.best
    return obj.unpack(best_z), best_val, obj.evals, per_start, ok_any


def optimize(context: CriterionContext, config: OptimizerConfig = OptimizerConfig()) -> OptimResult:
    """Minimize the Bayesian criterion over designs with ``config.k_points`` support points."""
    best = None
    evals = 0
    per_start: list = []
    k_values = {}
    converged = False
    for stream, k in enumerate(config.k_points):
        d, val, n_ev, starts, ok = _optimize_k(context, k, config, stream)
        evals += n_ev
        per_start.extend(starts)
        cd = canonicalize(d, config.merge_tol * context.space.width, config.weight_tol)
        cval = bayes_criterion(context, cd)
        k_values[k] = cval
        if best is None or cval < best[1]:
            best = (cd, cval)
            converged = ok
    design, value = best
    report = verify_optimality(context, design, config.grid_step)
    if config.polish and not report.satisfied:
        # merging near-duplicate doses moves the design off the polished optimum
        cand, cval, n_ev = _refine(context, design, config)
        evals += n_ev
        if cval < value:
            design, value = cand, cval
            report = verify_optimality(context, design, config.grid_step)
    if config.polish:
        design, value, report, n_ev = _insert_points(context, design, value, report, config)
        evals += n_ev
    return OptimResult(design, value, evals, per_start, report, converged, k_values)


def _pack(design: ApproximateDesign) -> np.ndarray:
    sp = design.space
    return np.concatenate(((design.points - sp.lower) / sp.width, design.weights[:-1]))


def _refine(context, design, config):
    """Polish all doses and weights of ``design`` at its own support size."""
    obj = _Objective(context, len(design))
    z = _pack(design)
    obj(z)
    z = _polish(obj, z)
    obj(z)
    z = _kkt_refine(obj, obj.best[1])
    obj(z)
    cand = canonicalize(obj.unpack(obj.best[1]), config.merge_tol * context.space.width, config.weight_tol)
    return cand, bayes_criterion(context, cand), obj.evals


def _insert_points(context, design, value, report, config):
    """Vertex-direction steps: add the dose of largest positive sensitivity.

    Each step mixes the new dose in with weight 0.05, re-polishes all doses
    and weights, and is kept only if the criterion decreases.
    """
    evals = 0
    tol = config.merge_tol * context.space.width
    for _ in range(config.insertions):
        if report.satisfied:
            break
        off = ~report.is_support
        j = int(np.argmax(np.where(off, report.values, -np.inf)))
        x_new = float(report.grid[j])
        if report.values[j] <= report.tolerance or np.min(np.abs(design.points - x_new)) <= tol:
            break
        cand, cval, n_ev = _refine(context, design.mix(x_new, 0.05), config)
        evals += n_ev
        log.info("inserted dose %.4g: criterion %.10g -> %.10g", x_new, value, cval)
        if not cval < value:
            break
        design, value = cand, cval
        report = verify_optimality(context, design, config.grid_step)
    return design, value, report, evals


def optimize_local(
    g: CandidateModel,
    target,
    n: int,
    config: OptimizerConfig = OptimizerConfig(),
    candidates=None,
    weights: AveragingWeights | None = None,
) -> OptimResult:
    """Locally optimal design for the truth ``g``.

    By default the only candidate is the family of ``g`` itself, so the
    criterion reduces to the asymptotic variance of the ED estimate in the
    correctly specified model.
    """
    if candidates is None:
        candidates = [CandidateSpec.from_model(g)]
    if weights is None:
        weights = AveragingWeights.uniform(len(candidates))
    ctx = CriterionContext(TruthPrior.point(g), candidates, weights, target, n)
    return optimize(ctx, config)
