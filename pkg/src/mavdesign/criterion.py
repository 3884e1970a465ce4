"""Asymptotic MSE criteria for fixed-weight model averaging and the
sensitivity function of the Bayesian criterion.

Notation: for truth ``g`` and candidate ``s`` at its KL projection,
``A_s`` is the expected log-likelihood Hessian, ``B_st`` the score
cross-moment, ``c_s`` the gradient of ED_alpha and ``u_s = A_s^-1 c_s``.
Then ``sigma_w^2 = sum_st w_s w_t u_s' B_st u_t``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ApproximateDesign,
    AssumptionViolation,
    AveragingWeights,
    CandidateModel,
    ModelKind,
    TargetED,
    TruthPrior,
)
from .models import derivative_polys, ed_alpha, ed_derivatives
from .moments import (
    RCOND_MIN,
    _poly_outer_expect,
    central_moments,
    check_nonsingular,
    truth_mean,
)
from .projection import Bounds, Projection, project


class ProjectionFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class CandidateSpec:
    """A candidate family with a starting parameter for its projection."""

    kind: ModelKind
    start: tuple | None = None
    bounds: Bounds | None = None
    label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind.parse(self.kind))
        if self.start is not None:
            object.__setattr__(self, "start", tuple(float(v) for v in self.start))

    @property
    def name(self) -> str:
        return self.label or self.kind.value

    @classmethod
    def from_model(cls, model: CandidateModel, bounds: Bounds | None = None):
        return cls(model.kind, tuple(model.vartheta), bounds, model.label)


@dataclass
class CriterionContext:
    prior: TruthPrior
    candidates: tuple
    weights: AveragingWeights
    target: TargetED
    n: int = 100
    _warm: dict = field(default_factory=dict, repr=False, compare=False)
    _mu_true: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.candidates = tuple(self.candidates)
        if len(self.weights) != len(self.candidates):
            raise ValueError("one averaging weight per candidate required")
        if self.n < 1:
            raise ValueError("sample size must be at least 1")

    @property
    def space(self):
        return self.target.space

    def mu_true(self, atom_index: int) -> float:
        if atom_index not in self._mu_true:
            g = self.prior.atoms[atom_index]
            self._mu_true[atom_index] = ed_alpha(g.kind, g.vartheta, self.target)
        return self._mu_true[atom_index]

    def with_prior(self, prior: TruthPrior) -> CriterionContext:
        return CriterionContext(prior, self.candidates, self.weights, self.target, self.n)

    def reset_warm_starts(self) -> None:
        self._warm.clear()


# ---------------------------------------------------------------------------
# Per-truth state
# ---------------------------------------------------------------------------


@dataclass
class _CandState:
    model: CandidateModel
    proj: Projection
    idx: np.ndarray  # free coordinates within theta
    mu: float
    grad: np.ndarray  # d mu / d theta (free coords)
    hess: np.ndarray
    A: np.ndarray
    Ainv: np.ndarray
    polys: tuple  # derivative polynomials at the design points, free coords


@dataclass
class AtomState:
    """Everything the criterion and its derivative need for one truth."""

    g: CandidateModel
    design: ApproximateDesign
    cands: list
    B: dict
    u: list
    mu_true: float
    weights: np.ndarray
    n: int

    @property
    def bias(self) -> float:
        return float(sum(w * c.mu for w, c in zip(self.weights, self.cands)) - self.mu_true)

    @property
    def variance(self) -> float:
        """Asymptotic variance sigma_w^2 of the averaged estimate."""
        r = len(self.cands)
        tot = 0.0
        for s in range(r):
            for t in range(r):
                tot += self.weights[s] * self.weights[t] * float(self.u[s] @ self.B[s, t] @ self.u[t])
        return tot

    @property
    def mse(self) -> float:
        return self.variance / self.n + self.bias**2


def _restrict(polys, idx):
    S, H, T = polys
    return (
        S[:, :, idx],
        H[:, :, idx][:, :, :, idx],
        T[:, :, idx][:, :, :, idx][:, :, :, :, idx],
    )


def candidate_projections(context: CriterionContext, atom_index: int, design: ApproximateDesign):
    g = context.prior.atoms[atom_index]
    out = []
    for j, spec in enumerate(context.candidates):
        key = (atom_index, j)
        warm = context._warm.get(key)
        start = warm if warm is not None else spec.start
        proj = project(g, spec.kind, start, design, context.space, spec.bounds, warm=warm is not None)
        if not proj.converged:
            raise ProjectionFailure(
                f"projection of truth {g!r} onto candidate {spec.name} did not converge "
                f"(gradient norm {proj.gradient_norm:.3g})"
            )
        context._warm[key] = proj.theta_star[1:].copy()
        out.append(proj)
    return out


def atom_state(context: CriterionContext, atom_index: int, design: ApproximateDesign) -> AtomState:
    g = context.prior.atoms[atom_index]
    projections = candidate_projections(context, atom_index, design)
    x = design.points
    xw = design.weights
    mom = central_moments(g.sigma2)
    m = truth_mean(g, x)
    cands = []
    for spec, proj in zip(context.candidates, projections):
        model = proj.model(spec.kind, spec.name)
        idx = np.flatnonzero(proj.free)
        mu, grad, hess = ed_derivatives(model.kind, model.vartheta, context.target)
        polys = _restrict(derivative_polys(model, x, m), idx)
        A = np.einsum("i,k,ikpq->pq", xw, mom[:3], polys[1])
        check_nonsingular(A, f"A for candidate {spec.name} under truth {g!r}")
        cands.append(
            _CandState(model, proj, idx, mu, grad[idx], hess[np.ix_(idx, idx)], A, np.linalg.inv(A), polys)
        )
    B = {}
    r = len(cands)
    for s in range(r):
        for t in range(s, r):
            Bst = np.einsum("i,ipq->pq", xw, _poly_outer_expect(cands[s].polys[0], cands[t].polys[0], mom))
            B[s, t] = Bst
            B[t, s] = Bst.T
        check_nonsingular(B[s, s], f"B for candidate {cands[s].model.name} under truth {g!r}")
    u = [c.Ainv @ c.grad for c in cands]
    return AtomState(g, design, cands, B, u, context.mu_true(atom_index), context.weights.as_array(), context.n)


# ---------------------------------------------------------------------------
# Criteria
# ---------------------------------------------------------------------------


def mav_variance(g, projections, candidates, weights, design, target) -> float:
    """Asymptotic variance of the fixed-weight averaged ED estimate.

    ``projections`` are :class:`Projection` results for ``candidates``
    (kinds or specs) under ``g`` and ``design``.
    """
    prior = TruthPrior.point(g)
    specs = [c if isinstance(c, CandidateSpec) else CandidateSpec(c) for c in candidates]
    ctx = CriterionContext(prior, specs, weights, target, 1)
    for j, proj in enumerate(projections):
        ctx._warm[0, j] = proj.theta_star[1:].copy()
    return atom_state(ctx, 0, design).variance


def mav_mse(context: CriterionContext, g: CandidateModel, design: ApproximateDesign) -> float:
    """Asymptotic MSE of the averaged estimate when ``g`` is the truth."""
    return atom_state(context.with_prior(TruthPrior.point(g)), 0, design).mse


def bayes_criterion(context: CriterionContext, design: ApproximateDesign) -> float:
    """Prior expectation of the asymptotic MSE."""
    total = 0.0
    for i, p in enumerate(context.prior.probs):
        try:
            total += p * atom_state(context, i, design).mse
        except (AssumptionViolation, ProjectionFailure, ArithmeticError, ValueError) as exc:
            raise type(exc)(f"[atom {i}] {exc}") from exc
    return total


def bayes_states(context: CriterionContext, design: ApproximateDesign) -> list[AtomState]:
    return [atom_state(context, i, design) for i in range(len(context.prior))]


# ---------------------------------------------------------------------------
# Directional derivatives
# ---------------------------------------------------------------------------


def _theta_prime(c: _CandState, S_x: np.ndarray) -> np.ndarray:
    """Derivative of the projection along ``(1-a) xi + a delta_x``; one row per x."""
    return -(S_x @ c.Ainv.T)


def theta_prime(state: AtomState, cand: int, x) -> np.ndarray:
    """Rows ``theta'_s(xi, x)`` over the free coordinates of candidate ``cand``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    c = state.cands[cand]
    mom = central_moments(state.g.sigma2)
    S, _, _ = _restrict(derivative_polys(c.model, x, truth_mean(state.g, x)), c.idx)
    return _theta_prime(c, np.einsum("k,mkp->mp", mom[:3], S))


def directional_derivative(state: AtomState, x) -> np.ndarray:
    """``d/da Phi_mav((1-a) xi + a delta_x, g)`` at ``a = 0`` for each x.

    Inside the derivatives of A_s and B_st the direction ``theta'(xi, x)`` is a
    fixed vector while the expectation runs over the support of ``xi``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    g = state.g
    mom = central_moments(g.sigma2)
    xi_w = state.design.weights
    mx = truth_mean(g, x)
    r = len(state.cands)
    w = state.weights

    Sx, Hx, tp, dA_x = [], [], [], []
    for c in state.cands:
        S, H, _ = _restrict(derivative_polys(c.model, x, mx), c.idx)
        Sx.append(S)
        Hx.append(H)
        tp.append(_theta_prime(c, np.einsum("k,mkp->mp", mom[:3], S)))

    # h'_s: third-derivative term on the support plus A_s(delta_x) - A_s(xi)
    du = []
    for s, c in enumerate(state.cands):
        S_d, H_d, T_d = c.polys
        ET = np.einsum("i,k,ikpqr->pqr", xi_w, mom[:3], T_d)
        A_x = np.einsum("k,mkpq->mpq", mom[:3], Hx[s])
        h_s = np.einsum("pqr,mr->mpq", ET, tp[s]) + A_x - c.A
        dgrad = tp[s] @ c.hess.T
        du_s = dgrad @ c.Ainv.T - np.einsum("pq,mqr,r->mp", c.Ainv, h_s, state.u[s])
        du.append(du_s)

    dvar = np.zeros(x.size)
    for s in range(r):
        cs = state.cands[s]
        Hs_tp = np.einsum("ikpq,mq->mikp", cs.polys[1], tp[s])  # (m, i, k, p)
        for t in range(r):
            ct = state.cands[t]
            if w[s] == 0.0 or w[t] == 0.0:
                continue
            Bst = state.B[s, t]
            Ht_tp = np.einsum("ikpq,mq->mikp", ct.polys[1], tp[t])
            # E[(H_s theta'_s) S_t^T + S_s (H_t theta'_t)^T] averaged over the support
            term = np.zeros((x.size, Bst.shape[0], Bst.shape[1]))
            for j in range(3):
                for k in range(3):
                    mk = mom[j + k]
                    if mk == 0.0:
                        continue
                    term += mk * np.einsum("i,mip,iq->mpq", xi_w, Hs_tp[:, :, j], ct.polys[0][:, k])
                    term += mk * np.einsum("i,ip,miq->mpq", xi_w, cs.polys[0][:, j], Ht_tp[:, :, k])
            B_x = _poly_outer_expect(Sx[s], Sx[t], mom)
            h_st = term + B_x - Bst
            us, ut = state.u[s], state.u[t]
            val = (
                du[s] @ (Bst @ ut)
                + np.einsum("p,mpq,q->m", us, h_st, ut)
                + du[t] @ (Bst.T @ us)
            )
            dvar += w[s] * w[t] * val

    dbias = sum(w[s] * (tp[s] @ state.cands[s].grad) for s in range(r))
    return dvar / state.n + 2.0 * state.bias * dbias


def sensitivity(context: CriterionContext, design: ApproximateDesign, x, states=None) -> np.ndarray:
    """``d_pi(x, xi) = -D Phi^pi(xi)(delta_x - xi)``; nonpositive everywhere
    and zero on the support at a (locally) optimal design."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if states is None:
        states = bayes_states(context, design)
    out = np.zeros(x.size)
    for p, st in zip(context.prior.probs, states):
        out -= p * directional_derivative(st, x)
    return out


@dataclass
class SensitivityReport:
    grid: np.ndarray
    values: np.ndarray
    is_support: np.ndarray
    max_violation: float
    support_equalities: np.ndarray
    criterion: float

    @property
    def tolerance(self) -> float:
        return 1e-5 * abs(self.criterion)

    @property
    def satisfied(self) -> bool:
        tol = self.tolerance
        return self.max_violation <= tol and bool(np.all(self.support_equalities <= tol))

    def __len__(self) -> int:
        return self.grid.size

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["x", "d_pi", "is_support"])
        for xv, dv, sv in zip(self.grid, self.values, self.is_support):
            wr.writerow([f"{xv:.10g}", f"{dv:.12g}", int(sv)])
        return buf.getvalue()


def verify_optimality(context: CriterionContext, design: ApproximateDesign, grid_step: float = 0.25):
    """Evaluate the sensitivity function on a regular grid plus the support.

    ``max_violation`` is the largest value over the grid; support equalities
    are ``|d_pi|`` at the support points.
    """
    if not grid_step > 0:
        raise ValueError("grid_step must be positive")
    sp = context.space
    n_cells = int(round(sp.width / grid_step))
    grid = np.linspace(sp.lower, sp.upper, n_cells + 1)
    states = bayes_states(context, design)
    crit = float(sum(p * st.mse for p, st in zip(context.prior.probs, states)))
    all_x = np.concatenate((grid, design.points))
    vals = sensitivity(context, design, all_x, states)
    grid_vals = vals[: grid.size]
    supp_vals = vals[grid.size :]
    is_support = np.concatenate((np.zeros(grid.size, bool), np.ones(design.points.size, bool)))
    order = np.argsort(all_x, kind="stable")
    return SensitivityReport(
        all_x[order],
        vals[order],
        is_support[order],
        float(np.max(grid_vals)),
        np.abs(supp_vals),
        crit,
    )
