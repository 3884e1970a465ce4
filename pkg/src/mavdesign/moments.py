"""Expectations of log-likelihood derivatives under a Gaussian truth.

The production path substitutes Gaussian central moments into the
polynomial representation from :func:`models.derivative_polys`; the
Gauss-Hermite routine :func:`expect_gaussian` is the independent check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ApproximateDesign, AssumptionViolation, CandidateModel
from .models import derivative_polys, log_density_derivs, mean_value

DEFAULT_NODES = 40
RCOND_MIN = 1e-12


def central_moments(var: float) -> np.ndarray:
    """``E[Z^k]`` for ``k = 0..4`` and ``Z ~ N(0, var)``."""
    return np.array([1.0, 0.0, var, 0.0, 3.0 * var * var])


def expect_gaussian(integrand, mean: float, variance: float, nodes: int = DEFAULT_NODES):
    """Gauss-Hermite approximation of ``E[integrand(Y)]`` with ``Y ~ N(mean, variance)``.

    ``integrand`` may return scalars or arrays; the result has the same shape.
    """
    if not variance > 0:
        raise ValueError("variance must be positive")
    if nodes < 2:
        raise ValueError("need at least two quadrature nodes")
    t, w = np.polynomial.hermite.hermgauss(nodes)
    ys = mean + np.sqrt(2.0 * variance) * t
    total = None
    for y, wt in zip(ys, w):
        val = np.asarray(integrand(y), dtype=float)
        if not np.all(np.isfinite(val)):
            raise FloatingPointError(f"integrand not finite at node y={y:.6g}")
        total = wt * val if total is None else total + wt * val
    return total / np.sqrt(np.pi)


def truth_mean(g: CandidateModel, x) -> np.ndarray:
    return mean_value(g.kind, g.vartheta, np.asarray(x, dtype=float))


def _poly_outer_expect(P, Q, mom):
    """``E[P(z) Q(z)^T]`` for vector polynomials P (m,3,p), Q (m,3,q).

    Terms are grouped as ``(j, k) + (k, j)`` pairs so that swapping P and Q
    yields the exact transpose.
    """
    out = 0.0
    n = P.shape[1]
    for j in range(n):
        for k in range(j, n):
            if mom[j + k] == 0.0:
                continue
            term = P[:, j, :, None] * Q[:, k, None, :]
            if k != j:
                term = term + P[:, k, :, None] * Q[:, j, None, :]
            out = out + mom[j + k] * term
    return out


def _design_sum(w, M):
    """``sum_i w_i M_i`` accumulated in point order."""
    return np.sum(w[:, None, None] * M, axis=0)


@dataclass
class PointExpectations:
    """Per-dose expectations for one candidate under one truth."""

    score: np.ndarray  # (m, p)
    hess: np.ndarray  # (m, p, p)
    polys: tuple  # raw polynomials (S, H, T)


def point_expectations(g: CandidateModel, s: CandidateModel, x) -> PointExpectations:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mom = central_moments(g.sigma2)
    S, H, T = derivative_polys(s, x, truth_mean(g, x))
    return PointExpectations(
        np.einsum("k,mkp->mp", mom[:3], S),
        np.einsum("k,mkpq->mpq", mom[:3], H),
        (S, H, T),
    )


def score_cross(g: CandidateModel, s: CandidateModel, t: CandidateModel, x) -> np.ndarray:
    """Per-dose ``E_g[score_s score_t^T]``, shape ``(m, p_s, p_t)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mom = central_moments(g.sigma2)
    m = truth_mean(g, x)
    S_s = derivative_polys(s, x, m)[0]
    S_t = S_s if t is s else derivative_polys(t, x, m)[0]
    return _poly_outer_expect(S_s, S_t, mom)


def matrix_A(g: CandidateModel, s: CandidateModel, design: ApproximateDesign) -> np.ndarray:
    """Design-averaged expected Hessian of ``log f_s`` under the truth ``g``."""
    H = point_expectations(g, s, design.points).hess
    return np.einsum("i,ipq->pq", design.weights, H)


def matrix_B(g, s, t, design: ApproximateDesign) -> np.ndarray:
    """Design-averaged ``E_g[score_s score_t^T]``."""
    return _design_sum(design.weights, score_cross(g, s, t, design.points))


def matrix_A_quadrature(g, s, design, nodes: int = DEFAULT_NODES) -> np.ndarray:
    out = 0.0
    for x, w in zip(design.points, design.weights):
        m = float(truth_mean(g, x))
        out = out + w * expect_gaussian(lambda y: log_density_derivs(s, x, y)[1], m, g.sigma2, nodes)
    return out


def matrix_B_quadrature(g, s, t, design, nodes: int = DEFAULT_NODES) -> np.ndarray:
    out = 0.0
    for x, w in zip(design.points, design.weights):
        m = float(truth_mean(g, x))

        def f(y):
            return np.outer(log_density_derivs(s, x, y)[0], log_density_derivs(t, x, y)[0])

        out = out + w * expect_gaussian(f, m, g.sigma2, nodes)
    return out


def rcond(M: np.ndarray) -> float:
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[0] == 0 or not np.all(np.isfinite(sv)):
        return 0.0
    return float(sv[-1] / sv[0])


def check_nonsingular(M: np.ndarray, what: str) -> None:
    rc = rcond(M)
    if rc < RCOND_MIN:
        raise AssumptionViolation(f"Assumption A6 violated: {what} is singular (rcond={rc:.3g})")


@dataclass
class SandwichSet:
    """Matrices A_s, B_st and the block covariance Sigma for one truth and design."""

    A: list
    B: dict
    Sigma: dict

    def block_matrix(self) -> np.ndarray:
        r = len(self.A)
        return np.block([[self.Sigma[s, t] for t in range(r)] for s in range(r)])


def sandwich(g: CandidateModel, candidates, design: ApproximateDesign) -> SandwichSet:
    """Assemble A_s, B_st and Sigma_st = A_s^-1 B_st A_t^-1.

    ``candidates`` must already carry their KL-projected parameters.
    """
    candidates = list(candidates)
    x = design.points
    w = design.weights
    mom = central_moments(g.sigma2)
    m = truth_mean(g, x)
    polys = [derivative_polys(s, x, m) for s in candidates]
    A = [np.einsum("i,k,ikpq->pq", w, mom[:3], H) for _, H, _ in polys]
    for s, As in zip(candidates, A):
        check_nonsingular(As, f"A for candidate {s.name}")
    B = {}
    for i in range(len(candidates)):
        for j in range(i, len(candidates)):
            Bij = np.einsum("i,ipq->pq", w, _poly_outer_expect(polys[i][0], polys[j][0], mom))
            B[i, j] = Bij
            B[j, i] = Bij.T
        check_nonsingular(B[i, i], f"B for candidate {candidates[i].name}")
    Ainv = [np.linalg.inv(As) for As in A]
    Sigma = {key: Ainv[key[0]] @ Bst @ Ainv[key[1]] for key, Bst in B.items()}
    return SandwichSet(A, B, Sigma)
