"""Monte-Carlo comparison of model averaging and model selection estimates.

Each replication draws Gaussian responses on a rounded design, fits every
candidate by maximum likelihood, and forms three estimates of the target:
uniform averaging, smooth-AIC averaging, and the estimate of the AIC-selected
model.
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .artifacts import csv_text
from .core import ApproximateDesign, CandidateModel, DesignSpace, ExactDesign, ModelKind, TargetED, round_design
from .criterion import CandidateSpec
from .models import DomainError, NonRegularTarget, TargetNotAttained, ed_alpha, mean_value
from .projection import Bounds, weighted_least_squares

SCHEMES = ("uniform", "smooth_aic", "select_aic")
REPORT_COLUMNS = ("truth", "design", "n", "estimator", "mse", "bias2", "var", "reps", "excluded")


class EstimationFailure(ArithmeticError):
    """A replication whose estimate cannot be formed (flagged, then excluded)."""


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    y: np.ndarray

    @property
    def n(self) -> int:
        return int(self.x.size)

    def grouped(self):
        """Distinct doses with their counts, response means and within-dose SS."""
        xs, inv, counts = np.unique(self.x, return_inverse=True, return_counts=True)
        sums = np.bincount(inv, weights=self.y)
        means = sums / counts
        within = float(np.sum((self.y - means[inv]) ** 2))
        return xs, counts, means, within


def draw_data(g: CandidateModel, exact: ExactDesign, seed) -> Dataset:
    """Independent responses ``eta_g(x_i) + N(0, sigma2_g)``.

    ``seed`` is anything accepted by ``numpy.random.default_rng`` (including a
    Generator, which is then advanced).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = np.repeat(exact.points, exact.counts)
    eta = mean_value(g.kind, g.vartheta, x)
    noise = rng.standard_normal(x.size)
    return Dataset(x, eta + math.sqrt(g.sigma2) * noise)


@dataclass
class FitResult:
    kind: ModelKind
    theta_hat: np.ndarray  # (sigma2, vartheta)
    loglik_sum: float
    aic: float
    converged: bool

    @property
    def n_params(self) -> int:
        return int(self.theta_hat.size)

    @property
    def vartheta(self) -> np.ndarray:
        return self.theta_hat[1:]


def gaussian_loglik(sse: float, n: int) -> float:
    """Profile log-likelihood ``sum log f`` at ``sigma2 = sse / n``."""
    s2 = sse / n
    if s2 <= 0.0:
        return math.inf
    return -0.5 * n * (math.log(2.0 * math.pi * s2) + 1.0)


def fit_mle(
    kind,
    data: Dataset,
    starts: Sequence | None = None,
    space: DesignSpace | None = None,
    bounds: Bounds | None = None,
) -> FitResult:
    """Gaussian maximum likelihood for one candidate family.

    The mean parameters solve a least-squares problem on the dose means
    weighted by the counts; ``sigma2_hat = SSE / n``. AIC is
    ``2 * loglik_sum - 2 p`` with ``p`` counting the variance too, so larger
    is better.
    """
    kind = ModelKind.parse(kind)
    if data.n == 0:
        raise ValueError("empty dataset")
    if space is None:
        space = DesignSpace(float(data.x.min()), float(max(data.x.max(), data.x.min() + 1.0)))
    xs, counts, means, within = data.grouped()
    w = counts / data.n
    starts = [np.asarray(s, dtype=float) for s in (starts or [])]
    fit = weighted_least_squares(kind, xs, means, w, space, start=starts[0] if starts else None, bounds=bounds)
    for s0 in starts[1:]:
        if fit.converged:
            break
        alt = weighted_least_squares(kind, xs, means, w, space, start=s0, bounds=bounds, scan=False)
        if alt.converged and alt.sse <= fit.sse:
            fit = alt
    sse = data.n * fit.sse + within
    sigma2 = max(sse, 0.0) / data.n
    ll = gaussian_loglik(sse, data.n)
    theta = np.concatenate(([sigma2], fit.vartheta))
    return FitResult(kind, theta, ll, 2.0 * ll - 2.0 * theta.size, fit.converged)


def smooth_aic_weights(fits: Sequence[FitResult]) -> np.ndarray:
    """``w_s`` proportional to ``exp(AIC_s / 2)``, computed with a max shift."""
    a = np.array([f.aic for f in fits], dtype=float)
    top = np.max(a)
    if math.isinf(top):
        w = (a == top).astype(float)
    else:
        w = np.exp(0.5 * (a - top))
    return w / w.sum()


def selected_index(fits: Sequence[FitResult]) -> int:
    """Index of the largest AIC; ties go to fewer parameters, then lower index."""
    keys = [(-f.aic, f.n_params, i) for i, f in enumerate(fits)]
    return min(keys)[2]


def scheme_weights(fits: Sequence[FitResult], scheme: str) -> np.ndarray:
    r = len(fits)
    if scheme == "uniform":
        return np.full(r, 1.0 / r)
    if scheme == "smooth_aic":
        return smooth_aic_weights(fits)
    if scheme == "select_aic":
        w = np.zeros(r)
        w[selected_index(fits)] = 1.0
        return w
    raise ValueError(f"unknown scheme {scheme!r}")


def fitted_eds(fits: Sequence[FitResult], target: TargetED, needed=None) -> np.ndarray:
    """ED of each fitted model (NaN where not needed)."""
    out = np.full(len(fits), np.nan)
    for i, f in enumerate(fits):
        if needed is not None and not needed[i]:
            continue
        try:
            out[i] = ed_alpha(f.kind, f.vartheta, target)
        except (TargetNotAttained, NonRegularTarget, DomainError) as exc:
            raise EstimationFailure(f"{f.kind.value}: {exc}") from exc
    return out


def estimate(fits: Sequence[FitResult], scheme: str, target: TargetED) -> float:
    """Averaged (or selected) target estimate under ``scheme``."""
    w = scheme_weights(fits, scheme)
    eds = fitted_eds(fits, target, needed=w > 0)
    return float(np.dot(w[w > 0], eds[w > 0]))


# ---------------------------------------------------------------------------
# Monte-Carlo study
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MseRow:
    truth: str
    design: str
    n: int
    estimator: str
    mse: float
    bias2: float
    var: float
    reps: int
    excluded: int


@dataclass
class MseReport:
    rows: list
    metadata: dict = field(default_factory=dict)

    def cell(self, truth: str, design: str, n: int, estimator: str) -> MseRow:
        for r in self.rows:
            if (r.truth, r.design, r.n, r.estimator) == (truth, design, n, estimator):
                return r
        raise KeyError((truth, design, n, estimator))

    def best_design(self, truth: str, n: int, estimator: str) -> str:
        """Design with the smallest MSE for the given truth and estimator."""
        cands = [r for r in self.rows if (r.truth, r.n, r.estimator) == (truth, n, estimator)]
        return min(cands, key=lambda r: r.mse).design

    def to_csv(self) -> str:
        rows = [
            (r.truth, r.design, r.n, r.estimator, f"{r.mse:.10g}", f"{r.bias2:.10g}",
             f"{r.var:.10g}", r.reps, r.excluded)
            for r in self.rows
        ]
        return csv_text(REPORT_COLUMNS, rows, self.metadata)


def _label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def replication_rng(seed: int, truth: str, design: str, n: int, rep: int) -> np.random.Generator:
    """Independent stream for one replication, keyed by its identity."""
    return np.random.default_rng([seed, _label_key(truth), _label_key(design), n, rep])


@dataclass(frozen=True)
class _Cell:
    truth_label: str
    truth: CandidateModel
    design_label: str
    design: ApproximateDesign
    n: int
    candidates: tuple
    target: TargetED
    reps: int
    seed: int
    schemes: tuple
    space: DesignSpace


def _run_cell(cell: _Cell) -> dict:
    """Errors ``mu_hat - mu_true`` per scheme (NaN for excluded replications)."""
    exact = round_design(cell.design, cell.n)
    mu_true = ed_alpha(cell.truth.kind, cell.truth.vartheta, cell.target)
    errs = {s: np.full(cell.reps, np.nan) for s in cell.schemes}
    for rep in range(cell.reps):
        rng = replication_rng(cell.seed, cell.truth_label, cell.design_label, cell.n, rep)
        data = draw_data(cell.truth, exact, rng)
        fits = [
            fit_mle(c.kind, data, [c.start] if c.start is not None else None, cell.space, c.bounds)
            for c in cell.candidates
        ]
        if not all(f.converged for f in fits):
            continue
        for s in cell.schemes:
            try:
                errs[s][rep] = estimate(fits, s, cell.target) - mu_true
            except EstimationFailure:
                pass
    return errs


def summarize(errors: np.ndarray, scale: float = 1.0):
    """``(mse, bias2, var, used, excluded)`` from per-replication errors."""
    ok = errors[np.isfinite(errors)]
    used = int(ok.size)
    if used == 0:
        return math.nan, math.nan, math.nan, 0, int(errors.size)
    m = float(np.mean(ok))
    var = float(np.mean((ok - m) ** 2))
    bias2 = m * m
    return scale * (bias2 + var), scale * bias2, scale * var, used, int(errors.size) - used


def mse_study(
    truths: Mapping[str, CandidateModel] | Sequence[CandidateModel],
    candidates: Sequence[CandidateSpec],
    designs: Mapping[str, ApproximateDesign],
    n_list: Sequence[int],
    reps: int,
    seed: int,
    target: TargetED,
    schemes: Sequence[str] = SCHEMES,
    scale: float = 1.0,
    threads: int = 1,
) -> MseReport:
    """Simulated MSE, squared bias and variance for every (truth, design, n, scheme).

    ``scale`` multiplies the reported moments (1 reports squared dose units).
    Replications with a non-converged fit or an unattainable target are
    excluded and counted.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    if not isinstance(truths, Mapping):
        truths = {(t.label or f"truth{i}"): t for i, t in enumerate(truths)}
    for s in schemes:
        if s not in SCHEMES:
            raise ValueError(f"unknown scheme {s!r}")
    cells = [
        _Cell(tl, t, dl, d, int(n), tuple(candidates), target, reps, seed, tuple(schemes), target.space)
        for tl, t in truths.items()
        for dl, d in designs.items()
        for n in n_list
    ]
    if threads > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    rows = []
    for cell, errs in zip(cells, results):
        for s in schemes:
            mse, b2, var, used, excl = summarize(errs[s], scale)
            rows.append(MseRow(cell.truth_label, cell.design_label, cell.n, s, mse, b2, var, used, excl))
    meta = {
        "seed": seed,
        "reps": reps,
        "scale": scale,
        "units": "squared dose units" if scale == 1.0 else f"squared dose units x {scale:g}",
        "excluded": sum(r.excluded for r in rows),
    }
    return MseReport(rows, meta)
