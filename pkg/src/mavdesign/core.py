"""Shared domain types: design space, approximate/exact designs, candidate
models, discrete priors over truths, and averaging weights.

All types validate their invariants on construction and are immutable.
Parameter vectors are ordered ``theta = (sigma2, vartheta_1, ..., vartheta_q)``
everywhere in the package.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

WEIGHT_TOL = 1e-12


class DesignError(ValueError):
    """Invalid or degenerate design."""


class AssumptionViolation(ArithmeticError):
    """A regularity assumption needed by the asymptotic theory fails numerically."""


class ModelKind(enum.Enum):
    CONSTANT = "constant"
    LINEAR = "linear"
    LOGLINEAR = "loglinear"
    EMAX = "emax"
    EXPONENTIAL = "exponential"
    QUADRATIC = "quadratic"

    @property
    def n_vartheta(self) -> int:
        return {"constant": 1, "linear": 2}.get(self.value, 3)

    @classmethod
    def parse(cls, name: str | ModelKind) -> ModelKind:
        if isinstance(name, ModelKind):
            return name
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown model kind {name!r}") from None


@dataclass(frozen=True)
class DesignSpace:
    lower: float
    upper: float

    def __post_init__(self):
        lo, hi = float(self.lower), float(self.upper)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ValueError("design space bounds must be finite")
        if not lo < hi:
            raise ValueError(f"design space needs lower < upper, got [{lo}, {hi}]")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all((x >= self.lower - tol) & (x <= self.upper + tol)))


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ApproximateDesign:
    """Probability measure on finitely many doses.

    Weights are renormalized on construction; points are kept in the given
    order (use :func:`canonicalize` to sort and merge).
    """

    points: np.ndarray
    weights: np.ndarray
    space: DesignSpace | None = None

    def __post_init__(self):
        pts = _frozen_array(self.points)
        w = np.array(self.weights, dtype=float).reshape(-1)
        if pts.size == 0:
            raise DesignError("design needs at least one support point")
        if pts.shape != w.shape:
            raise DesignError("points and weights must have equal length")
        if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(w)):
            raise DesignError("design entries must be finite")
        if np.any(w <= 0):
            raise DesignError("design weights must be positive")
        total = w.sum()
        w = w / total
        w.setflags(write=False)
        if self.space is not None and not self.space.contains(pts, tol=1e-12 * self.space.width):
            raise DesignError("design points outside the design space")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.points.size

    def __eq__(self, other):
        if not isinstance(other, ApproximateDesign):
            return NotImplemented
        return (
            np.array_equal(self.points, other.points)
            and np.array_equal(self.weights, other.weights)
        )

    def __hash__(self):
        return hash((self.points.tobytes(), self.weights.tobytes()))

    def __repr__(self):
        pts = ", ".join(f"{p:.4g}" for p in self.points)
        ws = ", ".join(f"{w:.4f}" for w in self.weights)
        return f"ApproximateDesign({{{pts}; {ws}}})"

    @classmethod
    def uniform(cls, points: Sequence[float], space: DesignSpace | None = None):
        return cls(points, np.full(len(points), 1.0 / len(points)), space)

    def mix(self, x: float, alpha: float) -> ApproximateDesign:
        """The design ``(1 - alpha) * self + alpha * delta_x``."""
        if not 0.0 <= alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if alpha == 0.0:
            return self
        hit = np.flatnonzero(self.points == x)
        w = (1.0 - alpha) * self.weights
        if hit.size:
            w = w.copy()
            w[hit[0]] += alpha
            return ApproximateDesign(self.points, w, self.space)
        return ApproximateDesign(
            np.append(self.points, x), np.append(w, alpha), self.space
        )

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(), "weights": self.weights.tolist()}


@dataclass(frozen=True, eq=False)
class ExactDesign:
    points: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        pts = _frozen_array(self.points)
        counts = _frozen_array(self.counts, dtype=np.int64)
        if pts.shape != counts.shape:
            raise DesignError("one count per point required")
        if np.any(counts < 1):
            raise DesignError("counts must be positive integers")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "counts", counts)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def __repr__(self):
        return f"ExactDesign(points={self.points.tolist()}, counts={self.counts.tolist()})"


@dataclass(frozen=True, eq=False)
class CandidateModel:
    """A Gaussian regression model: mean function of ``kind`` with parameter
    ``vartheta`` and error variance ``sigma2``."""

    kind: ModelKind
    vartheta: np.ndarray
    sigma2: float = 0.1
    label: str | None = None

    def __post_init__(self):
        kind = ModelKind.parse(self.kind)
        vt = _frozen_array(self.vartheta)
        if vt.size != kind.n_vartheta:
            raise ValueError(
                f"{kind.value} model needs {kind.n_vartheta} parameters, got {vt.size}"
            )
        if not np.all(np.isfinite(vt)):
            raise ValueError("model parameters must be finite")
        s2 = float(self.sigma2)
        if not s2 >= 0.0 or not math.isfinite(s2):
            raise ValueError("sigma2 must be a finite nonnegative number")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "vartheta", vt)
        object.__setattr__(self, "sigma2", s2)

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate(([self.sigma2], self.vartheta))

    @property
    def n_params(self) -> int:
        return 1 + self.kind.n_vartheta

    @property
    def name(self) -> str:
        return self.label or self.kind.value

    def with_params(self, vartheta, sigma2: float | None = None) -> CandidateModel:
        return CandidateModel(
            self.kind, vartheta, self.sigma2 if sigma2 is None else sigma2, self.label
        )

    def __eq__(self, other):
        if not isinstance(other, CandidateModel):
            return NotImplemented
        return (
            self.kind is other.kind
            and np.array_equal(self.vartheta, other.vartheta)
            and self.sigma2 == other.sigma2
        )

    def __hash__(self):
        return hash((self.kind, self.vartheta.tobytes(), self.sigma2))

    def __repr__(self):
        vt = ", ".join(f"{v:.6g}" for v in self.vartheta)
        return f"CandidateModel({self.kind.value}, ({vt}), sigma2={self.sigma2:g})"


@dataclass(frozen=True)
class TruthPrior:
    """Finite discrete prior over Gaussian truths."""

    atoms: tuple[CandidateModel, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        atoms = tuple(self.atoms)
        probs = np.asarray(self.probs, dtype=float).reshape(-1)
        if not atoms:
            raise ValueError("prior needs at least one atom")
        if len(atoms) != probs.size:
            raise ValueError("one probability per atom required")
        if np.any(probs <= 0):
            raise ValueError("prior probabilities must be positive")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"prior probabilities sum to {probs.sum()}, not 1")
        probs = probs / probs.sum()
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "probs", tuple(float(p) for p in probs))

    @classmethod
    def point(cls, model: CandidateModel) -> TruthPrior:
        return cls((model,), (1.0,))

    @classmethod
    def uniform(cls, atoms: Sequence[CandidateModel]) -> TruthPrior:
        atoms = tuple(atoms)
        return cls(atoms, tuple([1.0 / len(atoms)] * len(atoms)))

    def __len__(self) -> int:
        return len(self.atoms)

    def __iter__(self):
        return iter(zip(self.atoms, self.probs))


@dataclass(frozen=True)
class TargetED:
    """The ED_alpha functional on the dose range ``space``."""

    alpha: float
    space: DesignSpace

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass(frozen=True)
class AveragingWeights:
    w: tuple[float, ...] = field(default=())

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float).reshape(-1)
        if w.size == 0:
            raise ValueError("need at least one weight")
        if np.any(w < 0):
            raise ValueError("averaging weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"averaging weights sum to {w.sum()}, not 1")
        w = w / w.sum()
        object.__setattr__(self, "w", tuple(float(v) for v in w))

    @classmethod
    def uniform(cls, r: int) -> AveragingWeights:
        return cls(tuple([1.0 / r] * r))

    def as_array(self) -> np.ndarray:
        return np.array(self.w)

    def __len__(self) -> int:
        return len(self.w)


def canonicalize(
    design: ApproximateDesign, merge_tol: float = 1e-6, weight_tol: float = 1e-9
) -> ApproximateDesign:
    """Sort points, merge clusters closer than ``merge_tol`` and drop weights
    below ``weight_tol``.

    Merged points sit at the weight-averaged location. Pruning happens after
    merging so that many tiny neighbours can add up to a kept point.
    """
    if merge_tol < 0 or weight_tol < 0:
        raise ValueError("tolerances must be nonnegative")
    order = np.argsort(design.points, kind="stable")
    pts = design.points[order]
    w = design.weights[order]

    merged_p: list[float] = []
    merged_w: list[float] = []
    start = 0
    for i in range(1, pts.size + 1):
        if i == pts.size or pts[i] - pts[i - 1] > merge_tol:
            ws = w[start:i]
            tot = ws.sum()
            merged_p.append(float(np.dot(ws, pts[start:i]) / tot))
            merged_w.append(float(tot))
            start = i
    mp = np.array(merged_p)
    mw = np.array(merged_w)
    keep = mw >= weight_tol
    if not np.any(keep):
        raise DesignError("degenerate design: all mass dropped")
    mp, mw = mp[keep], mw[keep]
    if design.space is not None:
        mp = np.clip(mp, design.space.lower, design.space.upper)
    out = ApproximateDesign(mp, mw, design.space)
    if out.points.size == design.points.size and np.array_equal(order, np.arange(order.size)):
        if np.array_equal(out.points, design.points) and np.allclose(
            out.weights, design.weights, rtol=0, atol=1e-15
        ):
            return design
    return out


def round_design(design: ApproximateDesign, n: int) -> ExactDesign:
    """Efficient rounding of an approximate design to ``n`` observations.

    Starts from ``ceil((n - k/2) * w_i)`` and then adjusts one observation at a
    time: while the total is short, increment a point minimizing ``n_j / w_j``;
    while it is over, decrement a point maximizing ``(n_j - 1) / w_j``. Ties go
    to the lowest index.
    """
    k = len(design)
    if n < k:
        raise DesignError(f"cannot round a {k}-point design to n={n} < k observations")
    w = design.weights
    counts = np.ceil((n - 0.5 * k) * w - 1e-12).astype(np.int64)
    counts = np.maximum(counts, 1)
    while counts.sum() < n:
        j = int(np.argmin(counts / w))
        counts[j] += 1
    while counts.sum() > n:
        ratio = np.where(counts > 1, (counts - 1) / w, -np.inf)
        j = int(np.argmax(ratio))
        counts[j] -= 1
    return ExactDesign(design.points, counts)
