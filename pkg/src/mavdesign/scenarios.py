"""Dose-response scenarios used throughout: the four reference models on
[0, 150] with error variance 0.1, the two candidate sets, the +-10%
parameter-grid priors, and the reference designs."""

from __future__ import annotations

import itertools

import numpy as np

from .core import ApproximateDesign, CandidateModel, DesignSpace, ModelKind, TargetED, TruthPrior
from .projection import Bounds

SPACE = DesignSpace(0.0, 150.0)
TARGET = TargetED(0.4, SPACE)
SIGMA2 = 0.1

# Rounded coefficient of the quadratic term; the value consistent with the
# reference EDs puts the vertex of the parabola at the top dose.
QUADRATIC_ROUNDED = -0.00002
QUADRATIC_VERTEX_AT_TOP = -0.00533 / 300.0

REFERENCE_MODELS = {
    "f1": CandidateModel(ModelKind.LOGLINEAR, [0.0, 0.0797, 1.0], SIGMA2, "f1"),
    "f2": CandidateModel(ModelKind.EMAX, [0.0, 0.467, 25.0], SIGMA2, "f2"),
    "f3": CandidateModel(ModelKind.EXPONENTIAL, [-0.08265, 0.08265, 85.0], SIGMA2, "f3"),
    "f4": CandidateModel(ModelKind.QUADRATIC, [0.0, 0.00533, QUADRATIC_VERTEX_AT_TOP], SIGMA2, "f4"),
}

CANDIDATE_SETS = {
    "S1": ("f1", "f2", "f4"),
    "S2": ("f1", "f2", "f3"),
}

# Box for the nonlinear parameter, as multiples of the top dose. Without it
# the log-linear and Emax fits to convex truths drift to their linear limits.
DEFAULT_BOUNDS = {
    ModelKind.EMAX: Bounds(0.001 * SPACE.upper, 1.5 * SPACE.upper),
    ModelKind.EXPONENTIAL: Bounds(0.1 * SPACE.upper, 2.0 * SPACE.upper),
    ModelKind.LOGLINEAR: Bounds(None, 1.5 * SPACE.upper),
}


def candidate_specs(labels, bounds=DEFAULT_BOUNDS):
    """Candidate families of the given reference models, started at their
    reference parameters and boxed by ``bounds``."""
    from .criterion import CandidateSpec

    return [CandidateSpec.from_model(REFERENCE_MODELS[lab], bounds.get(REFERENCE_MODELS[lab].kind)) for lab in labels]

XI1 = ApproximateDesign.uniform([0.0, 10.0, 25.0, 50.0, 100.0, 150.0], SPACE)
XI2 = ApproximateDesign([0.0, 4.051, 150.0], [0.339, 0.5, 0.161], SPACE)
XI_EMAX_LOCAL = ApproximateDesign([0.0, 18.75, 150.0], [0.25, 0.5, 0.25], SPACE)
XI12 = ApproximateDesign([0.0, 13.026, 150.0], [0.281, 0.498, 0.220], SPACE)
XI_S1 = ApproximateDesign([0.0, 18.310, 67.102, 150.0], [0.205, 0.290, 0.281, 0.224], SPACE)
XI_S2 = ApproximateDesign(
    [0.0, 10.025, 77.746, 84.556, 150.0], [0.192, 0.212, 0.198, 0.189, 0.208], SPACE
)

REFERENCE_DESIGNS = {
    "xi1": XI1,
    "xi2": XI2,
    "xi_emax": XI_EMAX_LOCAL,
    "xi12": XI12,
    "xi_S1": XI_S1,
    "xi_S2": XI_S2,
}


def parameter_grid(model: CandidateModel, rel: float = 0.1) -> list[CandidateModel]:
    """The model with each non-intercept parameter at ``(1-rel, 1, 1+rel)``
    times its value (intercept held fixed)."""
    vt = model.vartheta
    levels = [(vt[0],)] + [(v * (1 - rel), v, v * (1 + rel)) for v in vt[1:]]
    out = []
    for combo in itertools.product(*levels):
        out.append(CandidateModel(model.kind, np.array(combo), model.sigma2, model.label))
    return out


def grid_prior(labels, rel: float = 0.1) -> TruthPrior:
    """Uniform over models, uniform over each model's +-rel parameter grid."""
    atoms, probs = [], []
    for lab in labels:
        grid = parameter_grid(REFERENCE_MODELS[lab], rel)
        atoms.extend(grid)
        probs.extend([1.0 / (len(labels) * len(grid))] * len(grid))
    return TruthPrior(tuple(atoms), tuple(probs))
