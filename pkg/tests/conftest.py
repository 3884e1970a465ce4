from __future__ import annotations

import pytest

from mavdesign.core import AveragingWeights, TruthPrior
from mavdesign.criterion import CriterionContext
from mavdesign.scenarios import CANDIDATE_SETS, REFERENCE_MODELS, TARGET, candidate_specs, grid_prior


def two_model_context(n: int = 100) -> CriterionContext:
    """Log-linear and Emax reference models as both the prior and the candidates."""
    labels = ("f1", "f2")
    prior = TruthPrior.uniform([REFERENCE_MODELS[lab] for lab in labels])
    return CriterionContext(prior, candidate_specs(labels), AveragingWeights.uniform(2), TARGET, n)


def grid_context(name: str, n: int = 100) -> CriterionContext:
    labels = CANDIDATE_SETS[name]
    return CriterionContext(
        grid_prior(labels), candidate_specs(labels), AveragingWeights.uniform(len(labels)), TARGET, n
    )


@pytest.fixture
def ctx12():
    return two_model_context()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
