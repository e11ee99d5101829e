from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from mlcollapse.label_space import balanced, multiplicity_one_imbalance
from mlcollapse.ufm import UfmConfig, optimize

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

# shared desk-scale scenarios used by the structural and acceptance tests
SCENARIO_CONFIG = UfmConfig(d=5, lambda_w=5e-3, lambda_h=5e-3, replicas=3, restarts=10, grad_tol=1e-10, seed=7)


# (criterion, passed, detail) lines filled in by test_acceptance.py
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def expand(dist):
    """One ``(m, S)`` entry per training sample: the brute-force view of a count table."""
    return [(m, S) for (m, S), r in dist.counts.items() for _ in range(r)]


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def balanced_dist():
    return balanced(5, 40, 10)


@pytest.fixture(scope="session")
def imbalanced_dist():
    return multiplicity_one_imbalance(5, 40, 10, 0.2, [3, 4])


@pytest.fixture(scope="session")
def balanced_run(balanced_dist):
    return optimize(SCENARIO_CONFIG, balanced_dist)


@pytest.fixture(scope="session")
def imbalanced_run(imbalanced_dist):
    return optimize(SCENARIO_CONFIG, imbalanced_dist)
