from pathlib import Path

import numpy as np
import pytest

from boostvi.density import AtomFamilyConfig, MixtureDensity, SupportBox, TruncatedGaussianAtom


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def unit_box():
    return SupportBox.cube(-1.0, 1.0, 1)


@pytest.fixture
def bench_family():
    """The one-dimensional benchmark family used throughout the solver tests."""
    return AtomFamilyConfig(SupportBox.cube(-5.0, 5.0, 1), 0.5, 2.0, 1e-4)


def random_atom(rng, box, sigma_range=(0.3, 1.5)):
    mean = rng.uniform(box.lower, box.upper)
    return TruncatedGaussianAtom(mean, float(rng.uniform(*sigma_range)), box)


def random_mixture(rng, box, k=3, sigma_range=(0.3, 1.5)):
    atoms = [random_atom(rng, box, sigma_range) for _ in range(k)]
    return MixtureDensity(atoms, rng.dirichlet(np.ones(k)))


@pytest.fixture(scope="session")
def repo_root():
    return Path(__file__).resolve().parent.parent


# Verdict lines from the acceptance suite, repeated at the end of the session.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
