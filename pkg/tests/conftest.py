import sys

import numpy as np
import pytest

from clusteritr.data import ClusterDataset


def random_dataset(rng, n=20, sizes=(1, 2, 3, 4, 5, 6), p=2, e_range=(0.2, 0.8), y_scale=1.0):
    """Clusters with random sizes, outcomes, treatments and known propensities."""
    m = rng.choice(np.asarray(sizes), size=n)
    n_units = int(m.sum())
    e1 = rng.uniform(*e_range, size=n_units)
    a = (rng.random(n_units) < e1).astype(np.int8)
    return ClusterDataset(
        y=y_scale * rng.normal(size=n_units),
        a=a,
        x=rng.normal(size=(n_units, p)),
        sizes=m,
        propensity=e1,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
