import numpy as np
import pytest

from dnfnorm.data import VectorSet
from dnfnorm.flow import FlowStack


def random_stack(rng, dim, n_blocks, hidden_sizes=None, scale=0.3):
    """Flow with every (unmasked) parameter drawn from N(0, scale^2)."""
    stack = FlowStack.create(dim, n_blocks, hidden_sizes, rng=rng)
    stack.set_flat(rng.normal(0.0, scale, size=stack.num_params()))
    return stack


def gaussian_classes(rng, n_classes, n_per_class, dim, spread=3.0, cov=None):
    labels = np.repeat(np.arange(n_classes), n_per_class)
    means = rng.normal(0.0, spread, size=(n_classes, dim))
    noise = rng.normal(size=(len(labels), dim))
    if cov is not None:
        noise = noise @ np.linalg.cholesky(cov).T
    V = means[labels] + noise
    ids = [f"s{i:05d}" for i in range(len(labels))]
    return VectorSet(ids, labels, V)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> PASS/FAIL line, filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
