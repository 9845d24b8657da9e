import numpy as np
import pytest

from mdmt.data import Batch, FeatureSpace, Field, SyntheticSpec, generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_space():
    return FeatureSpace((Field("user", 7), Field("item", 5)), domain_count=3, task_count=2)


def make_batch(space, domain, n, rng):
    feats = np.stack([rng.integers(0, f.vocab_size, n) for f in space.fields], axis=1)
    labels = rng.integers(0, 2, size=(n, space.task_count))
    return Batch(domain, feats, labels, np.arange(n))


@pytest.fixture
def tiny_synth():
    spec = SyntheticSpec(domain_counts=(120, 300, 80), vocab_sizes=(40, 30), seed=3)
    return generate_synthetic(spec)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines):
        terminalreporter.write_line(lines[key])
