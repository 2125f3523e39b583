import time

import numpy as np
import pytest

from fss.data import builtin_templates, generate_synthetic, normalize_dataset

# acceptance lines collected during the run, echoed in the terminal summary
ACCEPTANCE = []


def record_criterion(number, title, passed, detail=""):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title}" + (f" -- {detail}" if detail else "")
    ACCEPTANCE.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def easy_small():
    """Normalized easy-bank data, 30 windows per class."""
    return normalize_dataset(generate_synthetic(builtin_templates("easy"), 30, 0.05, seed=3))


class DefaultRun:
    """One default-config training run at a given noise level, with its test report."""

    def __init__(self, sigma, seed=0):
        from fss.tensor import RngStream
        from fss.train import TrainConfig, evaluate, prepare_pools, train_model

        t0 = time.perf_counter()
        ds = generate_synthetic(builtin_templates("easy"), 300, sigma, seed=seed)
        self.pools = prepare_pools(ds, 1.0, seed)
        self.cfg = TrainConfig(seed=seed)
        self.model, self.history = train_model(self.pools, self.cfg)
        self.report = evaluate(self.model, self.pools.test, 1000, RngStream(seed).spawn(100))
        self.seconds = time.perf_counter() - t0


_RUNS = {}


def default_run(sigma):
    if sigma not in _RUNS:
        _RUNS[sigma] = DefaultRun(sigma)
    return _RUNS[sigma]


@pytest.fixture(scope="session")
def trained_easy():
    return default_run(0.05)
