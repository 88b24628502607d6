import numpy as np
import pytest

from dualhash.dataset import MISSING, Sample, SynthConfig, generate_synthetic
from dualhash.model import DphModel, ModelConfig

_criteria = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for key, value in report.user_properties:
        if key == "criterion":
            _criteria.append((value, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for label, outcome in sorted(_criteria, key=lambda c: int(c[0].split(".")[0])):
        mark = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{mark}] {label}")


def random_model(rng, d=6, hidden=(5,), k=7, C=3, m=2, scale=1.0):
    cfg = ModelConfig(d, hidden, k, C, m)
    params = {name: scale * rng.standard_normal(shape) for name, shape in cfg.param_shapes()}
    return DphModel(cfg, params)


def random_batch(rng, n, d, C, m, p_missing_cat=0.3, p_missing_attr=0.3, start_id=0):
    samples = []
    for i in range(n):
        cat = None if rng.random() < p_missing_cat else int(rng.integers(1, C + 1))
        attrs = rng.integers(0, 2, size=m)
        attrs[rng.random(m) < p_missing_attr] = MISSING
        if cat is None and np.all(attrs == MISSING):
            attrs[0] = int(rng.integers(0, 2))
        samples.append(Sample(start_id + i, rng.standard_normal(d), cat, attrs))
    return samples


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(SynthConfig(4, 8, 3, 50, 1.0, 0.0, (0.25, 0.25, 0.25, 0.25), 7))
