import os
import re

# single-threaded BLAS keeps float reductions reproducible and the suite fast on one core
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from promptxfer.imaging import generate_dataset
from promptxfer.models import DualEncoder, SurrogateModel, get_arch
from promptxfer.tasks import COUNTING, PRESENCE, RECOGNITION

_CRITERIA: dict[str, list[tuple[str, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    label = mark.args[0]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _CRITERIA.setdefault(label, []).append((item.name, status))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    def order(label):
        m = re.match(r"(\d+)(.*)", label)
        return (int(m.group(1)), m.group(2)) if m else (10**9, label)

    for label in sorted(_CRITERIA, key=order):
        results = _CRITERIA[label]
        status = "FAIL" if any(s == "FAIL" for _, s in results) else (
            "SKIP" if all(s == "SKIP" for _, s in results) else "PASS")
        failed = [n for n, s in results if s == "FAIL"]
        tail = f"  (failed: {', '.join(failed)})" if failed else ""
        terminalreporter.write_line(f"criterion {label}: {status}{tail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy_models():
    """Two small untrained surrogates with different architectures, frozen."""
    return [SurrogateModel.initialize(get_arch("mix16"), 0).freeze(),
            SurrogateModel.initialize(get_arch("attn16"), 1).freeze()]


@pytest.fixture(scope="session")
def toy_dual():
    return DualEncoder.initialize(0).freeze()


@pytest.fixture(scope="session")
def shapes_small():
    return generate_dataset(RECOGNITION, 24, 7, "train")


@pytest.fixture(scope="session")
def counting_small():
    return generate_dataset(COUNTING, 20, 7, "train")


@pytest.fixture(scope="session")
def presence_small():
    return generate_dataset(PRESENCE, 20, 7, "test")
