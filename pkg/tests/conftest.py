from contextlib import contextmanager

import numpy as np
import pytest

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(pytestconfig):
    """Context manager recording the outcome of one numbered acceptance criterion."""
    results = pytestconfig.stash[ACCEPTANCE]

    @contextmanager
    def record(number, title):
        info = {"detail": ""}
        try:
            yield info
        except BaseException:
            results[number] = (False, title, info["detail"])
            raise
        results[number] = (True, title, info["detail"])

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[ACCEPTANCE]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, title, detail = results[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}  {detail}".rstrip())
