import os
import warnings

import numpy as np
import pytest

DATA = os.path.join(os.path.dirname(__file__), "data")

_results = {}
_values = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    key = (n, title)
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        passed = call.excinfo is None
        _results.setdefault(key, []).append(passed)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for (n, title), outcomes in sorted(_results.items()):
        status = "PASS" if all(outcomes) else "FAIL"
        detail = _values.get(n)
        suffix = f"  [{'; '.join(detail)}]" if detail else ""
        terminalreporter.write_line(f"{status} criterion {n:>2}: {title}{suffix}")


@pytest.fixture
def measured(request):
    """Record ``name=value`` strings shown next to the criterion's PASS/FAIL line."""
    marker = request.node.get_closest_marker("criterion")
    n = marker.args[0] if marker else None

    def record(name, value):
        text = f"{name}={value:.4g}" if isinstance(value, float) else f"{name}={value}"
        _values.setdefault(n, []).append(text)
        print(text)

    return record


@pytest.fixture
def data_path():
    return lambda name: os.path.join(DATA, name)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


@pytest.fixture(scope="session")
def mixture_embedding():
    from flowcorr.harness import two_mode_mixture
    return two_mode_mixture(10_000, seed=0)


@pytest.fixture(scope="session")
def mixture_flow(mixture_embedding):
    from flowcorr.flow import train_flow
    from flowcorr.harness import DESK_CONFIG
    return train_flow(mixture_embedding, DESK_CONFIG)
