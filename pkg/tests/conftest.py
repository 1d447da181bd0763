import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vp2p.denoiser import ModelDims, init_toy_t2s
from vp2p.schedule import build_schedule

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_sched():
    return build_schedule(10, 1e-3, 0.2)


@pytest.fixture(scope="session")
def small_model(small_sched):
    """Randomly initialized model on a short schedule; cheap enough for loops."""
    return init_toy_t2s(3, ModelDims(), small_sched)


@pytest.fixture
def small_video(rng):
    return rng.standard_normal((3, 4, 6, 6))


# -- acceptance criteria summary -------------------------------------------------

_CRITERIA: dict[str, list[bool]] = {}
_DETAILS: dict[str, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion a test verifies")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        # an expected failure still counts as a failing criterion
        ok = report.outcome == "passed" and not hasattr(report, "wasxfail")
        _CRITERIA.setdefault(name, []).append(ok)
        _DETAILS.setdefault(name, []).extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda s: (int("".join(c for c in s if c.isdigit())), s)):
        verdict = "PASS" if all(_CRITERIA[name]) else "FAIL"
        detail = "; ".join(_DETAILS.get(name, []))
        terminalreporter.write_line(f"criterion {name:<4} {verdict}  {detail}".rstrip())
