import numpy as np
import pytest

from viewseg.dataset import MriSlice, PhantomSpec, TumorType, ViewLabel, generate_phantom

_criteria: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


def pytest_runtest_logreport(report):
    marker = getattr(report, "_criterion", None)
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _criteria.append((marker, status, report.nodeid))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep._criterion = m.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, _ in _criteria:
        terminalreporter.write_line(f"{status}  {name}")


@pytest.fixture(scope="session")
def small_phantom():
    return generate_phantom(PhantomSpec(n=30, size=64, seed=42))


def make_slice(slice_id="1", view=ViewLabel.AXIAL, size=4, patient="P0", tumor_type=TumorType.GLIOMA, rng=None):
    rng = rng or np.random.default_rng(0)
    image = rng.random((size, size)).astype(np.float32)
    mask = (rng.random((size, size)) < 0.3).astype(np.uint8)
    return MriSlice(slice_id, patient, view, tumor_type, image, mask)


@pytest.fixture
def slice_factory():
    return make_slice
