import pytest

from sdeerr import get_backend

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(key): acceptance criterion this test decides")
    config.addinivalue_line("markers", "slow: long Monte Carlo run")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    key = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        ok = report.outcome == "passed"
        _ACCEPTANCE[key] = _ACCEPTANCE.get(key, True) and ok


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k[2:])):
        terminalreporter.write_line(f"{key}: {'PASS' if _ACCEPTANCE[key] else 'FAIL'}")


@pytest.fixture(params=["python", "compiled"])
def backend(request):
    try:
        return get_backend(request.param)
    except RuntimeError:
        pytest.skip("compiled kernels not built")
