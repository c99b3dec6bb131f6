import numpy as np
import pytest
import torch

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: training-based tests (tens of seconds)")
    config.addinivalue_line("markers", "acceptance(number, title): one line of the acceptance summary")
    config.stash[_ACCEPTANCE] = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None and (report.when == "call" or report.failed):
        number, title = marker.args
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        results = item.config.stash[_ACCEPTANCE]
        if report.when == "call" or number not in results:
            results[number] = (title, "PASS" if report.passed else "FAIL", detail)
    return report


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, outcome, detail = results[number]
        line = f"[{outcome}] {number:>2}. {title}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
