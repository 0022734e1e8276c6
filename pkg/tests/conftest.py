import numpy as np
import pytest
import torch


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, name): acceptance criterion reported in the summary")
    config._criteria = {}


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and not rep.skipped and not rep.failed:
        return
    n, name = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "SKIP" if rep.skipped else ("PASS" if rep.passed else "FAIL")
    item.config._criteria.setdefault(n, []).append((name, status, detail))


def pytest_terminal_summary(terminalreporter, config):
    crit = getattr(config, "_criteria", {})
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(crit):
        for name, status, detail in crit[n]:
            line = f"criterion {n} [{status}] {name}"
            terminalreporter.write_line(line + (f" :: {detail}" if detail else ""))
