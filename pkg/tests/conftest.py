import re

import pytest

_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record the outcome line for one acceptance criterion."""
    def record(number, ok, detail):
        _ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[number])
        return ok
    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = re.match(r"test_criterion_(\d+)_", item.name)
    # a criterion that crashed before recording still gets its line
    if m and rep.when == "call" and rep.failed and int(m.group(1)) not in _ACCEPTANCE:
        msg = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
        _ACCEPTANCE[int(m.group(1))] = f"criterion {m.group(1)}: FAIL  {msg}"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
