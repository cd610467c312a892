import pytest

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    failed = rep.failed or (rep.when == "setup" and rep.outcome != "passed")
    if rep.when == "call" or failed:
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        prev = _criteria.get(n)
        ok = (not failed) and (prev is None or prev[1])
        _criteria[n] = (title, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, ok, detail = _criteria[n]
        line = f"{'PASS' if ok else 'FAIL'}  criterion {n:>2}: {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
