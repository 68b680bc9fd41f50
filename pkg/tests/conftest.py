import pytest


def pytest_configure(config):
    config._acceptance_rows = []


@pytest.fixture
def verdict(request):
    """Record a one-line pass/fail result for an acceptance criterion."""

    def emit(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config._acceptance_rows.append((number, line))
        tr = request.config.pluginmanager.get_plugin("terminalreporter")
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, config):
    rows = sorted(getattr(config, "_acceptance_rows", []))
    if rows:
        terminalreporter.section("acceptance criteria")
        for _, line in rows:
            terminalreporter.write_line(line)
