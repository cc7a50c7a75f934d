import pytest


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def verdict(request):
    """``verdict(n, ok, detail)`` prints one PASS/FAIL line for acceptance criterion ``n``."""
    def record(n, ok, detail):
        line = f"[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {detail}"
        request.config._acceptance_lines.append(line)
        tr = request.config.pluginmanager.get_plugin("terminalreporter")
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
