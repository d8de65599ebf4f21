import pytest

_LINES_KEY = pytest.StashKey[list]()


@pytest.fixture
def record(request):
    """Collect one ``criterion N: PASS|FAIL`` line; shown in the terminal summary."""
    lines = request.config.stash.setdefault(_LINES_KEY, [])

    def _record(number, name, ok, detail=""):
        line = f"criterion {number:>2} {name}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        lines.append(line)
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
