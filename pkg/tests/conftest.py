import pytest

_GATE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_GATE] = []


@pytest.fixture
def gate(request, capsys):
    """``gate(name, ok, detail)`` prints one verdict line and records it for the summary."""
    lines = request.config.stash[_GATE]

    def record(name, ok, detail=""):
        line = f"{name} {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[_GATE]
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
