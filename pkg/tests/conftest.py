import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def verdict(request, capsys):
    """Record and print one acceptance line; returns the pass flag so the test can assert it."""

    def emit(number, title, passed, detail, elapsed, budget):
        line = (f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail} "
                f"[{elapsed:.1f}s, budget {budget:.0f}s]")
        request.config.stash[_LINES].append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
