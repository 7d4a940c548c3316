import pytest

CRITERIA = pytest.StashKey[dict]()
TABLE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[CRITERIA] = {}
    config.stash[TABLE] = []


@pytest.fixture
def criterion(request):
    """Call with (number, passed, detail) to report an acceptance line."""
    def record(number: int, passed: bool, detail: str):
        request.config.stash[CRITERIA][number] = (passed, detail)
    return record


@pytest.fixture
def table_lines(request):
    return request.config.stash[TABLE]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[CRITERIA]
    if not results:
        return
    tr = terminalreporter
    if config.stash[TABLE]:
        tr.section("desk-scale results")
        for line in config.stash[TABLE]:
            tr.write_line(line)
    tr.section("acceptance criteria")
    for n in range(1, 8):
        if n in results:
            passed, detail = results[n]
            tr.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
        else:
            tr.write_line(f"criterion {n}: FAIL  (not evaluated)")
