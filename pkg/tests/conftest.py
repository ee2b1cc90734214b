import contextlib

_criterion_results: list[tuple[int, str, str]] = []


@contextlib.contextmanager
def criterion(number: int, name: str):
    """Record one acceptance criterion's outcome for the terminal summary."""
    try:
        yield
    except BaseException:
        _criterion_results.append((number, name, "FAIL"))
        raise
    _criterion_results.append((number, name, "PASS"))


def pytest_terminal_summary(terminalreporter):
    if not _criterion_results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, name, outcome in sorted(_criterion_results):
        terminalreporter.write_line(f"criterion {number} ({name}): {outcome}")
