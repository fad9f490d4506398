import contextlib

ACCEPTANCE_RESULTS: dict[int, tuple[str, bool, str]] = {}


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record whether the enclosed acceptance check passed, then re-raise."""
    detail = {"text": ""}
    try:
        yield detail
    except BaseException:
        ACCEPTANCE_RESULTS[number] = (title, False, detail["text"])
        raise
    ACCEPTANCE_RESULTS[number] = (title, True, detail["text"])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        title, ok, text = ACCEPTANCE_RESULTS[number]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{text}]" if text else ""))
