import pytest

_LINES: dict[int, str] = {}


class CriterionLog:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def check(self, ok: bool, text: str) -> None:
        self.note(text)
        _LINES[self.number] = self.line(ok)
        assert ok, self.line(ok)

    def line(self, ok: bool) -> str:
        status = "PASS" if ok else "FAIL"
        return f"criterion {self.number:>2} {status}  {self.title}: " + "; ".join(self.details)


@pytest.fixture
def criterion(request):
    """Record an acceptance criterion's outcome for the end-of-run summary."""
    logs: list[CriterionLog] = []

    def make(number: int, title: str) -> CriterionLog:
        log = CriterionLog(number, title)
        logs.append(log)
        return log

    yield make
    failed = request.node.rep_call.failed if hasattr(request.node, "rep_call") else True
    for log in logs:
        if log.number not in _LINES or failed:
            _LINES[log.number] = log.line(False)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        terminalreporter.write_line(_LINES[n])
