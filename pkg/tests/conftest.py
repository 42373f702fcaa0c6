import pytest

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


class Criterion:
    """Records one acceptance criterion's outcome for the terminal summary."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.details)
        if exc is not None and not detail:
            detail = f"{exc_type.__name__}: {exc}".splitlines()[0]
        ACCEPTANCE[self.number] = (status, self.title, detail)
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{status}] {n:2d}. {title}" + (f" ({detail})" if detail else ""))
