import pytest

_CRITERIA: dict[str, tuple[bool | None, str]] = {}


class CriterionReport:
    """One pass/fail line per acceptance criterion, repeated in the terminal summary."""

    def _record(self, name: str, passed: bool | None, detail: str) -> None:
        # parametrized criteria report several times; the summary line merges them
        if name in _CRITERIA:
            prev, prev_detail = _CRITERIA[name]
            if prev is not None:
                passed = prev if passed is None else prev and passed
            detail = f"{prev_detail}; {detail}"
        _CRITERIA[name] = (passed, detail)

    def check(self, name: str, passed: bool, detail: str) -> None:
        self._record(name, bool(passed), detail)
        print(f"{name} {'PASS' if passed else 'FAIL'}  {detail}")
        assert passed, f"{name}: {detail}"

    def skip(self, name: str, reason: str) -> None:
        self._record(name, None, reason)
        print(f"{name} SKIP  {reason}")
        pytest.skip(reason)


@pytest.fixture(scope="session")
def report():
    return CriterionReport()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda s: int(s[1:])):
        passed, detail = _CRITERIA[name]
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        terminalreporter.write_line(f"{name} {status}  {detail}")
