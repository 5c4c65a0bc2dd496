import contextlib

import pytest

_verdicts = pytest.StashKey[list]()


class _Outcome:
    detail = ""


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance criterion as PASS or FAIL."""
    verdicts = request.config.stash.setdefault(_verdicts, [])

    @contextlib.contextmanager
    def check(number, title):
        outcome = _Outcome()
        try:
            yield outcome
        except BaseException as exc:
            line = f"criterion {number:>2} FAIL  {title}: {outcome.detail or exc}".rstrip()
            verdicts.append(line)
            print(line)
            raise
        line = f"criterion {number:>2} PASS  {title}: {outcome.detail}".rstrip()
        verdicts.append(line)
        print(line)

    return check


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash.get(_verdicts, [])
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for line in sorted(verdicts, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
