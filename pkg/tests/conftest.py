import contextlib
import time

import pytest

_RESULTS: dict[int, tuple[str, str, str]] = {}


class _Record:
    detail = ""


@pytest.fixture
def acceptance():
    """Context manager recording one pass/fail line for a numbered criterion."""

    @contextlib.contextmanager
    def criterion(number: int, title: str):
        rec = _Record()
        start = time.perf_counter()
        try:
            yield rec
        except BaseException as exc:
            line = f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
            _RESULTS[number] = ("FAIL", title, f"{rec.detail} {line}".strip())
            print(f"ACCEPTANCE {number} FAIL  {title}: {_RESULTS[number][2]}")
            raise
        took = time.perf_counter() - start
        _RESULTS[number] = ("PASS", title, f"{rec.detail} ({took:.1f}s)".strip())
        print(f"ACCEPTANCE {number} PASS  {title}: {_RESULTS[number][2]}")

    return criterion


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        status, title, detail = _RESULTS[number]
        terminalreporter.write_line(f"[{status}] {number}. {title}: {detail}")
