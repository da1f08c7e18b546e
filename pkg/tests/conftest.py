import pytest
from hypothesis import settings

from slacksched.taskmodel import TaskSpec

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

# filled by tests/test_acceptance.py, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def smoke_tasks():
    """Three periodic tasks at U = 3/8 + 2/5 + 2/6 ~ 1.108 (overloaded uniprocessor)."""
    return [TaskSpec(1, 8, 3, 8), TaskSpec(2, 5, 2, 5), TaskSpec(3, 6, 2, 6)]


@pytest.fixture
def tasks3():
    return smoke_tasks()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
