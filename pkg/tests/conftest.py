import numpy as np
import pytest

from glmae.volume_store import synth_volume

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def small_labeled():
    """Four 32^3 synthetic labeled volumes (3 classes)."""
    return [synth_volume((32, 32, 32), 3, np.random.default_rng([11, i])) for i in range(4)]


@pytest.fixture(scope="session")
def small_volumes(small_labeled):
    return [lv.volume for lv in small_labeled]
