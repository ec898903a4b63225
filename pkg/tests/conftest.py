"""Shared fixtures and the acceptance-criterion reporting hook."""

import numpy as np
import pytest

from tokentrace.data import Dataset, Exercise, Interaction, build_dataset

# criterion number -> (description, passed); filled by tests/test_acceptance.py
_ACCEPTANCE: dict[int, tuple[str, bool]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance criterion outcome for the terminal summary."""

    def record(number: int, description: str, passed: bool) -> None:
        _ACCEPTANCE[number] = (description, bool(passed))

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        description, passed = _ACCEPTANCE[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {description}")


def make_exercise(eid: str, concept: str = "fractions", text: str | None = None) -> Exercise:
    return Exercise(
        exercise_id=eid,
        question_text=text if text is not None else f"What is the value in item {eid}?",
        options=("A) 1", "B) 2", "C) 3", "D) 4"),
        concepts=(concept,),
    )


@pytest.fixture
def toy_dataset() -> Dataset:
    """Two learners, three exercises, fixed outcomes."""
    exercises = [
        make_exercise("E1", "fractions"),
        make_exercise("E2", "decimals"),
        make_exercise("E3", "fractions"),
    ]
    interactions = [
        Interaction("u1", 1, "E1", True),
        Interaction("u1", 2, "E2", False),
        Interaction("u1", 3, "E3", True),
        Interaction("u2", 1, "E2", True),
        Interaction("u2", 2, "E1", False),
    ]
    return build_dataset(exercises, interactions)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)
