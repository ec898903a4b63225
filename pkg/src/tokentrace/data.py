"""Core domain model: exercises, interactions, datasets, ingestion.

A dataset is two files: an interaction log (one record per answer event)
and an exercise table (one record per question). Both are line-delimited
JSON by default; CSV is accepted for interoperability. Timesteps are
re-ranked to a dense 1..T per learner at ingestion so that downstream
code can index histories positionally.
"""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import DataFormatError, DataIntegrityError


@dataclass(frozen=True)
class Exercise:
    """A multiple-choice question with its text, options and concept tags."""

    exercise_id: str
    question_text: str
    options: tuple[str, ...]
    concepts: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.options:
            raise DataIntegrityError(f"exercise {self.exercise_id!r} has no options")
        if any(not o for o in self.options):
            raise DataIntegrityError(f"exercise {self.exercise_id!r} has an empty option")


@dataclass(frozen=True)
class Interaction:
    """One (learner, timestep, exercise, outcome) answer event.

    ``timestep`` is 1-based and dense per learner; ``outcome`` is True when
    the learner answered correctly.
    """

    learner_id: str
    timestep: int
    exercise_id: str
    outcome: bool

    def __post_init__(self):
        if self.timestep < 1:
            raise DataIntegrityError(
                f"learner {self.learner_id!r}: timestep must be >= 1, got {self.timestep}"
            )


@dataclass(frozen=True)
class Dataset:
    """An exercise table plus interactions grouped by learner.

    ``interactions`` is sorted by (learner_id, timestep) and every referenced
    exercise_id resolves in ``exercises``.
    """

    exercises: dict[str, Exercise]
    interactions: tuple[Interaction, ...]
    learner_count: int = field(init=False)
    interaction_count: int = field(init=False)

    def __post_init__(self):
        learners = {it.learner_id for it in self.interactions}
        object.__setattr__(self, "learner_count", len(learners))
        object.__setattr__(self, "interaction_count", len(self.interactions))
        for it in self.interactions:
            if it.exercise_id not in self.exercises:
                raise DataIntegrityError(
                    f"interaction ({it.learner_id!r}, t={it.timestep}) references "
                    f"unknown exercise {it.exercise_id!r}"
                )
        self._check_dense_timesteps()

    def _check_dense_timesteps(self):
        by_learner = self.by_learner()
        for learner_id, seq in by_learner.items():
            steps = [it.timestep for it in seq]
            if steps != list(range(1, len(steps) + 1)):
                raise DataIntegrityError(
                    f"learner {learner_id!r}: timesteps {steps} are not dense 1..T"
                )

    def by_learner(self) -> dict[str, tuple[Interaction, ...]]:
        """Interactions grouped per learner, ordered by timestep."""
        grouped: dict[str, list[Interaction]] = {}
        for it in self.interactions:
            grouped.setdefault(it.learner_id, []).append(it)
        return {k: tuple(v) for k, v in grouped.items()}

    def learner_ids(self) -> list[str]:
        """Distinct learner ids in sorted order."""
        return sorted({it.learner_id for it in self.interactions})


@dataclass(frozen=True)
class IngestSummary:
    """Aggregate statistics reported after ingestion."""

    learners: int
    interactions: int
    exercises: int
    concepts: int
    mean_sequence_length: float
    median_sequence_length: float
    correctness_rate: float

    def format(self) -> str:
        return (
            f"{self.interactions} interactions, {self.learners} learners, "
            f"{self.exercises} exercises, {self.concepts} concepts, "
            f"mean length {self.mean_sequence_length:.1f}, "
            f"median {self.median_sequence_length:g}, "
            f"correctness {100 * self.correctness_rate:.1f}%"
        )


def summarize(dataset: Dataset) -> IngestSummary:
    lengths = [len(seq) for seq in dataset.by_learner().values()]
    concepts = {c for ex in dataset.exercises.values() for c in ex.concepts}
    n = len(dataset.interactions)
    correct = sum(1 for it in dataset.interactions if it.outcome)
    return IngestSummary(
        learners=dataset.learner_count,
        interactions=n,
        exercises=len(dataset.exercises),
        concepts=len(concepts),
        mean_sequence_length=n / len(lengths) if lengths else 0.0,
        median_sequence_length=float(statistics.median(lengths)) if lengths else 0.0,
        correctness_rate=correct / n if n else 0.0,
    )


def _parse_outcome(value, line: int) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, int) and value in (0, 1):
        return bool(value)
    if isinstance(value, str) and value.lower() in ("true", "false", "0", "1"):
        return value.lower() in ("true", "1")
    raise DataFormatError(f"outcome {value!r} is not a boolean", line)


def _read_interaction_records(path: Path, fmt: str) -> list[tuple[str, int, str, bool, int]]:
    """Yields (learner_id, timestep, exercise_id, outcome, line_no) tuples."""
    records = []
    if fmt == "jsonl":
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as e:
                    raise DataFormatError(f"invalid JSON: {e.msg}", line_no) from e
                records.append((rec, line_no))
    elif fmt == "csv":
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            for line_no, rec in enumerate(reader, start=2):
                records.append((rec, line_no))
    else:
        raise ValueError(f"unknown format {fmt!r}; expected 'jsonl' or 'csv'")

    parsed = []
    for rec, line_no in records:
        try:
            learner_id = str(rec["learner_id"])
            timestep = int(rec["timestep"])
            exercise_id = str(rec["exercise_id"])
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"missing or malformed field: {e}", line_no) from e
        outcome = _parse_outcome(rec["outcome"] if "outcome" in rec else None, line_no)
        parsed.append((learner_id, timestep, exercise_id, outcome, line_no))
    return parsed


def _read_exercise_records(path: Path, fmt: str) -> dict[str, Exercise]:
    exercises: dict[str, Exercise] = {}
    if fmt == "jsonl":
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as e:
                    raise DataFormatError(f"invalid JSON: {e.msg}", line_no) from e
                try:
                    ex = Exercise(
                        exercise_id=str(rec["exercise_id"]),
                        question_text=str(rec["question_text"]),
                        options=tuple(str(o) for o in rec["options"]),
                        concepts=tuple(str(c) for c in rec.get("concepts", [])),
                    )
                except (KeyError, TypeError) as e:
                    raise DataFormatError(f"missing or malformed field: {e}", line_no) from e
                if ex.exercise_id in exercises:
                    raise DataIntegrityError(f"duplicate exercise_id {ex.exercise_id!r}")
                exercises[ex.exercise_id] = ex
    elif fmt == "csv":
        # options and concepts are pipe-separated in the CSV form
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            for line_no, rec in enumerate(reader, start=2):
                try:
                    ex = Exercise(
                        exercise_id=str(rec["exercise_id"]),
                        question_text=str(rec["question_text"]),
                        options=tuple(o for o in rec["options"].split("|") if o),
                        concepts=tuple(c for c in rec.get("concepts", "").split("|") if c),
                    )
                except KeyError as e:
                    raise DataFormatError(f"missing field: {e}", line_no) from e
                if ex.exercise_id in exercises:
                    raise DataIntegrityError(f"duplicate exercise_id {ex.exercise_id!r}")
                exercises[ex.exercise_id] = ex
    else:
        raise ValueError(f"unknown format {fmt!r}; expected 'jsonl' or 'csv'")
    return exercises


def ingest_dataset(
    interactions_path: str | Path,
    fmt: str = "jsonl",
    exercises_path: str | Path | None = None,
) -> Dataset:
    """Load a dataset from an interaction log plus its exercise table.

    ``exercises_path`` defaults to ``exercises.jsonl`` (or ``.csv``) next to
    the interaction file. Timesteps are re-ranked to dense 1..T per learner,
    preserving the original ordering; duplicate (learner, timestep) pairs and
    dangling exercise references are integrity errors.
    """
    interactions_path = Path(interactions_path)
    if exercises_path is None:
        suffix = ".jsonl" if fmt == "jsonl" else ".csv"
        exercises_path = interactions_path.parent / f"exercises{suffix}"
    exercises_path = Path(exercises_path)
    if not interactions_path.exists():
        raise FileNotFoundError(str(interactions_path))
    if not exercises_path.exists():
        raise FileNotFoundError(str(exercises_path))

    exercises = _read_exercise_records(exercises_path, fmt)
    raw = _read_interaction_records(interactions_path, fmt)

    by_learner: dict[str, list[tuple[int, str, bool, int]]] = {}
    for learner_id, timestep, exercise_id, outcome, line_no in raw:
        by_learner.setdefault(learner_id, []).append((timestep, exercise_id, outcome, line_no))

    interactions: list[Interaction] = []
    for learner_id in sorted(by_learner):
        rows = by_learner[learner_id]
        seen_steps: dict[int, int] = {}
        for timestep, _, _, line_no in rows:
            if timestep in seen_steps:
                raise DataIntegrityError(
                    f"learner {learner_id!r}: duplicate timestep {timestep} "
                    f"(lines {seen_steps[timestep]} and {line_no})"
                )
            seen_steps[timestep] = line_no
        rows.sort(key=lambda r: r[0])
        for rank, (_, exercise_id, outcome, line_no) in enumerate(rows, start=1):
            if exercise_id not in exercises:
                raise DataIntegrityError(
                    f"line {line_no}: unknown exercise_id {exercise_id!r}"
                )
            interactions.append(Interaction(learner_id, rank, exercise_id, outcome))

    return Dataset(exercises=exercises, interactions=tuple(interactions))


def write_dataset(dataset: Dataset, directory: str | Path) -> tuple[Path, Path]:
    """Write ``dataset.jsonl`` and ``exercises.jsonl`` into ``directory``.

    Output is canonical: interactions sorted by (learner, timestep),
    exercises sorted by id, keys in fixed order. Re-ingesting the emitted
    files reproduces the dataset exactly.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    interactions_path = directory / "dataset.jsonl"
    exercises_path = directory / "exercises.jsonl"
    with open(interactions_path, "w", encoding="utf-8") as f:
        for it in dataset.interactions:
            f.write(
                json.dumps(
                    {
                        "learner_id": it.learner_id,
                        "timestep": it.timestep,
                        "exercise_id": it.exercise_id,
                        "outcome": it.outcome,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    with open(exercises_path, "w", encoding="utf-8") as f:
        for exercise_id in sorted(dataset.exercises):
            ex = dataset.exercises[exercise_id]
            f.write(
                json.dumps(
                    {
                        "exercise_id": ex.exercise_id,
                        "question_text": ex.question_text,
                        "options": list(ex.options),
                        "concepts": list(ex.concepts),
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    return interactions_path, exercises_path


def build_dataset(
    exercises: Iterable[Exercise], interactions: Iterable[Interaction]
) -> Dataset:
    """Assemble a Dataset from parts, validating all invariants."""
    ex_map: dict[str, Exercise] = {}
    for ex in exercises:
        if ex.exercise_id in ex_map:
            raise DataIntegrityError(f"duplicate exercise_id {ex.exercise_id!r}")
        ex_map[ex.exercise_id] = ex
    ordered = sorted(interactions, key=lambda it: (it.learner_id, it.timestep))
    return Dataset(exercises=ex_map, interactions=tuple(ordered))
