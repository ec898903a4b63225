"""Train/test split construction: learner hold-out and question cold start.

Splits are pure functions of (dataset contents, parameters, seed) and are
serialized verbatim to ``split.json`` so an experiment can be replayed
exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, Interaction
from .errors import DataIntegrityError

HOLDOUT_BY_LEARNER = "holdout_by_learner"
USER_COLDSTART = "user_coldstart"
QUESTION_COLDSTART = "question_coldstart"

_KINDS = (HOLDOUT_BY_LEARNER, USER_COLDSTART, QUESTION_COLDSTART)


@dataclass(frozen=True)
class SplitSpec:
    """A reproducible partition of learners, optionally with held-out exercises."""

    kind: str
    train_learners: tuple[str, ...]
    test_learners: tuple[str, ...]
    held_out_exercises: tuple[str, ...]
    seed: int

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown split kind {self.kind!r}")
        overlap = set(self.train_learners) & set(self.test_learners)
        if overlap:
            raise DataIntegrityError(
                f"train/test learner sets overlap: {sorted(overlap)[:5]}"
            )
        if self.kind != QUESTION_COLDSTART and self.held_out_exercises:
            raise ValueError(f"held_out_exercises only valid for {QUESTION_COLDSTART}")


def _partition_learners(
    learner_ids: list[str], train_fraction: float, seed: int
) -> tuple[tuple[str, ...], tuple[str, ...]]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    ids = sorted(learner_ids)
    if len(ids) < 2:
        raise ValueError(f"need at least 2 learners to split, got {len(ids)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n_train = round(train_fraction * len(ids))
    if n_train == 0 or n_train == len(ids):
        raise ValueError(
            f"train_fraction {train_fraction} leaves an empty side for {len(ids)} learners"
        )
    shuffled = [ids[i] for i in order]
    return tuple(sorted(shuffled[:n_train])), tuple(sorted(shuffled[n_train:]))


def split_holdout(dataset: Dataset, train_fraction: float, seed: int) -> SplitSpec:
    """Partition learners by a seeded uniform shuffle.

    |train| = round(train_fraction * L); the result depends only on the
    learner-id set, the fraction and the seed.
    """
    train, test = _partition_learners(dataset.learner_ids(), train_fraction, seed)
    return SplitSpec(
        kind=HOLDOUT_BY_LEARNER,
        train_learners=train,
        test_learners=test,
        held_out_exercises=(),
        seed=seed,
    )


def split_question_coldstart(
    dataset: Dataset, k: int, seed: int, train_fraction: float = 0.9
) -> SplitSpec:
    """Hold out k exercises spanning the empirical difficulty range.

    Exercises are ranked by correctness rate, cut into k quantile bins, and
    one exercise is drawn per bin, preferring concepts not already picked.
    Learners are partitioned as in ``split_holdout``; interactions that
    reference a held-out exercise are excluded from the training stream by
    ``training_interactions``.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    # only exercises that actually occur can contribute evaluation targets
    counts: dict[str, list[int]] = {}
    for it in dataset.interactions:
        c = counts.setdefault(it.exercise_id, [0, 0])
        c[0] += 1
        c[1] += int(it.outcome)
    if k >= len(dataset.exercises):
        raise ValueError(
            f"k={k} must be smaller than the exercise count {len(dataset.exercises)}"
        )
    if k >= len(counts):
        raise ValueError(
            f"k={k} must be smaller than the number of exercises with interactions ({len(counts)})"
        )

    rated = sorted(
        ((counts[eid][1] / counts[eid][0], eid) for eid in counts),
        key=lambda pair: (pair[0], pair[1]),
    )
    rng = np.random.default_rng(seed)
    bins = np.array_split(np.arange(len(rated)), k)
    held_out: list[str] = []
    used_concepts: set[str] = set()
    for indices in bins:
        if len(indices) == 0:
            continue
        candidates = [rated[i][1] for i in indices]
        fresh = [
            eid
            for eid in candidates
            if not (set(dataset.exercises[eid].concepts) & used_concepts)
        ]
        pool = fresh if fresh else candidates
        choice = pool[int(rng.integers(len(pool)))]
        held_out.append(choice)
        used_concepts.update(dataset.exercises[choice].concepts)

    train, test = _partition_learners(dataset.learner_ids(), train_fraction, seed)
    return SplitSpec(
        kind=QUESTION_COLDSTART,
        train_learners=train,
        test_learners=test,
        held_out_exercises=tuple(sorted(held_out)),
        seed=seed,
    )


def training_interactions(dataset: Dataset, split: SplitSpec) -> tuple[Interaction, ...]:
    """The training stream: train learners' interactions, re-ranked dense.

    For question cold start, interactions on held-out exercises are removed
    before re-ranking, so the stream never references a held-out id.
    """
    train_set = set(split.train_learners)
    held_out = set(split.held_out_exercises)
    out: list[Interaction] = []
    for learner_id, seq in dataset.by_learner().items():
        if learner_id not in train_set:
            continue
        kept = [it for it in seq if it.exercise_id not in held_out]
        for rank, it in enumerate(kept, start=1):
            out.append(Interaction(learner_id, rank, it.exercise_id, it.outcome))
    out.sort(key=lambda it: (it.learner_id, it.timestep))
    return tuple(out)


def test_interactions(dataset: Dataset, split: SplitSpec) -> tuple[Interaction, ...]:
    """Test learners' full interaction sequences (held-out exercises included)."""
    test_set = set(split.test_learners)
    return tuple(it for it in dataset.interactions if it.learner_id in test_set)


def save_split(split: SplitSpec, path: str | Path) -> None:
    payload = {
        "kind": split.kind,
        "train_learners": list(split.train_learners),
        "test_learners": list(split.test_learners),
        "held_out_exercises": list(split.held_out_exercises),
        "seed": split.seed,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def load_split(path: str | Path) -> SplitSpec:
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    return SplitSpec(
        kind=payload["kind"],
        train_learners=tuple(payload["train_learners"]),
        test_learners=tuple(payload["test_learners"]),
        held_out_exercises=tuple(payload["held_out_exercises"]),
        seed=int(payload["seed"]),
    )
