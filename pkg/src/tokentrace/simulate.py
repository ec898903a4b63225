"""Synthetic learners, exercises, and interaction logs with known ground truth.

The student model is a Rasch-style logistic with an additive practice term:
p* = sigmoid(theta_l + gamma * prior_concept_exposures - b_q + intercept).
Question text is generated from arithmetic word-problem templates whose
phrasing and operand magnitudes are deterministic functions of (concept,
difficulty bucket), so the text alone reveals difficulty while exercise ids
carry no transferable signal.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import Dataset, Exercise, Interaction, build_dataset
from .errors import DataIntegrityError, NumericError
from .evaluate import auc_score

_BUCKETS = 6
_BUCKET_PREFIX = (
    "Warm-up:",
    "Practice:",
    "Exercise:",
    "Tricky task:",
    "Hard problem:",
    "Challenge:",
)
_BUCKET_OPERANDS = ((2, 9), (10, 29), (30, 99), (100, 299), (300, 899), (900, 2999))


@dataclass(frozen=True)
class SimConfig:
    n_learners: int
    n_exercises: int
    n_concepts: int
    sequence_length_range: tuple[int, int]
    ability_sd: float
    difficulty_range: tuple[float, float]
    learning_gain: float
    global_intercept: float
    seed: int

    def __post_init__(self):
        for name in ("n_learners", "n_exercises", "n_concepts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        lo, hi = self.sequence_length_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad sequence_length_range {self.sequence_length_range}")
        if hi > self.n_exercises:
            raise ValueError(
                f"max sequence length {hi} exceeds n_exercises "
                f"{self.n_exercises}: exercises are sampled without replacement"
            )
        dlo, dhi = self.difficulty_range
        if not dlo <= dhi:
            raise ValueError(f"bad difficulty_range {self.difficulty_range}")
        if self.ability_sd < 0:
            raise ValueError("ability_sd must be >= 0")


@dataclass(frozen=True)
class GroundTruth:
    """True probabilities and the latent parameters that produced them."""

    p_star: dict[tuple[str, int], float]
    theta: dict[str, float]
    difficulty: dict[str, float]
    concept: dict[str, str]


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


_ARCHETYPES = (
    "addition",
    "subtraction",
    "multiplication",
    "division",
    "fractions",
    "percentages",
    "negatives",
    "rounding",
)


def concept_names(n_concepts: int) -> list[str]:
    names = []
    for i in range(n_concepts):
        base = _ARCHETYPES[i % len(_ARCHETYPES)]
        cycle = i // len(_ARCHETYPES)
        names.append(base if cycle == 0 else f"{base}-{cycle + 1}")
    return names


def _stable_seed(*parts) -> int:
    digest = hashlib.blake2b(repr(parts).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _int(rng: np.random.Generator, lo: int, hi: int) -> int:
    return int(rng.integers(lo, hi + 1))


def _stem(base: str, rng: np.random.Generator, lo: int, hi: int) -> tuple[str, int]:
    """One-sentence word problem and its integer answer."""
    if base == "addition":
        x, y = _int(rng, lo, hi), _int(rng, lo, hi)
        return (
            f"Sam has {x} apples and buys {y} more. "
            "How many apples does Sam have now?",
            x + y,
        )
    if base == "subtraction":
        a, b = _int(rng, lo, hi), _int(rng, lo, hi)
        x, y = max(a, b), min(a, b)
        return f"A box holds {x} pens and {y} are taken away. How many pens remain?", x - y
    if base == "multiplication":
        x, y = _int(rng, lo, hi), _int(rng, 2, 9)
        return f"Each crate stores {x} jars. How many jars are in {y} crates?", x * y
    if base == "division":
        y = _int(rng, 2, 9)
        q = _int(rng, max(2, lo // 4), max(3, hi // 4))
        return (
            f"Share {y * q} sweets equally among {y} friends. "
            "How many does each friend get?",
            q,
        )
    if base == "fractions":
        y = _int(rng, 2, 9)
        x = _int(rng, 1, y - 1)
        m = _int(rng, max(2, lo), hi)
        return f"What is {x}/{y} of {y * m} marbles?", x * m
    if base == "percentages":
        x = int(rng.choice([10, 25, 50]))
        k = _int(rng, max(1, lo // 20), max(2, hi // 20))
        return f"What is {x} percent of {20 * k}?", x * 20 * k // 100
    if base == "negatives":
        x = _int(rng, 0, max(1, hi // 3))
        y = _int(rng, lo, hi)
        return (
            f"The temperature was {x} degrees and fell by {y} degrees. "
            "What is it now?",
            x - y,
        )
    if base == "rounding":
        x = _int(rng, lo, hi)
        if x % 10 == 0:
            x += 3
        return f"Round {x} to the nearest ten.", ((x + 5) // 10) * 10
    raise ValueError(f"unknown archetype {base!r}")


def _render_question(
    concept: str, difficulty: float, difficulty_range: tuple[float, float]
) -> tuple[str, tuple[str, ...]]:
    lo, hi = difficulty_range
    span = hi - lo
    bucket = 0 if span == 0 else min(_BUCKETS - 1, int((difficulty - lo) / span * _BUCKETS))
    base = concept.split("-")[0]
    rng = np.random.default_rng(_stable_seed(concept, float(difficulty)))
    op_lo, op_hi = _BUCKET_OPERANDS[bucket]
    stem, answer = _stem(base, rng, op_lo, op_hi)
    text = f"{_BUCKET_PREFIX[bucket]} {stem}"
    if bucket >= 4:
        text += " Show the exact value."
    options = [answer]
    for delta in (1, -1, 2, -2, 10, -10, 5, 3, 7, 20):
        if len(options) == 4:
            break
        cand = answer + delta
        if cand not in options:
            options.append(cand)
    order = rng.permutation(len(options))
    return text, tuple(str(options[i]) for i in order)


def _id_width(n: int) -> int:
    return max(4, len(str(n - 1)))


def simulate(config: SimConfig) -> tuple[Dataset, GroundTruth]:
    """Deterministic synthetic dataset plus its generating parameters.

    Per-learner streams come from spawned child seeds, so generation order
    is canonical and the output is a pure function of the config.
    """
    ss = np.random.SeedSequence(config.seed)
    children = ss.spawn(config.n_learners + 1)
    rng_global = np.random.default_rng(children[0])

    qw = _id_width(config.n_exercises)
    lw = _id_width(config.n_learners)
    names = concept_names(config.n_concepts)
    dlo, dhi = config.difficulty_range
    difficulties = rng_global.uniform(dlo, dhi, size=config.n_exercises)
    abilities = rng_global.normal(0.0, config.ability_sd, size=config.n_learners)

    exercises = []
    concept_of = {}
    difficulty_of = {}
    for i in range(config.n_exercises):
        eid = f"q{i:0{qw}d}"
        concept = names[i % config.n_concepts]
        b = float(difficulties[i])
        text, options = _render_question(concept, b, config.difficulty_range)
        exercises.append(
            Exercise(
                exercise_id=eid,
                question_text=text,
                options=options,
                concepts=(concept,),
            )
        )
        concept_of[eid] = concept
        difficulty_of[eid] = b

    interactions = []
    p_star: dict[tuple[str, int], float] = {}
    theta: dict[str, float] = {}
    slo, shi = config.sequence_length_range
    for li in range(config.n_learners):
        learner_id = f"l{li:0{lw}d}"
        ability = float(abilities[li])
        theta[learner_id] = ability
        rng = np.random.default_rng(children[li + 1])
        length = _int(rng, slo, shi)
        chosen = rng.choice(config.n_exercises, size=length, replace=False)
        exposures: dict[str, int] = {}
        for t, qi in enumerate(chosen, start=1):
            eid = f"q{int(qi):0{qw}d}"
            concept = concept_of[eid]
            seen = exposures.get(concept, 0)
            p = float(
                sigmoid(
                    ability
                    + config.learning_gain * seen
                    - difficulty_of[eid]
                    + config.global_intercept
                )
            )
            outcome = bool(rng.random() < p)
            interactions.append(
                Interaction(
                    learner_id=learner_id,
                    timestep=t,
                    exercise_id=eid,
                    outcome=outcome,
                )
            )
            p_star[(learner_id, t)] = p
            exposures[concept] = seen + 1

    dataset = build_dataset(exercises, interactions)
    truth = GroundTruth(
        p_star=p_star, theta=theta, difficulty=difficulty_of, concept=concept_of
    )
    return dataset, truth


def calibrate_intercept(
    config: SimConfig, target_rate: float = 0.623, tol: float = 1e-6
) -> float:
    """Bisect the global intercept until mean p* hits target_rate.

    The exercise order drawn per learner does not depend on the intercept,
    so mean p* is strictly increasing in it and bisection is exact.
    """
    if not 0.0 < target_rate < 1.0:
        raise ValueError(f"target_rate must be in (0, 1), got {target_rate}")

    def mean_p(intercept: float) -> float:
        _, truth = simulate(replace(config, global_intercept=intercept))
        return float(np.mean(list(truth.p_star.values())))

    lo, hi = -12.0, 12.0
    for _ in range(60):
        if hi - lo <= tol:
            break
        mid = (lo + hi) / 2.0
        if mean_p(mid) < target_rate:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2.0


def oracle_auc(truth: GroundTruth, interactions: list[Interaction]) -> float:
    """AUC of the true probabilities against the sampled outcomes.

    This is the Bayes-optimal score on the synthetic data; no model can
    reliably exceed it in expectation.
    """
    scores = []
    labels = []
    for it in interactions:
        key = (it.learner_id, it.timestep)
        if key not in truth.p_star:
            raise DataIntegrityError(f"no ground truth for interaction {key}")
        scores.append(truth.p_star[key])
        labels.append(it.outcome)
    labels_arr = np.array(labels, dtype=bool)
    if labels_arr.all() or not labels_arr.any():
        raise NumericError("oracle AUC undefined: outcomes are single-class")
    return auc_score(labels_arr, np.array(scores, dtype=np.float64))


def write_ground_truth(truth: GroundTruth, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for (learner_id, timestep) in sorted(truth.p_star):
            row = {
                "learner_id": learner_id,
                "timestep": timestep,
                "p_star": truth.p_star[(learner_id, timestep)],
            }
            f.write(json.dumps(row, sort_keys=True) + "\n")


def read_ground_truth(path: str | Path) -> dict[tuple[str, int], float]:
    out: dict[tuple[str, int], float] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            out[(row["learner_id"], int(row["timestep"]))] = float(row["p_star"])
    return out
