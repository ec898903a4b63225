"""Probability extraction, classification metrics, and evaluation protocols.

AUC is computed by exact pairwise comparison (ties count one half) up to
10^4 predictions and by an average-rank formulation above that; the two
agree exactly on shared inputs. The sequential protocol predicts each test
interaction from strictly earlier interactions of the same learner only.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, Interaction
from .errors import DataIntegrityError, EvaluationError
from .splits import QUESTION_COLDSTART, SplitSpec

_PAIRWISE_LIMIT = 10_000

# external reference results quoted for context in cold-start reports;
# not an acceptance target
REFERENCE_VALUES = {
    "baseline_seen_f1": 0.777,
    "baseline_unseen_f1": 0.732,
    "text_model_seen_f1": 0.843,
    "text_model_unseen_f1": 0.843,
}


@dataclass(frozen=True)
class Prediction:
    learner_id: str
    timestep: int
    exercise_id: str
    p_correct: float
    label: bool

    def __post_init__(self):
        if not 0.0 <= self.p_correct <= 1.0:
            raise ValueError(f"p_correct {self.p_correct} outside [0, 1]")


@dataclass(frozen=True)
class CurveRow:
    timestep: int
    f1: float | None
    n: int


@dataclass(frozen=True)
class MetricsReport:
    f1: float | None
    accuracy: float
    auc: float | None
    n: int
    notes: tuple[str, ...] = ()
    curve: tuple[CurveRow, ...] | None = None

    def to_dict(self) -> dict:
        out = {
            "f1": self.f1,
            "accuracy": self.accuracy,
            "auc": self.auc,
            "n": self.n,
            "notes": list(self.notes),
        }
        if self.curve is not None:
            out["curve"] = [[r.timestep, r.f1, r.n] for r in self.curve]
        return out


def pairwise_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Brute-force AUC: fraction of (positive, negative) pairs ranked
    correctly, ties counted one half. Raises on single-class labels."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    pos = scores[labels]
    neg = scores[~labels]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    wins = 0.0
    # chunk the outer dimension to bound the broadcast to ~10^6 cells
    step = max(1, 1_000_000 // max(1, len(neg)))
    for i in range(0, len(pos), step):
        block = pos[i : i + step, None]
        wins += np.sum(block > neg[None, :]) + 0.5 * np.sum(block == neg[None, :])
    return float(wins / (len(pos) * len(neg)))


def rank_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Average-rank AUC, O(n log n); exactly equal to pairwise_auc."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    # average ranks within tied groups
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    avg_ranks = ends - (counts - 1) / 2.0  # 1-based mean rank per group
    ranks = avg_ranks[inverse]
    pos_rank_sum = float(ranks[labels].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_score(labels: np.ndarray, scores: np.ndarray) -> float:
    if len(np.asarray(labels)) <= _PAIRWISE_LIMIT:
        return pairwise_auc(labels, scores)
    return rank_auc(labels, scores)


def f1_score(labels: np.ndarray, preds: np.ndarray) -> float | None:
    """F1 with positive class = correct; None when 2TP+FP+FN = 0."""
    labels = np.asarray(labels, dtype=bool)
    preds = np.asarray(preds, dtype=bool)
    tp = int(np.sum(preds & labels))
    fp = int(np.sum(preds & ~labels))
    fn = int(np.sum(~preds & labels))
    denom = 2 * tp + fp + fn
    if denom == 0:
        return None
    return 2.0 * tp / denom


def accuracy_score(labels: np.ndarray, preds: np.ndarray) -> float:
    labels = np.asarray(labels, dtype=bool)
    preds = np.asarray(preds, dtype=bool)
    return float(np.mean(preds == labels))


def compute_metrics(
    predictions: list[Prediction], threshold: float = 0.5
) -> MetricsReport:
    """F1 (positive = correct, p >= threshold), accuracy, and exact AUC."""
    if not predictions:
        raise ValueError("empty prediction list")
    labels = np.array([p.label for p in predictions], dtype=bool)
    scores = np.array([p.p_correct for p in predictions], dtype=np.float64)
    preds = scores >= threshold
    notes: list[str] = []
    f1 = f1_score(labels, preds)
    if f1 is None:
        notes.append("f1 undefined: no true or predicted positives")
    if labels.all() or not labels.any():
        auc = None
        notes.append("auc undefined: single-class labels")
    else:
        auc = auc_score(labels, scores)
    return MetricsReport(
        f1=f1,
        accuracy=accuracy_score(labels, preds),
        auc=auc,
        n=len(predictions),
        notes=tuple(notes),
    )


def two_way_probability(logit_correct: float, logit_incorrect: float) -> float:
    """Softmax restricted to the two outcome logits."""
    return 1.0 / (1.0 + math.exp(logit_incorrect - logit_correct))


def predict_probability(model, example, vocab, max_positions: int | None = None) -> float:
    """p(correct) for one serialized example.

    Runs the model up to (not including) the final answer position and
    renormalizes the next-token distribution over the two outcome ids.
    """
    from .tokenizer import encode_with_offsets, token_index_for_span

    ids, offsets = encode_with_offsets(vocab, example.text)
    answer_index = token_index_for_span(offsets, example.final_span)
    if answer_index == 0:
        raise EvaluationError("example has no context before the answer")
    if max_positions is not None and answer_index > max_positions:
        raise EvaluationError(
            f"example needs {answer_index} positions, budget is {max_positions}"
        )
    logits = model.forward(np.asarray(ids[:answer_index], dtype=np.int64))
    logits = getattr(logits, "data", logits)
    row = np.asarray(logits, dtype=np.float64)[-1]
    return two_way_probability(row[vocab.correct_id], row[vocab.incorrect_id])


@dataclass(frozen=True)
class SequentialEvaluation:
    predictions: tuple[Prediction, ...]
    failures: tuple[dict, ...] = ()


def sequential_evaluate(model, dataset: Dataset, split: SplitSpec) -> SequentialEvaluation:
    """Predict every test interaction from its learner's strictly earlier
    history.

    ``model`` either exposes ``predict_sequence(seq) -> [p_1 .. p_T]``
    (one pass per learner) or is called as ``model(history, target) -> p``
    per interaction. Per-example evaluation errors are recorded, not fatal.
    """
    overlap = set(split.train_learners) & set(split.test_learners)
    if overlap:
        raise DataIntegrityError(f"train/test overlap: {sorted(overlap)[:5]}")
    by_learner = dataset.by_learner()
    predictions: list[Prediction] = []
    failures: list[dict] = []
    for learner_id in split.test_learners:
        seq = by_learner.get(learner_id)
        if not seq:
            continue
        if hasattr(model, "predict_sequence"):
            probs = model.predict_sequence(list(seq))
            if len(probs) != len(seq):
                raise ValueError(
                    f"predict_sequence returned {len(probs)} probabilities "
                    f"for {len(seq)} interactions"
                )
            for it, p in zip(seq, probs):
                predictions.append(
                    Prediction(
                        learner_id=it.learner_id,
                        timestep=it.timestep,
                        exercise_id=it.exercise_id,
                        p_correct=float(p),
                        label=it.outcome,
                    )
                )
            continue
        for t, it in enumerate(seq):
            try:
                p = model(list(seq[:t]), it)
            except EvaluationError as e:
                failures.append(
                    {
                        "learner_id": it.learner_id,
                        "timestep": it.timestep,
                        "exercise_id": it.exercise_id,
                        "error": str(e),
                    }
                )
                continue
            predictions.append(
                Prediction(
                    learner_id=it.learner_id,
                    timestep=it.timestep,
                    exercise_id=it.exercise_id,
                    p_correct=float(p),
                    label=it.outcome,
                )
            )
    return SequentialEvaluation(
        predictions=tuple(predictions), failures=tuple(failures)
    )


def user_coldstart_curve(predictions: list[Prediction]) -> list[CurveRow]:
    """Mean F1 at each timestep across test learners.

    Rows with single-class labels (or a degenerate F1) are flagged
    undefined rather than dropped.
    """
    by_t: dict[int, list[Prediction]] = {}
    for p in predictions:
        by_t.setdefault(p.timestep, []).append(p)
    rows: list[CurveRow] = []
    for t in sorted(by_t):
        group = by_t[t]
        labels = np.array([p.label for p in group], dtype=bool)
        preds = np.array([p.p_correct >= 0.5 for p in group], dtype=bool)
        if labels.all() or not labels.any():
            f1 = None
        else:
            f1 = f1_score(labels, preds)
        rows.append(CurveRow(timestep=t, f1=f1, n=len(group)))
    return rows


def _f1_for_permutation(labels: np.ndarray, preds: np.ndarray) -> float:
    tp = np.sum(preds & labels)
    denom = 2 * tp + np.sum(preds & ~labels) + np.sum(~preds & labels)
    if denom == 0:
        return 0.0
    return float(2.0 * tp / denom)


def permutation_test_f1_gap(
    seen: list[Prediction],
    unseen: list[Prediction],
    n_resamples: int = 10_000,
    seed: int = 0,
    threshold: float = 0.5,
) -> float:
    """Two-sided permutation p-value for |F1(seen) - F1(unseen)|.

    Group assignments are permuted with labels and predictions moving
    together; add-one smoothing keeps the p-value strictly positive.
    """
    labels = np.array([p.label for p in seen + unseen], dtype=bool)
    preds = np.array([p.p_correct >= threshold for p in seen + unseen], dtype=bool)
    n_seen = len(seen)
    observed = abs(
        _f1_for_permutation(labels[:n_seen], preds[:n_seen])
        - _f1_for_permutation(labels[n_seen:], preds[n_seen:])
    )
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_resamples):
        idx = rng.permutation(len(labels))
        stat = abs(
            _f1_for_permutation(labels[idx[:n_seen]], preds[idx[:n_seen]])
            - _f1_for_permutation(labels[idx[n_seen:]], preds[idx[n_seen:]])
        )
        if stat >= observed - 1e-12:
            hits += 1
    return (1 + hits) / (n_resamples + 1)


@dataclass(frozen=True)
class ColdstartReport:
    seen: MetricsReport
    unseen: MetricsReport
    f1_gap: float | None
    auc_gap: float | None
    p_value: float
    reference_values: dict = field(default_factory=lambda: dict(REFERENCE_VALUES))

    def to_dict(self) -> dict:
        return {
            "seen": self.seen.to_dict(),
            "unseen": self.unseen.to_dict(),
            "f1_gap": self.f1_gap,
            "auc_gap": self.auc_gap,
            "p_value": self.p_value,
            "reference_values": self.reference_values,
        }


def question_coldstart_eval(
    model,
    dataset: Dataset,
    split: SplitSpec,
    n_resamples: int = 10_000,
    seed: int = 0,
) -> ColdstartReport:
    """Metrics over held-out-exercise interactions vs the rest, with a
    permutation test on the F1 gap."""
    result = sequential_evaluate(model, dataset, split)
    return question_coldstart_report(
        list(result.predictions), split, n_resamples=n_resamples, seed=seed
    )


def question_coldstart_report(
    predictions: list[Prediction],
    split: SplitSpec,
    n_resamples: int = 10_000,
    seed: int = 0,
) -> ColdstartReport:
    """Seen-vs-unseen report from already computed predictions."""
    if split.kind != QUESTION_COLDSTART:
        raise ValueError(f"split kind must be {QUESTION_COLDSTART}, got {split.kind}")
    held_out = set(split.held_out_exercises)
    unseen = [p for p in predictions if p.exercise_id in held_out]
    seen = [p for p in predictions if p.exercise_id not in held_out]
    if not unseen:
        raise ValueError("no test interactions on held-out exercises")
    if not seen:
        raise ValueError("no test interactions on seen exercises")
    seen_report = compute_metrics(seen)
    unseen_report = compute_metrics(unseen)
    f1_gap = None
    if seen_report.f1 is not None and unseen_report.f1 is not None:
        f1_gap = seen_report.f1 - unseen_report.f1
    auc_gap = None
    if seen_report.auc is not None and unseen_report.auc is not None:
        auc_gap = seen_report.auc - unseen_report.auc
    p_value = permutation_test_f1_gap(seen, unseen, n_resamples=n_resamples, seed=seed)
    return ColdstartReport(
        seen=seen_report,
        unseen=unseen_report,
        f1_gap=f1_gap,
        auc_gap=auc_gap,
        p_value=p_value,
    )


def write_predictions(predictions: list[Prediction], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in predictions:
            row = {
                "learner_id": p.learner_id,
                "timestep": p.timestep,
                "exercise_id": p.exercise_id,
                "p_correct": p.p_correct,
                "label": p.label,
            }
            f.write(json.dumps(row, sort_keys=True) + "\n")


def read_predictions(path: str | Path) -> list[Prediction]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            out.append(
                Prediction(
                    learner_id=row["learner_id"],
                    timestep=int(row["timestep"]),
                    exercise_id=row["exercise_id"],
                    p_correct=float(row["p_correct"]),
                    label=bool(row["label"]),
                )
            )
    return out


def write_metrics(report: MetricsReport | ColdstartReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def write_curve(rows: list[CurveRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["timestep", "f1", "n"])
        for r in rows:
            writer.writerow([r.timestep, "" if r.f1 is None else repr(r.f1), r.n])
