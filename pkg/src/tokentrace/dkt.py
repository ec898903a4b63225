"""DKT baseline: an LSTM over (question embedding, outcome indicator) steps
with a per-question sigmoid readout.

The readout produces one logit per question id and is indexed by the
target's id; the prediction for the interaction at step t conditions on
the hidden state after steps 1..t-1 only. Exercise ids unseen at training
time map to a reserved bucket embedding so cold-start evaluation still
yields a prediction.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset, Interaction
from .errors import DataIntegrityError
from .nn.tensor import (
    Tensor,
    concat_last,
    embedding,
    gather_rows,
    matmul,
    parameter,
    sigmoid,
    softplus,
    tanh,
)
from .splits import SplitSpec, training_interactions
from .training import FitResult, TrainConfig, fit

from dataclasses import dataclass


@dataclass(frozen=True)
class DktConfig:
    hidden_dim: int
    embedding_dim: int
    question_count: int

    def __post_init__(self):
        for name in ("hidden_dim", "embedding_dim", "question_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return {
            "hidden_dim": self.hidden_dim,
            "embedding_dim": self.embedding_dim,
            "question_count": self.question_count,
        }


class DktModel:
    """LSTM knowledge tracer over integer question ids.

    Tables are sized question_count + 1; the extra row is the reserved
    bucket for ids not seen during training.
    """

    def __init__(self, config: DktConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        H, E = config.hidden_dim, config.embedding_dim
        rows = config.question_count + 1
        scale = 0.1

        def w(*shape):
            return parameter(rng.normal(0.0, scale, size=shape).astype(self.dtype))

        # gate order in the stacked weights: input, forget, cell, output
        self.params: dict[str, Tensor] = {
            "emb": w(rows, E),
            "w_x": w(E + 2, 4 * H),
            "w_h": w(H, 4 * H),
            "b": parameter(np.zeros(4 * H, dtype=self.dtype)),
            "w_y": w(H, rows),
            "b_y": parameter(np.zeros(rows, dtype=self.dtype)),
        }
        self.unseen_id = config.question_count

    def forward_logits(self, q_ids: np.ndarray, outcomes: np.ndarray) -> Tensor:
        """Per-step target logits, shape (B, T).

        logits[:, t] scores the interaction at step t from the hidden state
        after steps 0..t-1; step 0 is scored from the zero state.
        """
        q_ids = np.asarray(q_ids, dtype=np.int64)
        outcomes = np.asarray(outcomes)
        if q_ids.ndim == 1:
            q_ids = q_ids[None, :]
            outcomes = outcomes[None, :]
        B, T = q_ids.shape
        rows = self.config.question_count + 1
        if q_ids.min() < 0 or q_ids.max() >= rows:
            raise ValueError(f"question ids outside [0, {rows})")
        H = self.config.hidden_dim
        h = Tensor(np.zeros((B, H), dtype=self.dtype))
        c = Tensor(np.zeros((B, H), dtype=self.dtype))
        step_logits: list[Tensor] = []
        for t in range(T):
            # score target t against the state built from history < t
            y = matmul(h, self.params["w_y"]) + self.params["b_y"]
            step_logits.append(gather_rows(y, q_ids[:, t]).reshape((B, 1)))

            onehot = np.zeros((B, 2), dtype=self.dtype)
            onehot[np.arange(B), outcomes[:, t].astype(np.int64)] = 1.0
            x = concat_last(embedding(self.params["emb"], q_ids[:, t]), Tensor(onehot))
            gates = matmul(x, self.params["w_x"]) + matmul(h, self.params["w_h"]) + self.params["b"]
            i_g = sigmoid(_slice_gate(gates, 0, H))
            f_g = sigmoid(_slice_gate(gates, 1, H))
            g_g = tanh(_slice_gate(gates, 2, H))
            o_g = sigmoid(_slice_gate(gates, 3, H))
            c = f_g * c + i_g * g_g
            h = o_g * tanh(c)
        out = step_logits[0]
        for piece in step_logits[1:]:
            out = concat_last(out, piece)
        return out

    def map_exercise(self, exercise_id: str, id_map: dict[str, int]) -> int:
        return id_map.get(exercise_id, self.unseen_id)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ValueError("parameter names do not match")
        for k, arr in state.items():
            if tuple(arr.shape) != self.params[k].data.shape:
                raise ValueError(f"shape mismatch for {k}")
            self.params[k].data = np.asarray(arr, dtype=self.dtype)


def _slice_gate(gates: Tensor, index: int, width: int) -> Tensor:
    """One gate's columns from the stacked (B, 4H) pre-activation."""
    return gather_columns(gates, index * width, width)


def gather_columns(x: Tensor, start: int, width: int) -> Tensor:
    """Contiguous column slice of a 2-d tensor, differentiable."""
    from .nn.tensor import _node, _accum

    out = _node(x.data[:, start : start + width], (x,))
    if out.requires_grad:

        def _bw():
            g = np.zeros_like(x.data)
            g[:, start : start + width] = out.grad
            _accum(x, g)

        out._backward_fn = _bw
    return out


def dkt_forward(
    model: DktModel,
    history: list[tuple[int, bool]],
    target_id: int,
) -> float:
    """Probability for one target following an explicit (id, outcome) history."""
    T = len(history) + 1
    q = np.zeros(T, dtype=np.int64)
    o = np.zeros(T, dtype=np.int64)
    for i, (qid, outcome) in enumerate(history):
        q[i] = qid
        o[i] = int(outcome)
    q[T - 1] = target_id
    logits = model.forward_logits(q[None, :], o[None, :])
    z = float(logits.data[0, T - 1])
    return 1.0 / (1.0 + np.exp(-z)) if z >= 0 else float(np.exp(z) / (1.0 + np.exp(z)))


class DktPredictor:
    """Adapter for the sequential protocol: one LSTM pass per learner."""

    def __init__(self, model: DktModel, id_map: dict[str, int]):
        self.model = model
        self.id_map = id_map

    def predict_sequence(self, seq: list[Interaction]) -> list[float]:
        q = np.array(
            [self.model.map_exercise(it.exercise_id, self.id_map) for it in seq],
            dtype=np.int64,
        )
        o = np.array([int(it.outcome) for it in seq], dtype=np.int64)
        logits = self.model.forward_logits(q[None, :], o[None, :]).data[0]
        with np.errstate(over="ignore"):
            probs = np.where(
                logits >= 0,
                1.0 / (1.0 + np.exp(-logits)),
                np.exp(logits) / (1.0 + np.exp(logits)),
            )
        return [float(p) for p in probs]


def build_id_map(interactions: list[Interaction]) -> dict[str, int]:
    """Dense ids for the exercises present in the training stream."""
    seen = sorted({it.exercise_id for it in interactions})
    return {eid: i for i, eid in enumerate(seen)}


def _sequence_arrays(
    sequences: list[list[Interaction]], id_map: dict[str, int], unseen_id: int
) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for seq in sequences:
        q = np.array([id_map.get(it.exercise_id, unseen_id) for it in seq], dtype=np.int64)
        o = np.array([int(it.outcome) for it in seq], dtype=np.int64)
        out.append((q, o))
    return out


def make_dkt_batch_loss(model: DktModel):
    """Sum-reduced BCE over every step of every sequence in the batch."""

    def batch_loss(batch: list[tuple[np.ndarray, np.ndarray]]):
        B = len(batch)
        T = max(len(q) for q, _ in batch)
        q_ids = np.zeros((B, T), dtype=np.int64)
        outcomes = np.zeros((B, T), dtype=np.int64)
        mask = np.zeros((B, T), dtype=model.dtype)
        for i, (q, o) in enumerate(batch):
            q_ids[i, : len(q)] = q
            outcomes[i, : len(o)] = o
            mask[i, : len(q)] = 1.0
        logits = model.forward_logits(q_ids, outcomes)
        y = outcomes.astype(model.dtype)
        # bce from logits: softplus(z) - y*z, summed over real steps
        loss = ((softplus(logits) - logits * y) * mask).sum()
        return loss, int(mask.sum())

    return batch_loss


def dkt_train(
    dataset: Dataset,
    split: SplitSpec,
    config: DktConfig,
    train_config: TrainConfig,
    eval_fraction: float = 0.1,
) -> tuple[DktModel, dict[str, int], FitResult]:
    """Train on the split's training stream with an early-stop carve-out.

    A deterministic fraction of training learners is held aside for the
    evaluation loss; test learners are never touched.
    """
    stream = training_interactions(dataset, split)
    if not stream:
        raise ValueError("empty training stream")
    id_map = build_id_map(list(stream))
    if config.question_count < len(id_map):
        raise DataIntegrityError(
            f"question_count {config.question_count} < "
            f"{len(id_map)} distinct training exercises"
        )
    by_learner: dict[str, list[Interaction]] = {}
    for it in stream:
        by_learner.setdefault(it.learner_id, []).append(it)
    learners = sorted(by_learner)
    rng = np.random.default_rng(train_config.seed)
    order = rng.permutation(len(learners))
    n_eval = max(1, int(round(eval_fraction * len(learners))))
    if n_eval >= len(learners):
        raise ValueError("eval carve-out leaves no training learners")
    eval_set = {learners[i] for i in order[:n_eval]}

    model = DktModel(config, seed=train_config.seed)
    train_seqs = _sequence_arrays(
        [by_learner[l] for l in learners if l not in eval_set],
        id_map,
        model.unseen_id,
    )
    eval_seqs = _sequence_arrays(
        [by_learner[l] for l in learners if l in eval_set], id_map, model.unseen_id
    )
    result = fit(
        trainable=model.params,
        batch_loss=make_dkt_batch_loss(model),
        train_data=train_seqs,
        eval_data=eval_seqs,
        config=train_config,
    )
    return model, id_map, result
