"""Fine-tuning loop: selectively masked CLM loss, AdamW, cosine schedule.

The loss is computed only at outcome-token positions; every other position
supplies context but contributes no gradient. Labels are aligned to logit
positions (labels[c] is the id the model must predict at position c, i.e.
token c+1), with -100 marking positions excluded from the loss. Gradient
accumulation backpropagates the sum loss per micro-batch and rescales once
by the total target count, so the update equals a single large batch.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericError
from .nn.tensor import Tensor, gather_rows
from .serialize import SerializedExample
from .tokenizer import PAD_ID, Vocab, encode_with_offsets, token_index_for_span

IGNORE_INDEX = -100


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    warmup_steps: int = 50
    schedule: str = "cosine"
    weight_decay: float = 0.01
    batch_size: int = 4
    grad_accumulation: int = 4
    max_steps: int = 20_000
    eval_every: int = 250
    min_delta: float = 0.001
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.schedule != "cosine":
            raise ValueError(f"unsupported schedule {self.schedule!r}")
        for name in (
            "warmup_steps",
            "batch_size",
            "grad_accumulation",
            "max_steps",
            "eval_every",
            "patience",
        ):
            value = getattr(self, name)
            low = 0 if name == "warmup_steps" else 1
            if value < low:
                raise ValueError(f"{name} must be >= {low}, got {value}")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.min_delta < 0:
            raise ValueError("learning_rate, weight_decay, min_delta must be >= 0")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "warmup_steps": self.warmup_steps,
            "schedule": self.schedule,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "grad_accumulation": self.grad_accumulation,
            "max_steps": self.max_steps,
            "eval_every": self.eval_every,
            "min_delta": self.min_delta,
            "patience": self.patience,
            "seed": self.seed,
        }


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to learning_rate, then cosine decay to zero at max_steps."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    lr = config.learning_rate
    if config.warmup_steps > 0 and step <= config.warmup_steps:
        return lr * step / config.warmup_steps
    span = config.max_steps - config.warmup_steps
    if span <= 0:
        return 0.0
    progress = min(1.0, (step - config.warmup_steps) / span)
    return lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class EarlyStopper:
    """Stops after `patience` consecutive evaluations that fail to improve
    the best loss by at least `min_delta`."""

    def __init__(self, min_delta: float, patience: int):
        self.min_delta = min_delta
        self.patience = patience
        self.best = math.inf
        self.stale = 0

    def update(self, loss: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if loss <= self.best - self.min_delta:
            self.best = loss
            self.stale = 0
            return True, False
        self.stale += 1
        return False, self.stale >= self.patience


@dataclass(frozen=True)
class EncodedExample:
    """Token ids with logit-aligned supervision targets."""

    tokens: np.ndarray  # (L,) int64
    labels: np.ndarray  # (L,) int64; labels[c] = tokens[c+1] at outcome positions
    label: bool


def encode_example(
    vocab: Vocab, example: SerializedExample, target_only: bool = False
) -> EncodedExample:
    """Tokenize and convert outcome char spans to logit-position labels.

    All outcome tokens are supervised by default, per the masking rule;
    target_only restricts supervision to the final answer token.
    """
    ids, offsets = encode_with_offsets(vocab, example.text)
    tokens = np.asarray(ids, dtype=np.int64)
    labels = np.full(len(ids), IGNORE_INDEX, dtype=np.int64)
    spans = (
        example.target_char_spans[-1:] if target_only else example.target_char_spans
    )
    for span in spans:
        k = token_index_for_span(offsets, span)
        if k == 0:
            raise ValueError("outcome token has no preceding context position")
        labels[k - 1] = tokens[k]
    return EncodedExample(tokens=tokens, labels=labels, label=example.label)


def build_batch(
    examples: list[EncodedExample], max_positions: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the batch maximum. Causal attention keeps pad positions
    from influencing real ones, and pad labels are excluded from the loss."""
    if not examples:
        raise ValueError("empty batch")
    lengths = [len(e.tokens) for e in examples]
    width = max(lengths)
    if max_positions is not None and width > max_positions:
        raise ValueError(
            f"batch needs {width} positions, budget is {max_positions}"
        )
    tokens = np.full((len(examples), width), PAD_ID, dtype=np.int64)
    labels = np.full((len(examples), width), IGNORE_INDEX, dtype=np.int64)
    for i, e in enumerate(examples):
        tokens[i, : lengths[i]] = e.tokens
        labels[i, : lengths[i]] = e.labels
    return tokens, labels


def masked_clm_loss(
    logits: Tensor, labels: np.ndarray, reduction: str = "mean"
) -> tuple[Tensor, int]:
    """Cross entropy at supervised positions only; (loss, target count).

    Positions labeled IGNORE_INDEX contribute exactly zero loss and zero
    gradient; their label values are otherwise ignored entirely. Supervised
    labels must be valid token ids.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.shape[:-1] != labels.shape:
        raise ValueError(
            f"logits {logits.data.shape} do not align with labels {labels.shape}"
        )
    vocab_size = logits.data.shape[-1]
    flat_labels = labels.reshape(-1)
    mask = flat_labels != IGNORE_INDEX
    count = int(mask.sum())
    supervised = flat_labels[mask]
    if supervised.size and (supervised.min() < 0 or supervised.max() >= vocab_size):
        raise NumericError(
            f"supervised labels outside [0, {vocab_size}) at masked positions"
        )
    flat = logits.reshape((-1, vocab_size))
    from .nn.tensor import log_softmax

    log_probs = log_softmax(flat, axis=-1)
    picked = gather_rows(log_probs, np.where(mask, flat_labels, 0))
    loss = -(picked * mask.astype(logits.data.dtype)).sum()
    if reduction == "mean" and count > 0:
        loss = loss * (1.0 / count)
    return loss, count


class AdamW:
    """Adam with decoupled weight decay: p <- p*(1 - lr*wd) - lr*mhat/(sqrt(vhat)+eps)."""

    def __init__(
        self,
        params: dict[str, Tensor],
        weight_decay: float = 0.01,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = dict(sorted(params.items()))
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in {name}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data * (1.0 - lr * self.weight_decay) - lr * update.astype(
                p.data.dtype
            )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


@dataclass
class FitResult:
    best_state: dict[str, np.ndarray]
    log: list[dict] = field(default_factory=list)
    steps_run: int = 0
    best_eval_loss: float = math.inf
    stopped_early: bool = False


class _Shuffler:
    """Endless deterministic stream of epoch-permuted example batches."""

    def __init__(self, data: list, batch_size: int, seed: int):
        self.data = data
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.order = self.rng.permutation(len(data))
        self.pos = 0

    def next_batch(self) -> list:
        batch = []
        while len(batch) < self.batch_size:
            if self.pos >= len(self.order):
                self.order = self.rng.permutation(len(self.data))
                self.pos = 0
            batch.append(self.data[self.order[self.pos]])
            self.pos += 1
        return batch


def _mean_loss(batch_loss, data: list, batch_size: int) -> float:
    total = 0.0
    count = 0
    for i in range(0, len(data), batch_size):
        loss, n = batch_loss(data[i : i + batch_size])
        total += float(loss.data)
        count += n
    if count == 0:
        raise ValueError("evaluation stream produced no supervised targets")
    return total / count


def fit(
    trainable: dict[str, Tensor],
    batch_loss,
    train_data: list,
    eval_data: list,
    config: TrainConfig,
) -> FitResult:
    """Generic masked-loss training driver.

    ``batch_loss(batch) -> (sum-reduced loss Tensor, target count)`` defines
    the model; ``trainable`` names the parameters to optimize and snapshot.
    The best checkpoint by evaluation loss is restored before returning.
    """
    if not train_data:
        raise ValueError("empty training stream")
    if not eval_data:
        raise ValueError("empty evaluation stream")
    optimizer = AdamW(trainable, weight_decay=config.weight_decay)
    stopper = EarlyStopper(config.min_delta, config.patience)
    shuffler = _Shuffler(train_data, config.batch_size, config.seed)
    result = FitResult(best_state={k: p.data.copy() for k, p in trainable.items()})

    def set_grad_enabled(enabled: bool) -> None:
        for p in trainable.values():
            p.requires_grad = enabled

    for step in range(config.max_steps):
        optimizer.zero_grad()
        total_count = 0
        loss_total = 0.0
        for _ in range(config.grad_accumulation):
            loss, count = batch_loss(shuffler.next_batch())
            if count > 0:
                loss.backward()
            total_count += count
            loss_total += float(loss.data)
        if total_count > 0:
            scale = 1.0 / total_count
            for p in trainable.values():
                if p.grad is not None:
                    p.grad *= scale
        optimizer.step(lr_at(step, config))
        result.steps_run = step + 1

        if (step + 1) % config.eval_every == 0:
            set_grad_enabled(False)
            eval_loss = _mean_loss(batch_loss, eval_data, config.batch_size)
            set_grad_enabled(True)
            train_loss = loss_total / max(1, total_count)
            result.log.append(
                {
                    "step": step + 1,
                    "lr": lr_at(step, config),
                    "train_loss": train_loss,
                    "eval_loss": eval_loss,
                }
            )
            improved, stop = stopper.update(eval_loss)
            if improved:
                result.best_state = {k: p.data.copy() for k, p in trainable.items()}
                result.best_eval_loss = eval_loss
            if stop:
                result.stopped_early = True
                break

    for name, p in trainable.items():
        p.data = result.best_state[name].copy()
    return result


def write_train_log(log: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in log:
            f.write(json.dumps(row, sort_keys=True) + "\n")
