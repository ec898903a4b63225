"""End-to-end run orchestration.

A RunConfig fully determines a run. Each stage writes canonical artifacts
into a directory named by the config's content hash, so distinct configs
never collide and re-running a persisted config reproduces every file
byte for byte. A lock file keeps two processes out of one run directory.

Stages and their artifacts:

  simulate  -> config.json, dataset.jsonl, exercises.jsonl,
               ground_truth.json, split.json, summary.json
  prepare   -> prepared.jsonl, eval.jsonl, vocab.json
  train     -> checkpoint.ttc, train_log.jsonl, train_summary.json
  evaluate  -> predictions.jsonl, metrics.json (+ failures.jsonl)
  coldstart -> user_coldstart.csv or coldstart.json
  report    -> report.md, metrics_table.csv, user_curves.csv,
               coldstart_table.csv (aggregation only, no recomputation)
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, Interaction, ingest_dataset, summarize, write_dataset
from .dkt import DktConfig, DktModel, DktPredictor, build_id_map, dkt_train
from .errors import DataFormatError, DataIntegrityError, StateError
from .evaluate import (
    compute_metrics,
    predict_probability,
    question_coldstart_report,
    read_predictions,
    sequential_evaluate,
    user_coldstart_curve,
    write_curve,
    write_metrics,
    write_predictions,
)
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.lora import attach_lora, params_hash
from .nn.transformer import Transformer, TransformerConfig
from .serialize import (
    DEFAULT_TEMPLATE,
    FULL_TEXT,
    REPRESENTATIONS,
    prepare_dataset,
    read_prepared,
    render_example,
    write_prepared,
)
from .simulate import (
    SimConfig,
    calibrate_intercept,
    oracle_auc,
    simulate,
    write_ground_truth,
)
from .splits import (
    HOLDOUT_BY_LEARNER,
    QUESTION_COLDSTART,
    SplitSpec,
    load_split,
    save_split,
    split_holdout,
    split_question_coldstart,
    test_interactions,
    training_interactions,
)
from .tokenizer import build_vocab, load_vocab, save_vocab
from .training import (
    TrainConfig,
    build_batch,
    encode_example,
    fit,
    masked_clm_loss,
    write_train_log,
)

MODEL_FAMILIES = ("ntkt", "dkt")
LOCK_NAME = ".lock"


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; hashable to a stable directory name."""

    sim: SimConfig
    train: TrainConfig
    seed: int = 7
    model: str = "ntkt"
    representation: str = FULL_TEXT
    output_root: str = "runs"
    # split section
    split_kind: str = HOLDOUT_BY_LEARNER
    train_fraction: float = 0.9
    held_out_questions: int = 6
    # serializer section
    char_budget: int | None = None
    # tokenizer section
    vocab_max_size: int = 2048
    # ntkt model shape
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    max_positions: int = 512
    lora_rank: int = 16
    lora_alpha: float = 16.0
    lora_targets: tuple[str, ...] = ("wq", "wv")
    lora_init_scale: float = 0.01
    # dkt model shape
    dkt_hidden_dim: int = 32
    dkt_embedding_dim: int = 16
    # early-stop carve-out taken from training learners
    eval_fraction: float = 0.1
    # optional correctness-rate calibration of the simulator intercept
    target_rate: float | None = None

    def __post_init__(self):
        if self.model not in MODEL_FAMILIES:
            raise DataFormatError(f"model must be one of {MODEL_FAMILIES}, got {self.model!r}")
        if self.representation not in REPRESENTATIONS:
            raise DataFormatError(
                f"representation must be one of {REPRESENTATIONS}, "
                f"got {self.representation!r}"
            )
        if self.split_kind not in (HOLDOUT_BY_LEARNER, QUESTION_COLDSTART):
            raise DataFormatError(f"unknown split kind {self.split_kind!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise DataFormatError("train_fraction must be in (0, 1)")
        if not 0.0 < self.eval_fraction < 1.0:
            raise DataFormatError("eval_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def default_config(seed: int = 7, **overrides) -> RunConfig:
    """Desk-scale defaults; the seed threads through every section."""
    sim = SimConfig(
        n_learners=200,
        n_exercises=60,
        n_concepts=6,
        sequence_length_range=(10, 16),
        ability_sd=1.1,
        difficulty_range=(-2.2, 2.2),
        learning_gain=0.07,
        global_intercept=0.5,
        seed=seed,
    )
    train = TrainConfig(max_steps=400, eval_every=50, seed=seed)
    cfg = RunConfig(sim=sim, train=train, seed=seed, char_budget=1600)
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def config_from_dict(raw: dict) -> RunConfig:
    """Strict inverse of RunConfig.to_dict (unknown keys rejected)."""
    if not isinstance(raw, dict):
        raise DataFormatError("config root must be an object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise DataFormatError(f"unknown config keys: {unknown}")
    data = dict(raw)
    try:
        if "sim" in data:
            sim_raw = dict(data["sim"])
            if "sequence_length_range" in sim_raw:
                sim_raw["sequence_length_range"] = tuple(sim_raw["sequence_length_range"])
            if "difficulty_range" in sim_raw:
                sim_raw["difficulty_range"] = tuple(sim_raw["difficulty_range"])
            data["sim"] = SimConfig(**sim_raw)
        if "train" in data:
            data["train"] = TrainConfig(**dict(data["train"]))
        if "lora_targets" in data:
            data["lora_targets"] = tuple(data["lora_targets"])
        missing = [n for n in ("sim", "train") if n not in data]
        if missing:
            raise DataFormatError(f"config is missing sections: {missing}")
        return RunConfig(**data)
    except TypeError as e:
        raise DataFormatError(f"config schema violation: {e}") from None


def config_hash(config: RunConfig) -> str:
    """Content hash over everything except where outputs land."""
    payload = config.to_dict()
    payload.pop("output_root")
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def run_dir(config: RunConfig) -> Path:
    return Path(config.output_root) / f"run-{config_hash(config)}"


def save_config(config: RunConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_config(path: str | Path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        return config_from_dict(json.load(f))


class run_lock:
    """Exclusive ownership of a run directory for one stage invocation."""

    def __init__(self, directory: Path):
        self.path = Path(directory) / LOCK_NAME

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OSError(
                f"run directory is locked by another process: {self.path} "
                "(remove the stale lock if no process is running)"
            ) from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _write_config_or_check(config: RunConfig, directory: Path) -> None:
    """First writer records the config; later stages must match it."""
    path = directory / "config.json"
    if path.exists():
        persisted = load_config(path)
        if persisted != config:
            raise DataIntegrityError(
                f"{path} was produced by a different config; refusing to mix runs"
            )
    else:
        save_config(config, path)


def _require(directory: Path, name: str, hint: str) -> Path:
    path = directory / name
    if not path.exists():
        raise FileNotFoundError(f"{path} is missing; run `{hint}` first")
    return path


def _write_json(payload: dict, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _effective_sim(config: RunConfig) -> tuple[SimConfig, float]:
    sim = config.sim
    if config.target_rate is not None:
        intercept = calibrate_intercept(sim, target_rate=config.target_rate)
        sim = dataclasses.replace(sim, global_intercept=intercept)
    return sim, sim.global_intercept


def make_split(config: RunConfig, dataset: Dataset) -> SplitSpec:
    if config.split_kind == HOLDOUT_BY_LEARNER:
        return split_holdout(dataset, config.train_fraction, config.seed)
    return split_question_coldstart(
        dataset,
        k=config.held_out_questions,
        seed=config.seed,
        train_fraction=config.train_fraction,
    )


def stage_simulate(config: RunConfig) -> Path:
    """Dataset, ground truth, split, and summary for one run."""
    directory = run_dir(config)
    with run_lock(directory):
        _write_config_or_check(config, directory)
        sim_cfg, intercept = _effective_sim(config)
        dataset, truth = simulate(sim_cfg)
        write_dataset(dataset, directory)
        write_ground_truth(truth, directory / "ground_truth.json")
        split = make_split(config, dataset)
        save_split(split, directory / "split.json")
        stats = summarize(dataset)
        test_stream = list(test_interactions(dataset, split))
        payload = {
            "learners": stats.learners,
            "interactions": stats.interactions,
            "exercises": stats.exercises,
            "concepts": stats.concepts,
            "mean_sequence_length": stats.mean_sequence_length,
            "median_sequence_length": stats.median_sequence_length,
            "correctness_rate": stats.correctness_rate,
            "global_intercept": intercept,
            "oracle_auc_all": oracle_auc(truth, list(dataset.interactions)),
            "oracle_auc_test": oracle_auc(truth, test_stream),
        }
        _write_json(payload, directory / "summary.json")
    return directory


def _load_dataset(directory: Path) -> Dataset:
    return ingest_dataset(_require(directory, "dataset.jsonl", "simulate"))


def _eval_learner_set(train_learners: tuple[str, ...], config: RunConfig) -> set[str]:
    """Deterministic early-stop carve-out from the training learners."""
    learners = sorted(train_learners)
    rng = np.random.default_rng(config.train.seed)
    order = rng.permutation(len(learners))
    n_eval = max(1, int(round(config.eval_fraction * len(learners))))
    if n_eval >= len(learners):
        raise DataIntegrityError("eval carve-out leaves no training learners")
    return {learners[i] for i in order[:n_eval]}


def stage_prepare(config: RunConfig) -> Path:
    """Serialized text and vocabulary for the training stream."""
    directory = run_dir(config)
    with run_lock(directory):
        _write_config_or_check(config, directory)
        dataset = _load_dataset(directory)
        split = load_split(_require(directory, "split.json", "simulate"))
        eval_learners = _eval_learner_set(split.train_learners, config)
        stream = training_interactions(dataset, split)
        fit_stream = tuple(it for it in stream if it.learner_id not in eval_learners)
        eval_stream = tuple(it for it in stream if it.learner_id in eval_learners)
        kwargs = dict(
            representation=config.representation,
            template=DEFAULT_TEMPLATE,
            char_budget=config.char_budget,
        )
        fit_examples = prepare_dataset(dataset, fit_stream, **kwargs)
        eval_examples = prepare_dataset(dataset, eval_stream, **kwargs)
        write_prepared(fit_examples, directory / "prepared.jsonl")
        write_prepared(eval_examples, directory / "eval.jsonl")
        vocab = build_vocab((ex.text for ex in fit_examples), config.vocab_max_size)
        save_vocab(vocab, directory / "vocab.json")
    return directory


def make_ntkt_batch_loss(model, max_positions: int):
    def batch_loss(batch):
        tokens, labels = build_batch(batch, max_positions)
        logits = model.forward(tokens)
        return masked_clm_loss(logits, labels, reduction="sum")

    return batch_loss


def _train_ntkt(config: RunConfig, directory: Path) -> dict:
    vocab = load_vocab(_require(directory, "vocab.json", "prepare"))
    fit_examples = read_prepared(_require(directory, "prepared.jsonl", "prepare"))
    eval_examples = read_prepared(_require(directory, "eval.jsonl", "prepare"))
    t_cfg = TransformerConfig(
        n_layers=config.n_layers,
        n_heads=config.n_heads,
        d_model=config.d_model,
        d_ff=config.d_ff,
        vocab_size=vocab.size,
        max_positions=config.max_positions,
    )
    base = Transformer(t_cfg, seed=config.seed)
    base_hash = params_hash(base.state_dict())
    model = attach_lora(
        base,
        targets=config.lora_targets,
        rank=config.lora_rank,
        alpha=config.lora_alpha,
        seed=config.seed,
        init_scale=config.lora_init_scale,
    )
    train_data = [encode_example(vocab, ex) for ex in fit_examples]
    eval_data = [encode_example(vocab, ex) for ex in eval_examples]
    result = fit(
        trainable=model.trainable_parameters(),
        batch_loss=make_ntkt_batch_loss(model, config.max_positions),
        train_data=train_data,
        eval_data=eval_data,
        config=config.train,
    )
    if params_hash(base.state_dict()) != base_hash:
        raise StateError("frozen base weights changed during fine-tuning")
    tensors = {f"base::{k}": v for k, v in base.state_dict().items()}
    tensors.update({f"adapter::{k}": v for k, v in model.adapter_state().items()})
    meta = {
        "family": "ntkt",
        "transformer": t_cfg.to_dict(),
        "lora": {
            "rank": config.lora_rank,
            "alpha": config.lora_alpha,
            "targets": list(config.lora_targets),
            "init_scale": config.lora_init_scale,
            "seed": config.seed,
        },
        "base_hash": base_hash,
    }
    save_checkpoint(directory / "checkpoint.ttc", tensors, meta)
    write_train_log(result.log, directory / "train_log.jsonl")
    return {
        "family": "ntkt",
        "trainable_parameters": model.trainable_count(),
        "frozen_parameters": sum(v.size for v in base.state_dict().values()),
        "steps_run": result.steps_run,
        "best_eval_loss": result.best_eval_loss,
        "stopped_early": result.stopped_early,
    }


def _train_dkt(config: RunConfig, directory: Path) -> dict:
    dataset = _load_dataset(directory)
    split = load_split(_require(directory, "split.json", "simulate"))
    stream = training_interactions(dataset, split)
    question_count = len(build_id_map(list(stream)))
    dkt_cfg = DktConfig(
        hidden_dim=config.dkt_hidden_dim,
        embedding_dim=config.dkt_embedding_dim,
        question_count=question_count,
    )
    model, id_map, result = dkt_train(
        dataset, split, dkt_cfg, config.train, eval_fraction=config.eval_fraction
    )
    meta = {"family": "dkt", "dkt": dkt_cfg.to_dict(), "id_map": id_map}
    save_checkpoint(directory / "checkpoint.ttc", model.state_dict(), meta)
    write_train_log(result.log, directory / "train_log.jsonl")
    return {
        "family": "dkt",
        "trainable_parameters": sum(v.size for v in model.state_dict().values()),
        "steps_run": result.steps_run,
        "best_eval_loss": result.best_eval_loss,
        "stopped_early": result.stopped_early,
    }


def stage_train(config: RunConfig) -> Path:
    directory = run_dir(config)
    with run_lock(directory):
        _write_config_or_check(config, directory)
        if config.model == "ntkt":
            summary = _train_ntkt(config, directory)
        else:
            summary = _train_dkt(config, directory)
        _write_json(summary, directory / "train_summary.json")
    return directory


class NtktPredictor:
    """Per-interaction predictor: render the prompt, read the two-way
    outcome distribution at the final answer position."""

    def __init__(self, model, vocab, dataset: Dataset, config: RunConfig):
        self.model = model
        self.vocab = vocab
        self.dataset = dataset
        self.representation = config.representation
        self.char_budget = config.char_budget
        self.max_positions = config.max_positions

    def __call__(self, history: list[Interaction], target: Interaction) -> float:
        example = render_example(
            history=history,
            target=self.dataset.exercises[target.exercise_id],
            exercises=self.dataset.exercises,
            outcome=target.outcome,
            representation=self.representation,
            template=DEFAULT_TEMPLATE,
            char_budget=self.char_budget,
        )
        return predict_probability(
            self.model, example, self.vocab, self.max_positions
        )


def load_model(config: RunConfig, directory: Path):
    """Rebuild the trained predictor from the run's checkpoint."""
    tensors, meta = load_checkpoint(_require(directory, "checkpoint.ttc", "train"))
    family = meta.get("family")
    if family != config.model:
        raise DataIntegrityError(
            f"checkpoint family {family!r} does not match configured {config.model!r}"
        )
    if family == "ntkt":
        t_cfg = TransformerConfig(**meta["transformer"])
        base = Transformer(t_cfg, seed=0)
        base.load_state_dict(
            {k.split("::", 1)[1]: v for k, v in tensors.items() if k.startswith("base::")}
        )
        lora = meta["lora"]
        model = attach_lora(
            base,
            targets=tuple(lora["targets"]),
            rank=int(lora["rank"]),
            alpha=float(lora["alpha"]),
            seed=int(lora["seed"]),
            init_scale=float(lora["init_scale"]),
        )
        model.load_adapter_state(
            {
                k.split("::", 1)[1]: v
                for k, v in tensors.items()
                if k.startswith("adapter::")
            }
        )
        if params_hash(base.state_dict()) != meta["base_hash"]:
            raise DataIntegrityError("checkpoint base weights fail their hash")
        for t in model.trainable_parameters().values():
            t.requires_grad = False
        vocab = load_vocab(_require(directory, "vocab.json", "prepare"))
        dataset = _load_dataset(directory)
        return NtktPredictor(model, vocab, dataset, config)
    dkt_cfg = DktConfig(**meta["dkt"])
    model = DktModel(dkt_cfg, seed=0)
    model.load_state_dict(tensors)
    for t in model.params.values():
        t.requires_grad = False
    return DktPredictor(model, {k: int(v) for k, v in meta["id_map"].items()})


def stage_evaluate(config: RunConfig) -> Path:
    """Sequential evaluation of the trained model on the test learners."""
    directory = run_dir(config)
    with run_lock(directory):
        _write_config_or_check(config, directory)
        dataset = _load_dataset(directory)
        split = load_split(_require(directory, "split.json", "simulate"))
        predictor = load_model(config, directory)
        result = sequential_evaluate(predictor, dataset, split)
        write_predictions(list(result.predictions), directory / "predictions.jsonl")
        report = compute_metrics(list(result.predictions))
        write_metrics(report, directory / "metrics.json")
        if result.failures:
            with open(directory / "failures.jsonl", "w", encoding="utf-8") as f:
                for row in result.failures:
                    f.write(json.dumps(row, sort_keys=True) + "\n")
    return directory


def stage_coldstart(config: RunConfig, mode: str) -> Path:
    """Aggregate persisted predictions into cold-start reports."""
    directory = run_dir(config)
    with run_lock(directory):
        _write_config_or_check(config, directory)
        predictions = read_predictions(
            _require(directory, "predictions.jsonl", "evaluate")
        )
        if mode == "user":
            rows = user_coldstart_curve(predictions)
            write_curve(rows, directory / "user_coldstart.csv")
        elif mode == "question":
            split = load_split(_require(directory, "split.json", "simulate"))
            report = question_coldstart_report(predictions, split, seed=config.seed)
            write_metrics(report, directory / "coldstart.json")
        else:
            raise DataFormatError(f"coldstart mode must be user or question, got {mode!r}")
    return directory


def _run_label(config: RunConfig) -> str:
    return f"{config.model}/{config.representation}/{config.split_kind}"


def stage_report(run_dirs: list[str | Path], out_dir: str | Path) -> Path:
    """Cross-run comparison from persisted metrics only."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    curves = []
    cold_rows = []
    for d in run_dirs:
        d = Path(d)
        config = load_config(_require(d, "config.json", "simulate"))
        label = _run_label(config)
        metrics_path = _require(d, "metrics.json", "evaluate")
        with open(metrics_path, encoding="utf-8") as f:
            metrics = json.load(f)
        rows.append(
            {
                "run": d.name,
                "label": label,
                "n": metrics["n"],
                "accuracy": metrics["accuracy"],
                "f1": metrics["f1"],
                "auc": metrics["auc"],
            }
        )
        curve_path = d / "user_coldstart.csv"
        if curve_path.exists():
            with open(curve_path, encoding="utf-8", newline="") as f:
                for r in csv.DictReader(f):
                    curves.append(
                        {
                            "run": d.name,
                            "label": label,
                            "timestep": r["timestep"],
                            "f1": r["f1"],
                            "n": r["n"],
                        }
                    )
        cold_path = d / "coldstart.json"
        if cold_path.exists():
            with open(cold_path, encoding="utf-8") as f:
                cold = json.load(f)
            for group in ("seen", "unseen"):
                cold_rows.append(
                    {
                        "run": d.name,
                        "label": label,
                        "group": group,
                        "f1": cold[group]["f1"],
                        "auc": cold[group]["auc"],
                        "n": cold[group]["n"],
                        "f1_gap": cold["f1_gap"],
                        "p_value": cold["p_value"],
                    }
                )

    def fmt(x):
        return "-" if x is None else f"{x:.4f}"

    lines = [
        "# Run comparison",
        "",
        "| run | model/representation/split | n | accuracy | f1 | auc |",
        "| --- | --- | --- | --- | --- | --- |",
    ]
    for r in rows:
        lines.append(
            f"| {r['run']} | {r['label']} | {r['n']} | "
            f"{fmt(r['accuracy'])} | {fmt(r['f1'])} | {fmt(r['auc'])} |"
        )
    if cold_rows:
        lines += [
            "",
            "## Question cold start",
            "",
            "| run | group | n | f1 | auc | f1_gap | p_value |",
            "| --- | --- | --- | --- | --- | --- | --- |",
        ]
        for r in cold_rows:
            lines.append(
                f"| {r['run']} | {r['group']} | {r['n']} | {fmt(r['f1'])} | "
                f"{fmt(r['auc'])} | {fmt(r['f1_gap'])} | {fmt(r['p_value'])} |"
            )
    (out / "report.md").write_text("\n".join(lines) + "\n", encoding="utf-8")

    with open(out / "metrics_table.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["run", "label", "n", "accuracy", "f1", "auc"]
        )
        writer.writeheader()
        writer.writerows(rows)
    with open(out / "user_curves.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["run", "label", "timestep", "f1", "n"]
        )
        writer.writeheader()
        writer.writerows(curves)
    with open(out / "coldstart_table.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(
            f,
            fieldnames=["run", "label", "group", "f1", "auc", "n", "f1_gap", "p_value"],
        )
        writer.writeheader()
        writer.writerows(cold_rows)
    return out


def run_all(config: RunConfig, coldstart_mode: str | None = None) -> Path:
    """simulate -> prepare -> train -> evaluate (-> coldstart) in one call."""
    stage_simulate(config)
    stage_prepare(config)
    stage_train(config)
    stage_evaluate(config)
    if coldstart_mode is not None:
        stage_coldstart(config, coldstart_mode)
    return run_dir(config)
