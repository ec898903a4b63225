"""Run-directory orchestration: hashing, locking, stages, and exit codes."""

import dataclasses
import json
import subprocess
import sys

import pytest

import tokentrace.cli as cli
from tokentrace.errors import (
    EXIT_INTEGRITY,
    EXIT_IO,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_USAGE,
    DataFormatError,
    NumericError,
)
from tokentrace.pipeline import (
    RunConfig,
    config_from_dict,
    config_hash,
    default_config,
    load_config,
    run_all,
    run_dir,
    run_lock,
    save_config,
    stage_coldstart,
    stage_report,
    stage_simulate,
)
from tokentrace.simulate import SimConfig
from tokentrace.splits import QUESTION_COLDSTART
from tokentrace.training import TrainConfig


def tiny_config(output_root, **overrides):
    """Smallest configuration that exercises every stage quickly."""
    sim = SimConfig(
        n_learners=12,
        n_exercises=6,
        n_concepts=2,
        sequence_length_range=(3, 4),
        ability_sd=1.0,
        difficulty_range=(-1.5, 1.5),
        learning_gain=0.1,
        global_intercept=0.4,
        seed=13,
    )
    train = TrainConfig(max_steps=4, eval_every=2, warmup_steps=2, patience=3, seed=13)
    base = dict(
        sim=sim,
        train=train,
        seed=13,
        representation="id_only",
        output_root=str(output_root),
        train_fraction=0.75,
        char_budget=600,
        vocab_max_size=512,
        n_layers=1,
        n_heads=2,
        d_model=16,
        d_ff=32,
        max_positions=512,
        lora_rank=4,
        lora_alpha=4.0,
        dkt_hidden_dim=8,
        dkt_embedding_dim=4,
    )
    base.update(overrides)
    return RunConfig(**base)


class TestConfig:
    def test_hash_ignores_output_root_only(self, tmp_path):
        """Where outputs land never changes a run's identity; content does."""
        a = tiny_config(tmp_path / "x")
        b = dataclasses.replace(a, output_root=str(tmp_path / "y"))
        assert config_hash(a) == config_hash(b)
        assert run_dir(a) != run_dir(b)
        for field_name, value in (
            ("seed", 14),
            ("representation", "full_text"),
            ("lora_rank", 8),
            ("sim", dataclasses.replace(a.sim, n_learners=9)),
        ):
            changed = dataclasses.replace(a, **{field_name: value})
            assert config_hash(changed) != config_hash(a), field_name

    def test_save_load_round_trip(self, tmp_path):
        config = tiny_config(tmp_path)
        save_config(config, tmp_path / "config.json")
        assert load_config(tmp_path / "config.json") == config

    def test_unknown_keys_rejected(self, tmp_path):
        raw = tiny_config(tmp_path).to_dict()
        raw["mystery"] = 1
        with pytest.raises(DataFormatError, match="mystery"):
            config_from_dict(raw)

    def test_missing_sections_rejected(self):
        with pytest.raises(DataFormatError, match="missing sections"):
            config_from_dict({"seed": 3})

    def test_invalid_enum_fields_rejected(self, tmp_path):
        config = tiny_config(tmp_path)
        with pytest.raises(DataFormatError):
            dataclasses.replace(config, model="gru")
        with pytest.raises(DataFormatError):
            dataclasses.replace(config, representation="raw")
        with pytest.raises(DataFormatError):
            dataclasses.replace(config, train_fraction=1.0)

    def test_default_config_applies_overrides(self):
        config = default_config(seed=3, model="dkt")
        assert config.model == "dkt"
        assert config.seed == 3
        assert config.sim.seed == 3
        assert config.train.seed == 3


class TestLock:
    def test_second_holder_is_rejected_then_admitted(self, tmp_path):
        with run_lock(tmp_path):
            with pytest.raises(OSError, match="locked"):
                run_lock(tmp_path).__enter__()
        with run_lock(tmp_path):
            pass

    def test_locked_run_directory_maps_to_io_exit(self, tmp_path):
        config = tiny_config(tmp_path / "runs")
        directory = run_dir(config)
        directory.mkdir(parents=True)
        (directory / ".lock").write_text("12345")
        save_config(config, tmp_path / "config.json")
        code = cli.main(["simulate", "--config", str(tmp_path / "config.json")])
        assert code == EXIT_IO


@pytest.fixture(scope="module")
def ntkt_run(tmp_path_factory):
    """One full ntkt pipeline driven through the CLI entry point."""
    root = tmp_path_factory.mktemp("ntkt")
    config = tiny_config(root / "runs")
    config_path = root / "config.json"
    save_config(config, config_path)
    for command in ("simulate", "prepare", "train", "evaluate"):
        assert cli.main([command, "--config", str(config_path)]) == EXIT_OK
    assert (
        cli.main(["coldstart", "--config", str(config_path), "--mode", "user"])
        == EXIT_OK
    )
    return config, config_path, run_dir(config)


class TestStages:
    def test_run_directory_holds_every_stage_artifact(self, ntkt_run):
        _, _, directory = ntkt_run
        for name in (
            "config.json",
            "dataset.jsonl",
            "exercises.jsonl",
            "ground_truth.json",
            "split.json",
            "summary.json",
            "prepared.jsonl",
            "eval.jsonl",
            "vocab.json",
            "checkpoint.ttc",
            "train_log.jsonl",
            "train_summary.json",
            "predictions.jsonl",
            "metrics.json",
            "user_coldstart.csv",
        ):
            assert (directory / name).exists(), name
        assert not (directory / ".lock").exists()

    def test_summary_reports_oracle_headroom(self, ntkt_run):
        _, _, directory = ntkt_run
        summary = json.loads((directory / "summary.json").read_text())
        assert summary["learners"] == 12
        assert 0.5 < summary["oracle_auc_all"] <= 1.0
        assert 0.0 < summary["correctness_rate"] < 1.0

    def test_prepared_text_respects_id_only_representation(self, ntkt_run):
        _, _, directory = ntkt_run
        records = [
            json.loads(line)
            for line in (directory / "prepared.jsonl").read_text().splitlines()
        ]
        bodies = [r["text"][r["text"].index("<history>") :] for r in records]
        assert any("<Q>" in b for b in bodies)  # some histories are nonempty
        for body in bodies:
            assert "<QID>" in body
            assert "<C>" not in body  # concepts appear in richer representations
            assert "Compute" not in body  # no simulated question stems either

    def test_train_summary_counts_lora_parameters_only(self, ntkt_run):
        config, _, directory = ntkt_run
        summary = json.loads((directory / "train_summary.json").read_text())
        per_adapter = config.lora_rank * (config.d_model + config.d_model)
        expected = config.n_layers * len(config.lora_targets) * per_adapter
        assert summary["family"] == "ntkt"
        assert summary["trainable_parameters"] == expected
        assert summary["trainable_parameters"] < summary["frozen_parameters"]
        assert 0 < summary["steps_run"] <= config.train.max_steps

    def test_predictions_cover_all_test_interactions(self, ntkt_run):
        _, _, directory = ntkt_run
        from tokentrace.data import ingest_dataset
        from tokentrace.evaluate import read_predictions
        from tokentrace.splits import load_split

        dataset = ingest_dataset(directory / "dataset.jsonl")
        split = load_split(directory / "split.json")
        predictions = read_predictions(directory / "predictions.jsonl")
        by_learner = dataset.by_learner()
        assert len(predictions) == sum(
            len(by_learner[l]) for l in split.test_learners
        )
        assert all(0.0 <= p.p_correct <= 1.0 for p in predictions)
        metrics = json.loads((directory / "metrics.json").read_text())
        assert metrics["n"] == len(predictions)

    def test_train_log_rows_parse_and_step_forward(self, ntkt_run):
        _, _, directory = ntkt_run
        rows = [
            json.loads(line)
            for line in (directory / "train_log.jsonl").read_text().splitlines()
        ]
        assert rows
        steps = [r["step"] for r in rows]
        assert steps == sorted(steps)
        assert all(set(r) == {"step", "lr", "train_loss", "eval_loss"} for r in rows)

    def test_simulate_is_reproducible_byte_for_byte(self, ntkt_run, tmp_path):
        """Same config in a fresh root regenerates identical data artifacts."""
        config, _, directory = ntkt_run
        clone = dataclasses.replace(config, output_root=str(tmp_path / "runs"))
        other = stage_simulate(clone)
        for name in ("dataset.jsonl", "exercises.jsonl", "ground_truth.json", "split.json", "summary.json"):
            assert (other / name).read_bytes() == (directory / name).read_bytes(), name

    def test_rerunning_a_stage_overwrites_in_place(self, ntkt_run):
        config, _, directory = ntkt_run
        before = (directory / "dataset.jsonl").read_bytes()
        stage_simulate(config)
        assert (directory / "dataset.jsonl").read_bytes() == before

    def test_question_mode_rejected_for_holdout_split(self, ntkt_run):
        _, config_path, _ = ntkt_run
        code = cli.main(
            ["coldstart", "--config", str(config_path), "--mode", "question"]
        )
        assert code == EXIT_USAGE

    def test_coldstart_mode_is_validated(self, ntkt_run):
        config, _, _ = ntkt_run
        with pytest.raises(DataFormatError, match="mode"):
            stage_coldstart(config, "bogus")


@pytest.fixture(scope="module")
def dkt_coldstart_run(tmp_path_factory):
    """A dkt run on a question cold-start split, through the library API."""
    root = tmp_path_factory.mktemp("dkt")
    config = tiny_config(
        root / "runs",
        model="dkt",
        split_kind=QUESTION_COLDSTART,
        held_out_questions=2,
        train_fraction=0.7,
        sim=SimConfig(
            n_learners=20,
            n_exercises=6,
            n_concepts=2,
            sequence_length_range=(4, 6),
            ability_sd=1.0,
            difficulty_range=(-1.5, 1.5),
            learning_gain=0.1,
            global_intercept=0.4,
            seed=17,
        ),
    )
    directory = run_all(config, coldstart_mode="question")
    return config, directory


class TestDktColdstartRun:
    def test_report_partitions_and_gaps(self, dkt_coldstart_run):
        config, directory = dkt_coldstart_run
        cold = json.loads((directory / "coldstart.json").read_text())
        assert cold["seen"]["n"] > 0
        assert cold["unseen"]["n"] > 0
        if cold["f1_gap"] is not None:
            assert cold["f1_gap"] == pytest.approx(
                cold["seen"]["f1"] - cold["unseen"]["f1"]
            )
        assert 0.0 < cold["p_value"] <= 1.0
        assert set(cold["reference_values"]) == {
            "baseline_seen_f1",
            "baseline_unseen_f1",
            "text_model_seen_f1",
            "text_model_unseen_f1",
        }

    def test_held_out_questions_absent_from_training_stream(self, dkt_coldstart_run):
        from tokentrace.data import ingest_dataset
        from tokentrace.splits import load_split, training_interactions

        config, directory = dkt_coldstart_run
        dataset = ingest_dataset(directory / "dataset.jsonl")
        split = load_split(directory / "split.json")
        held = set(split.held_out_exercises)
        assert len(held) == 2
        assert all(
            it.exercise_id not in held
            for it in training_interactions(dataset, split)
        )

    def test_checkpoint_family_is_dkt(self, dkt_coldstart_run):
        config, directory = dkt_coldstart_run
        summary = json.loads((directory / "train_summary.json").read_text())
        assert summary["family"] == "dkt"


class TestReport:
    def test_report_reads_persisted_metrics_verbatim(self, ntkt_run, tmp_path):
        """The report stage aggregates files; it never rescores models."""
        _, _, directory = ntkt_run
        metrics_path = directory / "metrics.json"
        original = metrics_path.read_text()
        tampered = json.loads(original)
        tampered["auc"] = 0.1234
        metrics_path.write_text(json.dumps(tampered, indent=2, sort_keys=True) + "\n")
        try:
            out = stage_report([directory], tmp_path / "report")
        finally:
            metrics_path.write_text(original)
        report_md = (out / "report.md").read_text()
        assert "0.1234" in report_md
        assert directory.name in report_md
        table = (out / "metrics_table.csv").read_text().splitlines()
        assert table[0] == "run,label,n,accuracy,f1,auc"
        assert len(table) == 2

    def test_report_merges_curves_and_coldstart_tables(
        self, ntkt_run, dkt_coldstart_run, tmp_path
    ):
        _, _, ntkt_dir = ntkt_run
        _, dkt_dir = dkt_coldstart_run
        out = stage_report([ntkt_dir, dkt_dir], tmp_path / "combined")
        curves = (out / "user_curves.csv").read_text().splitlines()
        assert curves[0] == "run,label,timestep,f1,n"
        assert len(curves) > 1  # the ntkt run has a user curve
        cold = (out / "coldstart_table.csv").read_text().splitlines()
        assert [r.split(",")[2] for r in cold[1:]] == ["seen", "unseen"]

    def test_report_via_cli(self, ntkt_run, tmp_path):
        _, _, directory = ntkt_run
        out = tmp_path / "cli_report"
        code = cli.main(["report", "--runs", str(directory), "--out", str(out)])
        assert code == EXIT_OK
        assert (out / "report.md").exists()


class TestExitCodes:
    def test_usage_errors_exit_two(self):
        assert cli.main([]) == EXIT_USAGE
        assert cli.main(["simulate", "--repr", "bogus"]) == EXIT_USAGE
        assert cli.main(["--help"]) == EXIT_OK

    def test_invalid_config_json_exits_two(self, tmp_path):
        bad = tmp_path / "config.json"
        bad.write_text("{not json")
        assert cli.main(["simulate", "--config", str(bad)]) == EXIT_USAGE

    def test_corrupt_dataset_exits_three(self, tmp_path):
        config = tiny_config(tmp_path / "runs")
        directory = stage_simulate(config)
        lines = (directory / "dataset.jsonl").read_text().splitlines()
        with open(directory / "dataset.jsonl", "a", encoding="utf-8") as f:
            f.write(lines[0] + "\n")  # duplicate (learner, timestep)
        config_path = tmp_path / "config.json"
        save_config(config, config_path)
        assert cli.main(["prepare", "--config", str(config_path)]) == EXIT_INTEGRITY

    def test_numeric_failure_exits_four(self, monkeypatch):
        def boom(config):
            raise NumericError("loss is not finite")

        monkeypatch.setitem(cli._STAGES, "simulate", boom)
        assert cli.main(["simulate"]) == EXIT_NUMERIC

    def test_missing_inputs_exit_five(self, tmp_path):
        config = tiny_config(tmp_path / "runs")
        config_path = tmp_path / "config.json"
        save_config(config, config_path)
        assert cli.main(["evaluate", "--config", str(config_path)]) == EXIT_IO


class TestFlagResolution:
    def test_flags_override_config_file(self, tmp_path):
        config_path = tmp_path / "config.json"
        save_config(tiny_config(tmp_path / "runs"), config_path)
        args = cli.build_parser().parse_args(
            [
                "simulate",
                "--config",
                str(config_path),
                "--learners",
                "5",
                "--seed",
                "99",
                "--split",
                "question_coldstart",
                "--char-budget",
                "250",
            ]
        )
        config = cli._resolve_config(args)
        assert config.sim.n_learners == 5
        assert config.seed == 99
        assert config.sim.seed == 99
        assert config.train.seed == 99
        assert config.split_kind == QUESTION_COLDSTART
        assert config.char_budget == 250
        # untouched fields come from the file
        assert config.d_model == 16

    def test_module_entry_point_wires_to_cli(self):
        proc = subprocess.run(
            [sys.executable, "-m", "tokentrace", "--help"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert "simulate" in proc.stdout
