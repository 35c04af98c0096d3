#!/usr/bin/env python3
"""
End-to-end tests for the experiment management CLI on a tiny MovieLens file.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import torch
from loguru import logger

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from checkpoint import load_checkpoint, read_history
from errors import (
    EXIT_DATA,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_USAGE,
    ConfigError,
    IncompatibleCheckpointError,
    NumericError,
    exit_code_for,
)
import experiment_management
from experiment_management import RunConfig, direction_checks, evaluate_checkpoint, explicit_shape, main, run_cell
from model import ABLATIONS

FAST = ["--epochs", "1", "--dim", "4", "--layers", "1", "--k", "3", "--batch", "64", "-q"]


@pytest.fixture(autouse=True)
def isolated_logging(tmp_path, monkeypatch):
    """Keep the CLI's log files in tmp_path and drop its sinks afterwards."""
    monkeypatch.setenv("GGCF_LOG_DIR", str(tmp_path / "logs"))
    yield
    logger.remove()


def write_ratings(path: Path) -> Path:
    """6 users x 8 movies, 5 ratings each."""
    lines = ["userId,movieId,rating,timestamp"]
    for u in range(6):
        for j in range(5):
            item = (u + j) % 8
            lines.append(f"{u + 1},{10 * (item + 1)},{3.5 + 0.5 * (j % 2)},{1260759144 + j}")
    path.write_text("\n".join(lines) + "\n")
    return path


def run_cli(*argv) -> int:
    with pytest.raises(SystemExit) as exc:
        main([str(a) for a in argv])
    return exc.value.code


@pytest.fixture
def prepared(tmp_path):
    """A frozen split ready for training."""
    ratings = write_ratings(tmp_path / "ratings.csv")
    out = tmp_path / "prepared"
    assert run_cli("prepare", "--data-path", ratings, "--out", out, "-q") == EXIT_OK
    return out / "split.tsv"


class TestRunConfig:
    def test_json_with_overrides(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"layers": 2, "learning_rate": 5e-4, "ablation": "no-interaction"}))
        config = RunConfig.from_json(path).with_overrides(layers=4, dim=None)
        assert config.layers == 4
        assert config.dim == 64
        assert config.learning_rate == 5e-4
        assert config.flags() == ABLATIONS["no-interaction"]

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"layer": 2}))
        with pytest.raises(ConfigError, match="layer"):
            RunConfig.from_json(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("{layers: 2")
        with pytest.raises(ConfigError):
            RunConfig.from_json(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            RunConfig.from_json(tmp_path / "absent.json")

    def test_hash_ignores_output_dir(self):
        a = RunConfig(output_dir="a")
        assert a.config_hash() == RunConfig(output_dir="b").config_hash()
        assert a.config_hash() != RunConfig(learning_rate=5e-4).config_hash()
        assert len(a.config_hash()) == 12

    @pytest.mark.parametrize(
        "overrides",
        [{"dataset": "netflix"}, {"train_fraction": 1.0}, {"ablation": "none"}, {"epochs": 0}, {"k": 0}],
    )
    def test_validate(self, overrides):
        with pytest.raises(ConfigError):
            RunConfig(**overrides).validate()


class TestPrepare:
    def test_prints_dataset_statistics(self, tmp_path, capsys):
        ratings = write_ratings(tmp_path / "ratings.csv")
        assert run_cli("prepare", "--data-path", ratings, "--out", tmp_path / "out", "-q") == EXIT_OK
        assert "users=6 items=8 interactions=30" in capsys.readouterr().out

        summary = json.loads((tmp_path / "out" / "dataset_summary.json").read_text())
        assert summary["train_interactions"] == 24
        assert summary["test_interactions"] == 6
        assert summary["density"] == pytest.approx(30 / 48)
        assert len(summary["config_hash"]) == 12
        assert (tmp_path / "out" / "ingest_report.json").exists()

    def test_split_is_reproducible(self, tmp_path):
        ratings = write_ratings(tmp_path / "ratings.csv")
        run_cli("prepare", "--data-path", ratings, "--out", tmp_path / "a", "-q")
        run_cli("prepare", "--data-path", ratings, "--out", tmp_path / "b", "-q")
        assert (tmp_path / "a" / "split.tsv").read_bytes() == (tmp_path / "b" / "split.tsv").read_bytes()

    def test_other_split_seed_changes_split(self, tmp_path):
        ratings = write_ratings(tmp_path / "ratings.csv")
        run_cli("prepare", "--data-path", ratings, "--out", tmp_path / "a", "-q")
        run_cli("prepare", "--data-path", ratings, "--out", tmp_path / "b", "--split-seed", "7", "-q")
        assert (tmp_path / "a" / "split.tsv").read_bytes() != (tmp_path / "b" / "split.tsv").read_bytes()

    def test_missing_data_file(self, tmp_path):
        assert run_cli("prepare", "--data-path", tmp_path / "absent.csv", "--out", tmp_path, "-q") == EXIT_DATA

    def test_malformed_data_file(self, tmp_path):
        path = tmp_path / "ratings.csv"
        path.write_text("userId,movieId,rating,timestamp\n1,abc,4.0,1\n")
        assert run_cli("prepare", "--data-path", path, "--out", tmp_path / "out", "-q") == EXIT_DATA

    def test_undecodable_data_file(self, tmp_path):
        path = tmp_path / "ratings.csv"
        path.write_bytes(b"userId,movieId,rating,timestamp\n1,\xff\xfe,4.0,1\n")
        assert run_cli("prepare", "--data-path", path, "--out", tmp_path / "out", "-q") == EXIT_DATA


class TestTrainAndEvaluate:
    def test_train_writes_history_and_checkpoint(self, prepared, tmp_path):
        run = tmp_path / "run"
        assert run_cli("train", "--split-file", prepared, "--out", run, *FAST) == EXIT_OK

        records = read_history(run / "history.jsonl")
        assert len(records) == 1
        assert records[0]["epoch"] == 1
        assert records[0]["recall@3"] is not None
        assert len(records[0]["config_hash"]) == 12

        ckpt = load_checkpoint(run / "model.npz")
        assert ckpt.layers == 1
        assert ckpt.dim == 4
        assert ckpt.meta["epoch"] == 1

    def test_evaluate_matches_final_record(self, prepared, tmp_path, capsys):
        run = tmp_path / "run"
        run_cli("train", "--split-file", prepared, "--out", run, *FAST)
        final = read_history(run / "history.jsonl")[-1]
        capsys.readouterr()

        code = run_cli(
            "evaluate", "--checkpoint", run / "model.npz", "--split-file", prepared, "--k", "3", "--out", run, "--per-user", "-q"
        )
        assert code == EXIT_OK
        printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert printed["recall@3"] == pytest.approx(final["recall@3"], abs=1e-12)
        assert printed["ndcg@3"] == pytest.approx(final["ndcg@3"], abs=1e-12)
        assert printed["users_evaluated"] == 6
        assert json.loads((run / "eval.json").read_text()) == printed

        per_user = pd.read_csv(run / "eval_per_user.csv")
        assert len(per_user) == 6
        assert set(per_user["user_id"]) == {1, 2, 3, 4, 5, 6}

    def test_euclidean_only_checkpoint_flags(self, prepared, tmp_path):
        run = tmp_path / "run"
        run_cli("train", "--split-file", prepared, "--out", run, "--ablation", "euclidean-only", *FAST)
        assert load_checkpoint(run / "model.npz").flags == ABLATIONS["euclidean-only"]

    def test_pinned_scales(self, prepared, tmp_path):
        run = tmp_path / "run"
        run_cli("train", "--split-file", prepared, "--out", run, "--pin-interaction-scales", *FAST)
        ckpt = load_checkpoint(run / "model.npz")
        assert ckpt.params.gamma.item() == 0.0
        assert ckpt.params.gamma_prime.item() == 0.0

    def test_deterministic_runs_match(self, prepared, tmp_path):
        threads = torch.get_num_threads()
        try:
            for name in ("a", "b"):
                run_cli("train", "--split-file", prepared, "--out", tmp_path / name, "--deterministic", *FAST)
        finally:
            torch.use_deterministic_algorithms(False)
            torch.set_num_threads(threads)
        assert (tmp_path / "a" / "history.jsonl").read_bytes() == (tmp_path / "b" / "history.jsonl").read_bytes()

    def test_tampered_checkpoint(self, prepared, tmp_path):
        run = tmp_path / "run"
        run_cli("train", "--split-file", prepared, "--out", run, *FAST)
        path = run / "model.npz"
        with np.load(path) as data:
            arrays = {name: data[name] for name in data.files}
        meta = json.loads(str(arrays.pop("meta")))
        meta["format_version"] = 99
        with open(path, "wb") as f:
            np.savez(f, meta=np.array(json.dumps(meta)), **arrays)

        code = run_cli("evaluate", "--checkpoint", path, "--split-file", prepared, "--out", run, "-q")
        assert code == EXIT_DATA

    def test_checkpoint_from_other_split(self, prepared, tmp_path):
        run = tmp_path / "run"
        run_cli("train", "--split-file", prepared, "--out", run, *FAST)
        other = tmp_path / "other"
        run_cli("prepare", "--data-path", tmp_path / "ratings.csv", "--out", other, "--split-seed", "9", "-q")
        code = run_cli("evaluate", "--checkpoint", run / "model.npz", "--split-file", other / "split.tsv", "--out", run, "-q")
        assert code == EXIT_DATA

    def test_evaluate_rejects_other_dimension(self, prepared, tmp_path):
        run = tmp_path / "run"
        run_cli("train", "--split-file", prepared, "--out", run, *FAST)
        code = run_cli(
            "evaluate", "--checkpoint", run / "model.npz", "--split-file", prepared,
            "--out", run, "--dim", "8", "--layers", "3", "-q",
        )
        assert code == EXIT_DATA
        assert not (run / "eval.json").exists()

    def test_evaluate_rejects_layers_from_config_file(self, prepared, tmp_path):
        run = tmp_path / "run"
        run_cli("train", "--split-file", prepared, "--out", run, *FAST)
        config = tmp_path / "run.json"
        config.write_text(json.dumps({"layers": 3}))
        code = run_cli(
            "evaluate", "--config", config, "--checkpoint", run / "model.npz", "--split-file", prepared, "--out", run, "-q"
        )
        assert code == EXIT_DATA

    def test_shape_mismatch_names_the_field(self, prepared, tmp_path):
        run = tmp_path / "run"
        run_cli("train", "--split-file", prepared, "--out", run, *FAST)
        config = RunConfig(split_file=str(prepared), output_dir=str(run), k=3)
        with pytest.raises(IncompatibleCheckpointError, match="layers"):
            evaluate_checkpoint(config, run / "model.npz", expected_shape={"layers": 3})
        with pytest.raises(IncompatibleCheckpointError, match="dimension"):
            evaluate_checkpoint(config, run / "model.npz", expected_shape={"dim": 8})

    def test_evaluate_accepts_matching_shape(self, prepared, tmp_path):
        run = tmp_path / "run"
        run_cli("train", "--split-file", prepared, "--out", run, *FAST)
        code = run_cli("evaluate", "--checkpoint", run / "model.npz", "--split-file", prepared, "--out", run, *FAST)
        assert code == EXIT_OK

    def test_evaluate_requires_split(self, tmp_path):
        code = run_cli("evaluate", "--checkpoint", tmp_path / "model.npz", "--out", tmp_path, "-q")
        assert code == EXIT_USAGE


class TestUsageErrors:
    def test_no_command(self, capsys):
        assert run_cli() == EXIT_USAGE

    def test_bad_flag_value(self):
        assert run_cli("train", "--layers", "three") == EXIT_USAGE

    def test_unknown_ablation(self):
        assert run_cli("train", "--ablation", "bogus") == EXIT_USAGE

    def test_missing_checkpoint_flag(self):
        assert run_cli("evaluate", "--split-file", "split.tsv") == EXIT_USAGE

    def test_invalid_config_value(self, prepared, tmp_path):
        assert run_cli("train", "--split-file", prepared, "--out", tmp_path, "--epochs", "0", "-q") == EXIT_USAGE

    def test_train_without_data(self, tmp_path):
        assert run_cli("train", "--out", tmp_path, "-q") == EXIT_USAGE


class TestSweeps:
    def test_layer_grid(self, prepared, tmp_path):
        out = tmp_path / "sweep"
        code = run_cli("grid", "--split-file", prepared, "--out", out, "--layer-list", "1", "2", *FAST)
        assert code == EXIT_OK

        grid = pd.read_csv(out / "grid" / "grid.csv")
        assert grid["layers"].tolist() == [1, 2]
        assert (grid["status"] == "ok").all()
        assert grid["split_hash"].nunique() == 1
        assert (out / "grid" / "layers_2" / "model.npz").exists()

    def test_ablation_study(self, prepared, tmp_path):
        out = tmp_path / "sweep"
        assert run_cli("ablate", "--split-file", prepared, "--out", out, "--seeds", "1", "2", *FAST) == EXIT_OK

        runs = pd.read_csv(out / "ablate" / "ablation_runs.csv")
        assert len(runs) == 8
        summary = pd.read_csv(out / "ablate" / "ablation.csv")
        assert summary["ablation"].tolist() == list(ABLATIONS)
        assert summary["runs"].tolist() == [2, 2, 2, 2]

        checks = json.loads((out / "ablate" / "ablation_checks.json").read_text())
        assert set(checks["checks"]) == {"full_vs_no_interaction_recall@3", "full_vs_euclidean_only_ndcg@3"}
        assert checks["seeds"] == [1, 2]
        assert len(checks["config_hash"]) == 12
        for name, holds in checks["checks"].items():
            assert summary[name].tolist() == [holds] * 4
        assert summary["config_hash"].tolist() == [checks["config_hash"]] * 4

    def test_tune(self, prepared, tmp_path):
        out = tmp_path / "sweep"
        code = run_cli(
            "tune",
            "--split-file", prepared,
            "--out", out,
            "--lr-grid", "1e-2",
            "--l2-grid", "0", "1e-4",
            "--validation-fraction", "0.3",
            *FAST,
        )
        assert code == EXIT_OK
        table = pd.read_csv(out / "tune" / "tune.csv")
        assert table["l2_weight"].tolist() == [0.0, 1e-4]
        assert (table["status"] == "ok").all()
        assert (out / "tune" / "validation_split.tsv").exists()


class TestExplicitShape:
    def args(self, config=None, dim=None, layers=None):
        return argparse.Namespace(config=config, dim=dim, layers=layers)

    def test_nothing_given(self):
        assert explicit_shape(self.args()) == {}

    def test_flags(self):
        assert explicit_shape(self.args(dim=8)) == {"dim": 8}

    def test_config_file_and_flag_override(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"dim": 16, "layers": 2, "epochs": 5}))
        assert explicit_shape(self.args(config=str(path), layers=4)) == {"dim": 16, "layers": 4}


class TestRunCell:
    @pytest.mark.parametrize("error", [OSError("disk full"), RuntimeError("out of memory"), NumericError("nan loss")])
    def test_failed_cell_is_marked(self, monkeypatch, error):
        def failing(config, progress=True):
            raise error

        monkeypatch.setattr(experiment_management, "train_run", failing)
        row = run_cell(RunConfig(k=3))
        assert row["status"] == f"failed: {error}"
        assert row["recall@3"] is None
        assert len(row["config_hash"]) == 12

    def test_other_errors_propagate(self, monkeypatch):
        def failing(config, progress=True):
            raise KeyError("bug")

        monkeypatch.setattr(experiment_management, "train_run", failing)
        with pytest.raises(KeyError):
            run_cell(RunConfig())


class TestDirectionChecks:
    def test_holds_and_fails(self):
        summary = pd.DataFrame(
            {
                "ablation": ["full", "no-interaction", "euclidean-only", "hyperbolic-only"],
                "recall@20": [0.2, 0.1, 0.3, 0.1],
                "ndcg@20": [0.1, 0.1, 0.2, 0.05],
            }
        )
        assert direction_checks(summary, 20) == {
            "full_vs_no_interaction_recall@20": True,
            "full_vs_euclidean_only_ndcg@20": False,
        }

    def test_missing_variant(self):
        summary = pd.DataFrame({"ablation": ["full"], "recall@20": [0.2], "ndcg@20": [0.1]})
        assert set(direction_checks(summary, 20).values()) == {None}


class TestExitCodes:
    @pytest.mark.parametrize(
        "error,code",
        [
            (ConfigError("x"), EXIT_USAGE),
            (IncompatibleCheckpointError("x"), EXIT_DATA),
            (FileNotFoundError("x"), EXIT_DATA),
            (NumericError("x"), EXIT_NUMERIC),
            (RuntimeError("x"), EXIT_USAGE),
        ],
    )
    def test_mapping(self, error, code):
        assert exit_code_for(error) == code
