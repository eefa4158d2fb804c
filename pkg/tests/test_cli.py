"""Command-line interface: exit codes, artifacts, reports."""

import csv
import json
import math

import numpy as np
import pytest

from dpcdbn.cli import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_OK,
    ConfigError,
    load_config,
    main,
)
from dpcdbn.data_io import load_model


@pytest.fixture(scope="module")
def cli_config(small_corpus, tmp_path_factory):
    """A fast training configuration over the small bundled corpus."""
    out, paths = small_corpus
    cfg_dir = tmp_path_factory.mktemp("cli_cfg")
    cfg = cfg_dir / "run.cfg"
    cfg.write_text(
        "\n".join(
            [
                "# fast integration configuration",
                f"train_images = {paths['train_images']}",
                f"train_labels = {paths['train_labels']}",
                f"test_images = {paths['test_images']}",
                f"test_labels = {paths['test_labels']}",
                "n_groups = 2",
                "filter_side = 5",
                "pool_ratio = 2",
                "degree = 3",
                "feature_head = energy_grid",
                "feature_grid = 6",
                "epochs = 1",
                "seed = 3",
            ]
        )
        + "\n"
    )
    return cfg


class TestConfig:
    def test_unknown_key_named(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("bogus_key = 1\n")
        with pytest.raises(ConfigError, match="bogus_key"):
            load_config(str(cfg), {})

    def test_invalid_value_named(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("epochs = soon\n")
        with pytest.raises(ConfigError, match="epochs"):
            load_config(str(cfg), {})

    def test_overrides_win(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("seed = 1\nepsilon = 4\n")
        config = load_config(str(cfg), {"seed": "9"})
        assert config["seed"] == 9
        assert config["epsilon"] == 4.0

    def test_comments_and_blanks_ignored(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# comment\n\nseed = 2\n")
        assert load_config(str(cfg), {})["seed"] == 2

    def test_malformed_line_rejected(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("seed 2\n")
        with pytest.raises(ConfigError):
            load_config(str(cfg), {})


class TestExitCodes:
    def test_nonpositive_epsilon_is_config_error(self, cli_config, capsys):
        code = main(["train", "--config", str(cli_config), "--epsilon", "-1"])
        assert code == EXIT_CONFIG
        assert "epsilon" in capsys.readouterr().err

    def test_missing_seed_is_config_error(self, cli_config, tmp_path, capsys):
        stripped = tmp_path / "noseed.cfg"
        stripped.write_text(
            "".join(
                line + "\n"
                for line in cli_config.read_text().splitlines()
                if not line.startswith("seed")
            )
        )
        assert main(["train", "--config", str(stripped)]) == EXIT_CONFIG
        assert "seed" in capsys.readouterr().err

    def test_missing_dataset_is_data_error(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            "train_images = /nonexistent/x.idx\n"
            "train_labels = /nonexistent/y.idx\n"
            "seed = 0\n"
        )
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_DATA

    def test_missing_model_is_data_error(self, cli_config, tmp_path):
        code = main(
            [
                "eval",
                "--config",
                str(cli_config),
                "--model",
                str(tmp_path / "missing.bin"),
            ]
        )
        assert code == EXIT_DATA

    def test_corrupt_model_is_data_error(self, cli_config, tmp_path):
        bad = tmp_path / "model.bin"
        bad.write_bytes(b"not a container at all")
        code = main(["eval", "--config", str(cli_config), "--model", str(bad)])
        assert code == EXIT_DATA

    def test_noise_test_floor_is_config_error(self, capsys):
        code = main(["noise-test", "--epsilon", "1", "--n", "100"])
        assert code == EXIT_CONFIG

    def test_duplicate_sweep_degrees_rejected(self, cli_config):
        code = main(
            ["l-sweep", "--config", str(cli_config), "--l-values", "3,3"]
        )
        assert code == EXIT_CONFIG


class TestTrainEval:
    def test_train_writes_artifacts_and_ledger(self, cli_config, tmp_path, capsys):
        out = tmp_path / "run"
        code = main(
            [
                "train",
                "--config",
                str(cli_config),
                "--out",
                str(out),
                "--epsilon",
                "1.0",
            ]
        )
        assert code == EXIT_OK
        assert (out / "model.bin").exists()
        assert (out / "metrics.jsonl").exists()
        captured = capsys.readouterr().out
        assert "ledger: stage=layer0" in captured
        assert "ledger: stage=softmax" in captured
        assert "epsilon spent: 1" in captured
        model = load_model(out / "model.bin")
        assert model.accountant.total == pytest.approx(1.0)
        rows = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
        assert {"stage", "epoch", "objective"} <= set(rows[0])

    def test_noiseless_run_reports_zero_spend(self, cli_config, tmp_path, capsys):
        out = tmp_path / "run"
        code = main(["train", "--config", str(cli_config), "--out", str(out)])
        assert code == EXIT_OK
        assert "epsilon spent: 0" in capsys.readouterr().out

    def test_identical_runs_are_byte_identical(self, cli_config, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert (
                main(
                    [
                        "train",
                        "--config",
                        str(cli_config),
                        "--out",
                        str(out),
                        "--epsilon",
                        "2.0",
                    ]
                )
                == EXIT_OK
            )
            outs.append((out / "model.bin").read_bytes())
        assert outs[0] == outs[1]

    def test_eval_reproduces_training_metrics(self, cli_config, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", "--config", str(cli_config), "--out", str(out)]) == EXIT_OK
        train_line = json.loads(capsys.readouterr().out.splitlines()[0])
        code = main(
            ["eval", "--config", str(cli_config), "--model", str(out / "model.bin")]
        )
        assert code == EXIT_OK
        eval_line = json.loads(capsys.readouterr().out.splitlines()[0])
        assert eval_line == train_line


class TestAudit:
    def test_report_rows(self, cli_config, tmp_path, capsys):
        out = tmp_path / "audit"
        assert main(["audit", "--config", str(cli_config), "--out", str(out)]) == EXIT_OK
        rows = [json.loads(line) for line in (out / "audit.jsonl").read_text().splitlines()]
        layer = rows[0]
        assert {
            "delta_lemma2",
            "delta_naive_h0",
            "delta_naive_h1",
            "delta_maximal",
            "error_lower",
            "error_upper",
        } <= set(layer)
        assert layer["delta_maximal"] >= layer["delta_naive_h1"] - 1e-9
        assert layer["delta_naive_h1"] >= layer["delta_naive_h0"]
        assert 0.0 <= layer["error_lower"] <= layer["error_upper"]
        assert "delta_softmax" in rows[-1]
        with open(out / "approximator.csv") as fh:
            table = list(csv.DictReader(fh))
        assert table[0]["kind"] == "chebyshev"
        assert float(table[0]["lower_bound"]) <= float(table[0]["sup_error_empirical"])
        assert "epsilon spent: 0" in capsys.readouterr().out


class TestNoiseTest:
    def test_pass_verdict(self, capsys):
        code = main(["noise-test", "--epsilon", "1", "--delta", "2", "--seed", "0"])
        assert code == EXIT_OK
        report = json.loads(capsys.readouterr().out.splitlines()[0])
        assert report["verdict"] == "pass"
        assert report["scale"] == pytest.approx(2.0)
        assert report["p_value"] >= 0.01

    def test_fixed_seed_reproduces_statistic(self, capsys):
        main(["noise-test", "--epsilon", "1", "--delta", "2", "--seed", "5"])
        first = json.loads(capsys.readouterr().out.splitlines()[0])
        main(["noise-test", "--epsilon", "1", "--delta", "2", "--seed", "5"])
        second = json.loads(capsys.readouterr().out.splitlines()[0])
        assert first["ks_statistic"] == second["ks_statistic"]

    def test_infinite_epsilon_rejected(self):
        assert main(["noise-test", "--epsilon", "inf"]) == EXIT_CONFIG


class TestLSweep:
    def test_sweep_table(self, cli_config, tmp_path, capsys):
        out = tmp_path / "sweep"
        code = main(
            ["l-sweep", "--config", str(cli_config), "--out", str(out), "--l-values", "2,3"]
        )
        assert code == EXIT_OK
        with open(out / "sweep.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["L"]) for r in rows] == [2, 3]
        for row in rows:
            assert 0.0 <= float(row["accuracy"]) <= 1.0
        assert "epsilon spent: 0" in capsys.readouterr().out
