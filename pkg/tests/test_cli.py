from __future__ import annotations

import json

import pytest

from backx import cli, harness
from backx.errors import EvaluationError


def _write_config(path, **overrides):
    raw = {
        "dataset": {"name": "synthetic", "num_classes": 3,
                    "samples_per_class": 100, "image_size": 16},
        "model": {"architecture": "small_cnn",
                  "schedule": {"epochs": 14, "learning_rate": 0.03,
                               "decay_epochs": [11]}},
        "poison": {"trigger": {"kind": "fixed_watermark", "patch_size": 4,
                               "alpha": 1.0},
                   "rate": 0.15, "target_label": 0},
        "eval_samples": 20,
    }
    raw.update(overrides)
    path.write_text(json.dumps(raw))
    return path


@pytest.fixture()
def config_path(tmp_path):
    return _write_config(tmp_path / "config.json")


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    config = _write_config(tmp / "config.json")
    out = tmp / "run"
    code = cli.main(["all", "--config", str(config), "--out", str(out),
                     "--methods", "grad,oracle", "--k-grid", "0.05,0.1"])
    return code, config, out


class TestExitCodes:
    def test_poison_ok(self, config_path, tmp_path, capsys):
        code = cli.main(["poison", "--config", str(config_path),
                         "--out", str(tmp_path / "out")])
        assert code == 0
        assert "poisoned 45 of 300 training samples" in capsys.readouterr().out

    def test_gate_failure_exits_two(self, tmp_path, capsys):
        config = _write_config(tmp_path / "c.json",
                               model={"architecture": "small_cnn",
                                      "schedule": {"epochs": 0}})
        code = cli.main(["train", "--config", str(config),
                         "--out", str(tmp_path / "out")])
        assert code == 2
        assert "gate failure" in capsys.readouterr().err

    def test_ingestion_error_exits_three(self, tmp_path, capsys):
        empty = tmp_path / "data"
        empty.mkdir()
        config = _write_config(tmp_path / "c.json",
                               dataset={"name": "cifar10", "root": str(empty)})
        code = cli.main(["poison", "--config", str(config),
                         "--out", str(tmp_path / "out")])
        assert code == 3
        assert "ingestion error" in capsys.readouterr().err

    def test_evaluation_error_exits_four(self, config_path, tmp_path,
                                         monkeypatch, capsys):
        monkeypatch.setattr(harness, "cmd_evaluate",
                            lambda config: (_ for _ in ()).throw(
                                EvaluationError("no eligible pairs")))
        code = cli.main(["evaluate", "--config", str(config_path),
                         "--out", str(tmp_path / "out")])
        assert code == 4
        assert "evaluation error" in capsys.readouterr().err

    def test_usage_error_exits_one(self, capsys):
        with pytest.raises(SystemExit) as err:
            cli.main(["poison"])
        assert err.value.code == 1

    def test_unknown_command_exits_one(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["explode", "--config", "x.json"])
        assert err.value.code == 1

    def test_missing_config_file_exits_one(self, tmp_path, capsys):
        code = cli.main(["poison", "--config", str(tmp_path / "absent.json")])
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_report_before_evaluate_exits_one(self, config_path, tmp_path, capsys):
        code = cli.main(["report", "--config", str(config_path),
                         "--out", str(tmp_path / "out")])
        assert code == 1


class TestFullRun:
    def test_all_exits_zero(self, cli_run, capsys):
        code, _, _ = cli_run
        assert code == 0

    def test_method_subset_respected(self, cli_run):
        _, _, out = cli_run
        stems = {p.stem.split("_")[1] for p in (out / "reports").glob("report_*.json")}
        assert stems == {"grad", "oracle"}

    def test_k_grid_override_lands_in_reports(self, cli_run):
        _, _, out = cli_run
        path = sorted((out / "reports").glob("report_grad_*.json"))[0]
        payload = json.loads(path.read_text())
        # configured grid plus endpoints and the exact trigger ratio
        assert payload["k_values"] == [0.0, 0.05, 0.0625, 0.1, 1.0]

    def test_plots_written(self, cli_run):
        _, _, out = cli_run
        names = {p.name for p in (out / "plots").iterdir()}
        assert "asr_curves.png" in names and "summary.csv" in names

    def test_ledger_written(self, cli_run):
        _, _, out = cli_run
        assert (out / "ledger.json").exists()

    def test_cached_rerun_prints_cached(self, cli_run, capsys):
        _, config, out = cli_run
        code = cli.main(["train", "--config", str(config), "--out", str(out),
                         "--methods", "grad,oracle", "--k-grid", "0.05,0.1"])
        assert code == 0
        assert "(cached)" in capsys.readouterr().out

    def test_seed_override_changes_hash(self, cli_run, capsys):
        # a different seed must not reuse the cached stages
        _, config, out = cli_run
        code = cli.main(["poison", "--config", str(config), "--out", str(out),
                         "--seed", "5"])
        assert code == 0
        assert "(cached)" not in capsys.readouterr().out
