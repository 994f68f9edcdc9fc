"""End-to-end tests of the command line on the synthetic stream."""

import csv
import json

import numpy as np
import pytest

from controllers import selfcheck_controller
from core import posterior
from core.analysis import read_pgm
from core.persistence import Checkpoint, CheckpointRepository
from main import build_config, build_parser, main, normalize_method


@pytest.fixture
def small_config(tmp_path):
    """A run configuration small enough to train in a couple of seconds."""
    path = tmp_path / "small.json"
    path.write_text(json.dumps({
        "dataset": "synthetic",
        "arch": {"hidden_dims": [8]},
        "train": {"posterior_samples": 2, "lr": 0.01, "batch_size": 64},
        "sgld": {"steps": 5, "chain_batch": 16, "buffer_size": 128},
    }))
    return path


def train_args(config_path, out_dir, *extra):
    return ["train", "--config", str(config_path), "--out", str(out_dir), "--epochs", "2", "--seed", "5", *extra]


def reject_constant(name):
    raise ValueError(f"non-finite value {name} in JSON")


@pytest.fixture
def trained_run(small_config, tmp_path):
    out = tmp_path / "run"
    assert main(train_args(small_config, out, "--method", "bgr")) == 0
    return out


class TestConfigResolution:
    """defaults < dataset column < config file < flags."""

    def parse(self, *argv):
        return build_config(build_parser().parse_args(["train", *argv]))

    def test_dataset_column_defaults(self):
        config = self.parse("--dataset", "permuted", "--data-root", "/data")
        assert config.train.lr == 1e-3
        assert config.sgld.base_step == 10.0

    def test_file_overrides_defaults_and_flags_override_file(self, small_config):
        config = self.parse("--config", str(small_config), "--seed", "9")
        assert config.arch.hidden_dims == [8]
        assert config.sgld.steps == 5
        assert config.train.seed == 9
        config = self.parse("--config", str(small_config), "--batch-size", "7")
        assert config.train.batch_size == 7

    def test_data_root_from_environment(self, monkeypatch):
        monkeypatch.setenv("BGR_DATA_ROOT", "/mnt/idx")
        assert self.parse("--dataset", "split-mnist").data_root == "/mnt/idx"
        assert self.parse("--dataset", "split-mnist", "--data-root", "/elsewhere").data_root == "/elsewhere"

    def test_method_names(self):
        assert normalize_method("gen-l2") == "GEN_L2"
        assert normalize_method(" bgr ") == "BGR"


class TestTrain:
    """train subcommand."""

    def test_outputs(self, trained_run):
        rows = list(csv.DictReader(open(trained_run / "metrics.csv")))
        assert [(r["after_task"], r["eval_task"]) for r in rows] == [("1", "1"), ("2", "1"), ("2", "2")]
        assert all(0.0 <= float(r["accuracy"]) <= 1.0 for r in rows)
        summary = json.loads((trained_run / "run.json").read_text())
        assert summary["method"] == "BGR" and summary["seed"] == 5
        assert set(summary["wall_clock_seconds"]) == {"1", "2"}
        assert (trained_run / "checkpoints" / "task_1.ckpt").exists()
        assert (trained_run / "checkpoints" / "task_2.ckpt").exists()
        assert (trained_run / "train.log").exists()

    def test_same_seed_same_metrics(self, small_config, trained_run, tmp_path):
        again = tmp_path / "again"
        assert main(train_args(small_config, again, "--method", "BGR")) == 0
        assert (again / "metrics.csv").read_bytes() == (trained_run / "metrics.csv").read_bytes()

    def test_resume_from_first_task(self, small_config, trained_run, tmp_path):
        resumed = tmp_path / "resumed"
        checkpoint = trained_run / "checkpoints" / "task_1.ckpt"
        assert main(train_args(small_config, resumed, "--method", "BGR", "--resume", str(checkpoint))) == 0
        rows = list(csv.DictReader(open(resumed / "metrics.csv")))
        assert [(r["after_task"], r["eval_task"]) for r in rows] == [("1", "1"), ("2", "1"), ("2", "2")]
        original = list(csv.DictReader(open(trained_run / "metrics.csv")))
        assert rows[0] == original[0]
        summary = json.loads((resumed / "run.json").read_text(), parse_constant=reject_constant)
        assert summary["backward_transfer"] is not None
        assert set(summary["wall_clock_seconds"]) == {"1", "2"}

    def test_run_summary_reports_validation_accuracy(self, trained_run):
        summary = json.loads((trained_run / "run.json").read_text(), parse_constant=reject_constant)
        assert set(summary["validation_accuracy"]) == {"1", "2"}
        assert all(0.0 <= acc <= 1.0 for acc in summary["validation_accuracy"].values())

    def test_prior_checkpoint_written_before_first_task(self, trained_run):
        prior = CheckpointRepository.load_checkpoint(trained_run / "checkpoints" / "task_0.ckpt")
        assert prior.kind == "posterior" and prior.trained_tasks == []
        assert np.all(prior.arrays["mu"] == 0.0)

    def test_write_config(self, small_config, tmp_path):
        dumped = tmp_path / "resolved.json"
        assert main(train_args(small_config, tmp_path / "w", "--method", "SGD", "--write-config", str(dumped))) == 0
        assert json.loads(dumped.read_text())["train"]["method"] == "SGD"

    def test_missing_data_root_is_a_usage_error(self, tmp_path, monkeypatch):
        monkeypatch.delenv("BGR_DATA_ROOT", raising=False)
        assert main(["train", "--dataset", "split-mnist", "--out", str(tmp_path / "x")]) == 2

    def test_unknown_method_is_a_usage_error(self, small_config, tmp_path):
        assert main(train_args(small_config, tmp_path / "m", "--method", "magic")) == 2

    def test_unreadable_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "absent.json")]) == 2


class TestEval:
    """eval subcommand."""

    def test_writes_eval_csv(self, small_config, trained_run, tmp_path):
        out = tmp_path / "eval"
        checkpoint = trained_run / "checkpoints" / "task_2.ckpt"
        assert main(["eval", "--config", str(small_config), "--out", str(out), "--seed", "5",
                     "--checkpoint", str(checkpoint)]) == 0
        rows = list(csv.DictReader(open(out / "eval.csv")))
        assert [r["task"] for r in rows] == ["1", "2"]
        metrics = list(csv.DictReader(open(trained_run / "metrics.csv")))
        final = {r["eval_task"]: float(r["accuracy"]) for r in metrics if r["after_task"] == "2"}
        assert {r["task"]: float(r["accuracy"]) for r in rows} == final


class TestSample:
    """sample subcommand."""

    def test_writes_count_images(self, small_config, trained_run, tmp_path):
        out = tmp_path / "samples"
        argv = ["sample", "--config", str(small_config), "--out", str(out),
                "--checkpoint", str(trained_run / "checkpoints" / "task_2.ckpt"), "--count", "3"]
        assert main(argv) == 0
        images = sorted((out / "samples").glob("*.pgm"))
        assert len(images) == 3
        for image in images:
            pixels = read_pgm(image)
            assert pixels.shape == (1, 2)
            assert np.all((pixels >= 0.0) & (pixels <= 1.0))

    def test_zero_count(self, small_config, trained_run, tmp_path):
        out = tmp_path / "none"
        argv = ["sample", "--config", str(small_config), "--out", str(out),
                "--checkpoint", str(trained_run / "checkpoints" / "task_1.ckpt"), "--count", "0"]
        assert main(argv) == 0
        assert not (out / "samples").exists()

    def test_corrupt_checkpoint(self, small_config, tmp_path):
        broken = tmp_path / "broken.ckpt"
        broken.write_bytes(b"garbage")
        argv = ["sample", "--config", str(small_config), "--out", str(tmp_path), "--checkpoint", str(broken)]
        assert main(argv) == 1

    def test_short_parameter_array_exits_with_failure(self, small_config, trained_run, tmp_path):
        stored = CheckpointRepository.load_checkpoint(trained_run / "checkpoints" / "task_2.ckpt")
        arrays = dict(stored.arrays, mu=stored.arrays["mu"][:-3])
        short = tmp_path / "short.ckpt"
        CheckpointRepository.save_checkpoint(
            Checkpoint(stored.kind, stored.method, stored.arch, stored.trained_tasks, arrays, stored.metadata), short
        )
        argv = ["sample", "--config", str(small_config), "--out", str(tmp_path), "--checkpoint", str(short)]
        assert main(argv) == 1

    def test_untrained_prior_checkpoint(self, small_config, trained_run, tmp_path):
        out = tmp_path / "noise"
        argv = ["sample", "--config", str(small_config), "--out", str(out),
                "--checkpoint", str(trained_run / "checkpoints" / "task_0.ckpt"), "--count", "2"]
        assert main(argv) == 0
        images = sorted((out / "samples").glob("*.pgm"))
        assert len(images) == 2
        assert all(np.all((read_pgm(image) >= 0.0) & (read_pgm(image) <= 1.0)) for image in images)


class TestSaliency:
    """saliency subcommand."""

    def test_attribution_rows(self, small_config, trained_run, tmp_path):
        out = tmp_path / "sal"
        argv = ["saliency", "--config", str(small_config), "--out", str(out), "--seed", "5",
                "--checkpoint", str(trained_run / "checkpoints" / "task_2.ckpt"),
                "--task", "1", "--count", "3", "--steps", "8"]
        assert main(argv) == 0
        rows = list(csv.DictReader(open(out / "saliency" / "attributions.csv")))
        assert len(rows) == 3 * 2
        # ceil(0.2 * 2) = 1 salient input per image
        for image in ("0", "1", "2"):
            assert sum(int(r["top_mask"]) for r in rows if r["image"] == image) == 1
        assert len(list((out / "saliency").glob("*.pgm"))) == 3

    def test_unknown_task(self, small_config, trained_run, tmp_path):
        argv = ["saliency", "--config", str(small_config), "--out", str(tmp_path / "sal"),
                "--checkpoint", str(trained_run / "checkpoints" / "task_2.ckpt"), "--task", "7"]
        assert main(argv) == 2


class TestSelfcheck:
    """selfcheck subcommand."""

    def test_all_checks_pass(self, capsys):
        assert main(["selfcheck"]) == 0
        lines = [line for line in capsys.readouterr().out.splitlines() if line.startswith(("[PASS]", "[FAIL]"))]
        assert len(lines) >= 6
        assert all(line.startswith("[PASS]") for line in lines)

    def test_broken_kl_fails(self, capsys, monkeypatch):
        kl_checks = [c for c in selfcheck_controller.CHECKS if "KL" in c[0]]
        monkeypatch.setattr(selfcheck_controller, "CHECKS", kl_checks)
        real = posterior.kl_divergence
        monkeypatch.setattr(posterior, "kl_divergence", lambda q, p, mask=None: 1.01 * real(q, p, mask))
        assert main(["selfcheck"]) == 1
        assert "[FAIL]" in capsys.readouterr().out
