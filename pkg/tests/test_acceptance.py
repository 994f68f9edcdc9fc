"""End-to-end accuracy runs on the MNIST-family streams.

These train full-width models on real IDX files and take tens of minutes
each. They run a single seed at reduced epochs; thresholds are unchanged.
"""

import json
import os

import pytest

from main import main
from utils.constants import DATA_ROOT_ENV

pytestmark = [
    pytest.mark.data,
    pytest.mark.slow,
    pytest.mark.skipif(not os.environ.get(DATA_ROOT_ENV), reason=f"${DATA_ROOT_ENV} is not set"),
]


def final_average(tmp_path, dataset, method, *extra):
    out = tmp_path / f"{dataset}-{method}"
    argv = ["train", "--dataset", dataset, "--method", method, "--seed", "0", "--out", str(out), *extra]
    assert main(argv) == 0
    return json.loads((out / "run.json").read_text())["final_average"]


class TestSplitMnist:
    """Multi-head Split-MNIST."""

    def test_bayesian_methods_beat_sgd(self, tmp_path):
        scores = {m: final_average(tmp_path, "split-mnist", m, "--epochs", "5") for m in ("BGR", "VCL", "SGD")}
        assert scores["BGR"] >= 0.965
        assert scores["VCL"] >= 0.965
        assert scores["SGD"] <= 0.94
        assert scores["BGR"] - scores["SGD"] >= 0.03


class TestSplitFashion:
    """Ablation ordering on Split-Fashion-MNIST."""

    def test_generative_regularization_ordering(self, tmp_path):
        scores = {
            m: final_average(tmp_path, "split-fashion", m, "--epochs", "5") for m in ("BGR", "GEN", "VCL", "SGD")
        }
        assert scores["BGR"] - scores["GEN"] >= 0.02
        assert scores["GEN"] - scores["VCL"] >= 0.02
        assert scores["BGR"] - scores["SGD"] >= 0.02


class TestPermutedMnist:
    """Single-head Permuted-MNIST at reduced scale."""

    def test_bgr_beats_sgd(self, tmp_path):
        reduced = ("--tasks", "5", "--train-subsample", "10000", "--epochs", "5")
        bgr = final_average(tmp_path, "permuted", "BGR", *reduced)
        sgd = final_average(tmp_path, "permuted", "SGD", *reduced)
        assert bgr - sgd >= 0.15
