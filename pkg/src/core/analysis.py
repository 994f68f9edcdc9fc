"""Analysis - Accuracy bookkeeping, integrated-gradients saliency and image export."""

import csv
import io
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.tensor_diff import DimensionMismatchError, MlpArchitecture, ParamVector, grad_input
from utils.constants import IG_STEPS, METRICS_FILE, RUN_FILE, SALIENCY_TOP_FRACTION
from utils.logger import get_logger

logger = get_logger(__name__)

IG_CHUNK = 1024
_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


class AccuracyMatrix:
    """Lower-triangular T x T table: cell (t, j) is the accuracy on task j after training task t.

    Indices are 1-based; unfilled cells are NaN.
    """

    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise ValueError(f"num_tasks must be >= 1, got {num_tasks}")
        self.num_tasks = num_tasks
        self.cells = np.full((num_tasks, num_tasks), np.nan)

    def _check(self, t: int, j: int = 1) -> None:
        if not 1 <= t <= self.num_tasks:
            raise IndexError(f"after_task {t} outside 1..{self.num_tasks}")
        if not 1 <= j <= t:
            raise IndexError(f"eval_task {j} outside 1..{t}")

    def set(self, t: int, j: int, accuracy: float) -> None:
        self._check(t, j)
        if not 0.0 <= accuracy <= 1.0:
            raise ValueError(f"accuracy must be in [0, 1], got {accuracy}")
        self.cells[t - 1, j - 1] = accuracy

    def get(self, t: int, j: int) -> float:
        self._check(t, j)
        return float(self.cells[t - 1, j - 1])

    def row(self, t: int) -> np.ndarray:
        self._check(t)
        return self.cells[t - 1, :t].copy()

    def is_row_complete(self, t: int) -> bool:
        return not np.any(np.isnan(self.row(t)))

    def row_average(self, t: int) -> float:
        """Mean accuracy over tasks 1..t after training task t."""
        values = self.row(t)
        if np.any(np.isnan(values)):
            raise ValueError(f"row {t} is incomplete")
        return float(np.mean(values))

    def final_average(self) -> float:
        return self.row_average(self.num_tasks)

    def backward_transfer(self) -> Optional[float]:
        """Mean change from just-trained accuracy to the final row over tasks 1..T-1.

        Negative values measure forgetting; 0.0 for a single task. None while
        any cell it needs is unfilled.
        """
        if self.num_tasks == 1:
            return 0.0
        final = self.row(self.num_tasks)[:-1]
        diagonal = np.diag(self.cells)[:-1]
        if np.any(np.isnan(final)) or np.any(np.isnan(diagonal)):
            return None
        return float(np.mean(final - diagonal))

    def filled_rows(self) -> List[int]:
        return [t for t in range(1, self.num_tasks + 1) if self.is_row_complete(t)]

    def entries(self) -> List[Tuple[int, int, float]]:
        """Filled cells as (after_task, eval_task, accuracy), row by row."""
        return [
            (t, j, float(self.cells[t - 1, j - 1]))
            for t in range(1, self.num_tasks + 1)
            for j in range(1, t + 1)
            if not np.isnan(self.cells[t - 1, j - 1])
        ]

    @classmethod
    def from_entries(cls, num_tasks: int, entries: Sequence[Sequence[float]]) -> "AccuracyMatrix":
        """Rebuild a matrix from (after_task, eval_task, accuracy) triples."""
        matrix = cls(num_tasks)
        for t, j, accuracy in entries:
            matrix.set(int(t), int(j), float(accuracy))
        return matrix


@dataclass
class SaliencyResult:
    """Per-input attributions and the mask of the most salient entries."""
    attributions: np.ndarray
    top_mask: np.ndarray
    class_idx: int
    task: int


def top_fraction_mask(attributions: np.ndarray, fraction: float = SALIENCY_TOP_FRACTION) -> np.ndarray:
    """Mark the ceil(fraction * d) largest |attribution| entries; ties go to the lowest index."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    d = attributions.shape[0]
    # round first so that e.g. 0.2 * 15 counts as exactly 3
    k = min(d, math.ceil(round(fraction * d, 9)))
    order = np.argsort(-np.abs(attributions), kind="stable")
    mask = np.zeros(d, dtype=bool)
    mask[order[:k]] = True
    return mask


def integrated_gradients(
    params: ParamVector,
    arch: MlpArchitecture,
    x: np.ndarray,
    task: int,
    class_idx: int,
    baseline: Optional[np.ndarray] = None,
    steps: int = IG_STEPS,
    top_fraction: float = SALIENCY_TOP_FRACTION,
) -> SaliencyResult:
    """Integrated gradients of one class logit along the straight path from ``baseline`` to ``x``.

    Uses the right-endpoint Riemann sum with ``steps`` points.

    Raises:
        DimensionMismatchError: If x or baseline do not match the input size
    """
    x = np.asarray(x, dtype=params.values.dtype)
    if x.shape != (arch.input_dim,):
        raise DimensionMismatchError("saliency input", (arch.input_dim,), x.shape)
    baseline = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=x.dtype)
    if baseline.shape != x.shape:
        raise DimensionMismatchError("saliency baseline", x.shape, baseline.shape)
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    classes = arch.num_classes(task)
    if not 0 <= class_idx < classes:
        raise ValueError(f"class_idx {class_idx} outside [0, {classes})")

    diff = x - baseline
    total = np.zeros_like(x)
    for start in range(1, steps + 1, IG_CHUNK):
        alphas = np.arange(start, min(start + IG_CHUNK, steps + 1), dtype=x.dtype) / steps
        path = baseline[None, :] + alphas[:, None] * diff[None, :]
        y = np.zeros((len(alphas), classes), dtype=x.dtype)
        y[:, class_idx] = 1.0
        total += grad_input(params, arch, path, task, y).sum(axis=0)
    attributions = diff * total / steps
    return SaliencyResult(attributions, top_fraction_mask(attributions, top_fraction), class_idx, task)


def overlay_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Copy of ``image`` with the masked pixels set to 1.0."""
    if image.size != mask.size:
        raise DimensionMismatchError("mask overlay", image.size, mask.size)
    out = image.astype(np.float64).copy()
    out.reshape(-1)[mask.reshape(-1)] = 1.0
    return out


def export_pgm(image: np.ndarray, path: Union[str, Path]) -> Path:
    """Write a [0, 1] grayscale image as binary PGM (P5, maxval 255)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DimensionMismatchError("PGM image", "2-D", image.shape)
    if not np.all(np.isfinite(image)) or np.any(image < 0.0) or np.any(image > 1.0):
        raise ValueError("PGM pixel values must lie in [0, 1]")
    h, w = image.shape
    payload = np.round(image * 255.0).astype(np.uint8).tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + payload)
    return path


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    """Read a binary PGM (maxval < 256) back into [0, 1] floats."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    for _ in range(4):
        match = _PGM_TOKEN.match(data, pos)
        if match is None:
            raise ValueError(f"Truncated PGM header: {path}")
        tokens.append(match.group(1))
        pos = match.end()
    if tokens[0] != b"P5":
        raise ValueError(f"Not a binary PGM file: {path}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 256:
        raise ValueError(f"Unsupported PGM maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return raster.reshape(h, w).astype(np.float64) / maxval


def metrics_csv(matrix: AccuracyMatrix) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["after_task", "eval_task", "accuracy"])
    for t, j, acc in matrix.entries():
        writer.writerow([t, j, repr(acc)])
    return buffer.getvalue()


def run_summary(matrix: AccuracyMatrix, metadata: Dict[str, Any]) -> Dict[str, Any]:
    rows = matrix.filled_rows()
    summary = dict(metadata)
    summary["num_tasks"] = matrix.num_tasks
    summary["row_averages"] = {str(t): matrix.row_average(t) for t in rows}
    if matrix.num_tasks in rows:
        summary["final_average"] = matrix.final_average()
        summary["backward_transfer"] = matrix.backward_transfer()
    return summary


def emit_metrics(matrix: AccuracyMatrix, metadata: Dict[str, Any], out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    """Write metrics.csv and the run.json sidecar into ``out_dir``.

    Identical inputs give byte-identical files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / METRICS_FILE
    json_path = out_dir / RUN_FILE
    csv_path.write_text(metrics_csv(matrix), encoding="utf-8")
    summary = json.dumps(run_summary(matrix, metadata), indent=2, sort_keys=True, allow_nan=False)
    json_path.write_text(summary + "\n", encoding="utf-8")
    logger.info(f"Metrics written to {csv_path}")
    return csv_path, json_path
