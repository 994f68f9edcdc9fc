"""Experiment Controller - Orchestrates training, evaluation, sampling and saliency runs.

Connects a resolved RunConfig to the data pipeline, the trainer and the
analysis helpers, and owns the output directory layout:

    <out>/metrics.csv, run.json, train.log, eval.csv
    <out>/checkpoints/task_<t>.ckpt
    <out>/samples/*.pgm
    <out>/saliency/attributions.csv, *.pgm
"""

import csv
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from core.analysis import AccuracyMatrix, emit_metrics, export_pgm, integrated_gradients, overlay_mask
from core.datasets import DataValidationError, IdxFormatError, build_stream
from core.models import ConfigValidationError, RunConfig, SgldConfig, TaskStream, TrainConfig
from core.persistence import Checkpoint, CheckpointError, CheckpointRepository
from core.sampler import SamplerDivergenceError, sample
from core.tensor_diff import MlpArchitecture, ParamVector, UnknownHeadError
from core.trainer import ContinualTrainer, TrainerState, TrainingDivergenceError, UnknownMethodError
from utils.constants import (
    CHECKPOINT_DIR, EVAL_FILE, EXIT_FAILURE, EXIT_OK, EXIT_USAGE, IG_STEPS, LOG_FILE, SALIENCY_DIR,
    SALIENCY_TOP_FRACTION, SAMPLES_DIR, checkpoint_name,
)
from utils.logger import add_file_handler, get_logger, remove_file_handler

logger = get_logger(__name__)

USAGE_ERRORS = (ConfigValidationError, UnknownHeadError, UnknownMethodError, DataValidationError, FileNotFoundError)
RUN_ERRORS = (TrainingDivergenceError, SamplerDivergenceError, CheckpointError, IdxFormatError, OSError)


def image_shape(input_dim: int) -> tuple:
    """Square images when the input size allows it, a single row otherwise."""
    side = math.isqrt(input_dim)
    return (side, side) if side * side == input_dim else (1, input_dim)


def checkpoint_params(checkpoint: Checkpoint) -> ParamVector:
    """Evaluation parameters stored in a checkpoint (posterior mean or point estimate)."""
    key = "mu" if checkpoint.kind == "posterior" else "theta"
    if key not in checkpoint.arrays:
        raise CheckpointError(f"{checkpoint.kind} checkpoint has no {key!r} array")
    return ParamVector(checkpoint.arrays[key], checkpoint.arch.layout)


class ExperimentController:
    """Runs one CLI command against a resolved configuration."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.out_dir = Path(config.out_dir)

    def build_stream(self) -> TaskStream:
        c = self.config
        return build_stream(c.dataset, c.data_root, c.tasks, c.train.seed, c.validation_fraction,
                            c.train_subsample, c.synthetic)

    def build_architecture(self, stream: TaskStream) -> MlpArchitecture:
        return MlpArchitecture(stream.input_dim, tuple(self.config.arch.hidden_dims), stream.heads(),
                               shared_head=stream.shared_head)

    def _metadata(self, stream: TaskStream) -> dict:
        return {
            "config": self.config.to_dict(encode_json=True),
            "dataset": self.config.dataset,
            "method": self.config.train.method,
            "seed": self.config.train.seed,
            "stream": {"name": stream.name, "tasks": len(stream), "shared_head": stream.shared_head},
        }

    def train(self) -> AccuracyMatrix:
        """Train the whole stream, checkpointing and emitting metrics after every task.

        A fresh run also writes ``task_0.ckpt`` holding the untrained prior.
        """
        self.config.raise_if_invalid()
        self.out_dir.mkdir(parents=True, exist_ok=True)
        handler = add_file_handler(self.out_dir / LOG_FILE)
        try:
            stream = self.build_stream()
            arch = self.build_architecture(stream)
            trainer = ContinualTrainer(arch, self.config.train, self.config.sgld)
            method = self.config.train.method
            checkpoint_dir = self.out_dir / CHECKPOINT_DIR
            if self.config.resume_from:
                state, restored = self._resume(arch, len(stream))
            else:
                state, restored = trainer.init_state(), None
                CheckpointRepository.save_checkpoint(
                    state.to_checkpoint(method, self._checkpoint_metadata(None)), checkpoint_dir / checkpoint_name(0)
                )

            metadata = self._metadata(stream)

            def on_task_end(t: int, task_state: TrainerState, matrix: AccuracyMatrix) -> None:
                CheckpointRepository.save_checkpoint(
                    task_state.to_checkpoint(method, self._checkpoint_metadata(matrix)),
                    checkpoint_dir / checkpoint_name(t),
                )
                emit_metrics(matrix, self._progress(metadata, task_state), self.out_dir)

            logger.info(f"Training {method} on {self.config.dataset} "
                        f"({len(stream)} tasks, {arch.num_params} parameters)")
            matrix, artifacts = trainer.run_sequence(stream, state, on_task_end=on_task_end, matrix=restored)
            emit_metrics(matrix, self._progress(metadata, artifacts.state), self.out_dir)
            if matrix.is_row_complete(len(stream)):
                logger.info(f"Final average accuracy: {matrix.final_average():.4f}")
            return matrix
        finally:
            remove_file_handler(handler)

    def _checkpoint_metadata(self, matrix: Optional[AccuracyMatrix]) -> dict:
        entries = [list(entry) for entry in matrix.entries()] if matrix is not None else []
        return {"dataset": self.config.dataset, "seed": self.config.train.seed, "accuracy": entries}

    @staticmethod
    def _progress(metadata: dict, state: TrainerState) -> dict:
        return dict(
            metadata,
            wall_clock_seconds={str(t): seconds for t, seconds in sorted(state.wall_clock.items())},
            validation_accuracy={str(t): acc for t, acc in sorted(state.validation.items())},
        )

    def _resume(self, arch: MlpArchitecture, num_tasks: int) -> Tuple[TrainerState, AccuracyMatrix]:
        checkpoint = CheckpointRepository.load_checkpoint(self.config.resume_from)
        if checkpoint.arch != arch:
            raise CheckpointError("Checkpoint architecture does not match the configured stream")
        if checkpoint.method != self.config.train.method:
            raise CheckpointError(f"Checkpoint was trained with {checkpoint.method}, not {self.config.train.method}")
        try:
            matrix = AccuracyMatrix.from_entries(num_tasks, checkpoint.metadata.get("accuracy", []))
        except (IndexError, TypeError, ValueError) as e:
            raise CheckpointError(f"Checkpoint accuracy rows do not fit the stream: {e}")
        logger.info(f"Resuming after tasks {checkpoint.trained_tasks}")
        return TrainerState.from_checkpoint(checkpoint, self.config.train), matrix

    def evaluate(self, checkpoint_path: str) -> Dict[int, float]:
        """Test accuracy of a checkpoint on every task it has trained; writes eval.csv."""
        checkpoint = CheckpointRepository.load_checkpoint(checkpoint_path)
        stream = self.build_stream()
        config = TrainConfig.from_dict(self.config.train.to_dict())
        config.method = checkpoint.method
        trainer = ContinualTrainer(checkpoint.arch, config, self.config.sgld)
        state = TrainerState.from_checkpoint(checkpoint, config)

        results: Dict[int, float] = {}
        for splits in stream.tasks:
            if splits.task_id in checkpoint.trained_tasks:
                results[splits.task_id] = trainer.evaluate(state, splits.test)
                logger.info(f"Task {splits.task_id}: accuracy {results[splits.task_id]:.4f}")

        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / EVAL_FILE, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["task", "accuracy"])
            for task, acc in results.items():
                writer.writerow([task, repr(acc)])
        return results

    def sample(self, checkpoint_path: str, count: int, out_dir: Optional[str] = None,
               task: Optional[int] = None) -> List[Path]:
        """Generate ``count`` images from fresh noise chains at the evaluation parameters.

        Labels are held fixed, cycling through the classes of the head.
        """
        checkpoint = CheckpointRepository.load_checkpoint(checkpoint_path)
        arch = checkpoint.arch
        params = checkpoint_params(checkpoint)
        task = task if task is not None else (checkpoint.trained_tasks[-1] if checkpoint.trained_tasks
                                              else min(arch.heads))
        classes = arch.num_classes(task)
        target = Path(out_dir) if out_dir else self.out_dir / SAMPLES_DIR
        if count <= 0:
            return []

        labels = np.arange(count) % classes
        fixed = np.eye(classes)[labels]
        sgld = SgldConfig.from_dict(self.config.sgld.to_dict())
        sgld.chain_batch = count
        rng = np.random.default_rng(self.config.train.seed)
        x, _ = sample(params, arch, task, None, sgld, rng, fixed_labels=fixed)

        shape = image_shape(arch.input_dim)
        paths = [
            export_pgm(x[i].reshape(shape), target / f"sample_{i:04d}_class{labels[i]}.pgm")
            for i in range(count)
        ]
        logger.info(f"Wrote {len(paths)} samples to {target}")
        return paths

    def saliency(self, checkpoint_path: str, task: int, count: int = 10, out_dir: Optional[str] = None,
                 fraction: float = SALIENCY_TOP_FRACTION, steps: int = IG_STEPS) -> Path:
        """Integrated-gradients attributions and top-fraction masks for test images of ``task``."""
        checkpoint = CheckpointRepository.load_checkpoint(checkpoint_path)
        arch = checkpoint.arch
        arch.head_key(task)
        params = checkpoint_params(checkpoint)
        stream = self.build_stream()
        if task not in stream.task_ids:
            raise UnknownHeadError(task)
        test = stream.tasks[stream.task_ids.index(task)].test.astype(np.float64)

        target = Path(out_dir) if out_dir else self.out_dir / SALIENCY_DIR
        target.mkdir(parents=True, exist_ok=True)
        shape = image_shape(arch.input_dim)
        csv_path = target / "attributions.csv"
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["image", "example", "label", "pixel", "attribution", "top_mask"])
            for i in range(min(count, test.size)):
                label = int(test.labels[i])
                result = integrated_gradients(params, arch, test.X[i], task, label, steps=steps,
                                              top_fraction=fraction)
                for pixel, (a, m) in enumerate(zip(result.attributions, result.top_mask)):
                    writer.writerow([i, int(test.indices[i]) if test.indices is not None else i,
                                     label, pixel, repr(float(a)), int(m)])
                export_pgm(overlay_mask(test.X[i].reshape(shape), result.top_mask.reshape(shape)),
                           target / f"task{task}_image{i:03d}_mask.pgm")
        logger.info(f"Saliency written to {csv_path}")
        return csv_path


def run_command(action: Callable[[], object], name: str) -> int:
    """Execute ``action`` and translate failures into exit codes."""
    logger.info(f"{name}: start")
    try:
        action()
    except USAGE_ERRORS as e:
        logger.error(f"{name}: {e}")
        return EXIT_USAGE
    except RUN_ERRORS as e:
        logger.error(f"{name} failed: {e}")
        return EXIT_FAILURE
    logger.info(f"{name}: done")
    return EXIT_OK


def cmd_train(config: RunConfig) -> int:
    return run_command(lambda: ExperimentController(config).train(), "train")


def cmd_eval(config: RunConfig, checkpoint: str) -> int:
    return run_command(lambda: ExperimentController(config).evaluate(checkpoint), "eval")


def cmd_sample(config: RunConfig, checkpoint: str, count: int, out_dir: Optional[str] = None,
               task: Optional[int] = None) -> int:
    return run_command(lambda: ExperimentController(config).sample(checkpoint, count, out_dir, task), "sample")


def cmd_saliency(config: RunConfig, checkpoint: str, task: int, out_dir: Optional[str] = None,
                 count: int = 10, fraction: float = SALIENCY_TOP_FRACTION, steps: int = IG_STEPS) -> int:
    return run_command(
        lambda: ExperimentController(config).saliency(checkpoint, task, count, out_dir, fraction, steps),
        "saliency",
    )
