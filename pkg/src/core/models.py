"""Data models for the BGR toolkit.

This module contains the configuration dataclasses and the plain data
containers shared by the trainer, the data pipeline and the CLI. Config
classes are JSON-serializable through dataclasses-json and expose
``validate()`` returning a list of human-readable problems.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from dataclasses_json import dataclass_json

from utils.constants import (
    DATASETS, DEFAULT_BATCH_SIZE, DEFAULT_CHAIN_BATCH, DEFAULT_EPOCHS, DEFAULT_EWC_LAMBDA,
    DEFAULT_FISHER_SAMPLES, DEFAULT_HIDDEN_DIMS, DEFAULT_L2_LAMBDA, DEFAULT_PRECISION,
    METHODS, SUPPORTED_PRECISIONS, DATASET_DEFAULTS, VALIDATION_FRACTION,
)


class ConfigValidationError(ValueError):
    """Raised when a configuration fails validation.

    Attributes:
        errors: One message per offending field, each naming the field
    """

    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("Invalid configuration:\n  " + "\n  ".join(self.errors))


class Method(Enum):
    """Training methods: the proposed one, its ablations and the baselines."""
    SGD = "SGD"
    ALL_DATA = "ALL_DATA"
    EWC = "EWC"
    VCL = "VCL"
    GEN = "GEN"
    GEN_L2 = "GEN_L2"
    BGR = "BGR"

    @property
    def is_bayesian(self) -> bool:
        return self in (Method.VCL, Method.BGR)

    @property
    def is_generative(self) -> bool:
        return self in (Method.GEN, Method.GEN_L2, Method.BGR)


class Split(Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass_json
@dataclass
class SgldConfig:
    """Gibbs-Langevin sampler settings.

    Attributes:
        steps: Number of Langevin steps S per generation call
        base_step: eta_0; step s uses eta_0 / s when step_decay is set
        noise_std: Fixed noise standard deviation ("fixed" schedule)
        reinit_rate: Probability of starting a chain from uniform noise
        clamp_lo, clamp_hi: Box the samples are clamped into
        chain_batch: Number of chains per call
        buffer_size: Replay buffer capacity
        noise_schedule: "fixed" (noise_std) or "langevin" (sqrt(eta_s))
        step_decay: Use eta_0 / s instead of a constant eta_0
        clamp: Clamp after every step
        reset_buffer_per_task: Empty the buffer when a new task starts
    """
    steps: int = 60
    base_step: float = 10.0
    noise_std: float = 5e-3
    reinit_rate: float = 0.05
    clamp_lo: float = 0.0
    clamp_hi: float = 1.0
    chain_batch: int = DEFAULT_CHAIN_BATCH
    buffer_size: int = 10000
    noise_schedule: str = "fixed"
    step_decay: bool = True
    clamp: bool = True
    reset_buffer_per_task: bool = False

    def validate(self) -> List[str]:
        errors = []
        if self.steps < 1:
            errors.append(f"sgld.steps must be >= 1, got {self.steps}")
        if not self.base_step > 0:
            errors.append(f"sgld.base_step must be > 0, got {self.base_step}")
        if self.noise_std < 0:
            errors.append(f"sgld.noise_std must be >= 0, got {self.noise_std}")
        if not 0.0 <= self.reinit_rate <= 1.0:
            errors.append(f"sgld.reinit_rate must be in [0, 1], got {self.reinit_rate}")
        if not self.clamp_lo < self.clamp_hi:
            errors.append(f"sgld.clamp_lo must be < sgld.clamp_hi, got {self.clamp_lo} >= {self.clamp_hi}")
        if self.chain_batch < 1:
            errors.append(f"sgld.chain_batch must be >= 1, got {self.chain_batch}")
        if self.buffer_size < 1:
            errors.append(f"sgld.buffer_size must be >= 1, got {self.buffer_size}")
        if self.noise_schedule not in ("fixed", "langevin"):
            errors.append(f"sgld.noise_schedule must be 'fixed' or 'langevin', got {self.noise_schedule!r}")
        return errors


@dataclass_json
@dataclass
class TrainConfig:
    """Optimization settings for one run.

    Attributes:
        method: One of Method's values
        lr: Adam learning rate
        adam_betas: (beta1, beta2)
        epochs: Passes over each task's training split
        batch_size: Minibatch size
        posterior_samples: Monte-Carlo parameter samples K per minibatch
        gamma: Weight of the generative (contrastive divergence) term
        ewc_lambda: EWC penalty coefficient
        l2_lambda: Pull toward the previous task's solution (GEN_L2)
        kl_mode: "batch" (batch_size / N per minibatch) or "per_example" (1 / N)
        seed: Seed for every random stream of the run
        precision: "float64" or "float32"
        mc_eval_samples: 0 evaluates at the posterior mean, >0 averages predictions
        fisher_sample_cap: Examples used for the EWC Fisher estimate
        prior_std: Standard deviation of the N(0, s^2) prior
    """
    method: str = "BGR"
    lr: float = 1e-3
    adam_betas: Tuple[float, float] = (0.0, 0.999)
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    posterior_samples: int = 10
    gamma: float = 1.0
    ewc_lambda: float = DEFAULT_EWC_LAMBDA
    l2_lambda: float = DEFAULT_L2_LAMBDA
    kl_mode: str = "batch"
    seed: int = 0
    precision: str = DEFAULT_PRECISION
    mc_eval_samples: int = 0
    fisher_sample_cap: int = DEFAULT_FISHER_SAMPLES
    prior_std: float = 1.0

    @property
    def method_enum(self) -> Method:
        return Method(self.method)

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def validate(self) -> List[str]:
        errors = []
        if self.method not in METHODS:
            errors.append(f"train.method must be one of {METHODS}, got {self.method!r}")
        if not self.lr > 0:
            errors.append(f"train.lr must be > 0, got {self.lr}")
        betas = tuple(self.adam_betas)
        if len(betas) != 2 or not all(0.0 <= b < 1.0 for b in betas):
            errors.append(f"train.adam_betas must be two values in [0, 1), got {self.adam_betas}")
        if self.epochs < 1:
            errors.append(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            errors.append(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.posterior_samples < 1:
            errors.append(f"train.posterior_samples must be >= 1, got {self.posterior_samples}")
        for name in ("gamma", "ewc_lambda", "l2_lambda"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                errors.append(f"train.{name} must be finite and >= 0, got {value}")
        if self.kl_mode not in ("batch", "per_example"):
            errors.append(f"train.kl_mode must be 'batch' or 'per_example', got {self.kl_mode!r}")
        if self.precision not in SUPPORTED_PRECISIONS:
            errors.append(f"train.precision must be one of {SUPPORTED_PRECISIONS}, got {self.precision!r}")
        if self.mc_eval_samples < 0:
            errors.append(f"train.mc_eval_samples must be >= 0, got {self.mc_eval_samples}")
        if self.fisher_sample_cap < 1:
            errors.append(f"train.fisher_sample_cap must be >= 1, got {self.fisher_sample_cap}")
        if not self.prior_std > 0:
            errors.append(f"train.prior_std must be > 0, got {self.prior_std}")
        return errors


@dataclass_json
@dataclass
class ArchitectureConfig:
    """Hidden layer widths; input size and heads follow from the dataset."""
    hidden_dims: List[int] = field(default_factory=lambda: list(DEFAULT_HIDDEN_DIMS))

    def validate(self) -> List[str]:
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            return [f"arch.hidden_dims must be a non-empty list of positive ints, got {self.hidden_dims}"]
        return []


@dataclass_json
@dataclass
class SyntheticClusterSpec:
    """One Gaussian component of a synthetic task."""
    center: List[float]
    cov: List[List[float]]
    label: int
    count: int = 200


@dataclass_json
@dataclass
class SyntheticStreamSpec:
    """Per-task 2-D Gaussian mixtures for desk-scale property tests.

    Attributes:
        tasks: One list of clusters per task
        classes: Number of classes of every task
        shared_head: Single head shared by the tasks
        seed: Sampling seed
        test_fraction: Share of each task's samples kept for testing
    """
    tasks: List[List[SyntheticClusterSpec]]
    classes: int = 2
    shared_head: bool = True
    seed: int = 0
    test_fraction: float = 0.25


@dataclass_json
@dataclass
class RunConfig:
    """Everything one CLI run needs.

    Attributes:
        dataset: permuted | split-mnist | split-fashion | synthetic
        data_root: Directory holding the IDX files (or $BGR_DATA_ROOT)
        out_dir: Output directory (metrics.csv, run.json, checkpoints/...)
        tasks: Number of tasks for the permuted stream (others are fixed)
        train_subsample: Keep only this many training examples per task
        validation_fraction: Seeded holdout carved from each training split
        resume_from: Checkpoint to continue a sequence from
    """
    dataset: str = "split-mnist"
    data_root: Optional[str] = None
    out_dir: str = "runs/default"
    tasks: int = 10
    train_subsample: Optional[int] = None
    validation_fraction: float = VALIDATION_FRACTION
    resume_from: Optional[str] = None
    arch: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sgld: SgldConfig = field(default_factory=SgldConfig)
    synthetic: Optional[SyntheticStreamSpec] = None

    @classmethod
    def for_dataset(cls, dataset: str) -> "RunConfig":
        """Defaults of the hyperparameter table column for ``dataset``."""
        config = cls(dataset=dataset)
        column = DATASET_DEFAULTS.get(dataset)
        if column is None:
            return config
        config.train.lr = column["lr"]
        config.train.adam_betas = tuple(column["adam_betas"])
        config.train.posterior_samples = column["posterior_samples"]
        config.train.gamma = column["gamma"]
        config.sgld.buffer_size = column["buffer_size"]
        config.sgld.base_step = column["sgld_step"]
        config.sgld.reinit_rate = column["reinit_rate"]
        config.sgld.noise_std = column["sgld_noise"]
        config.sgld.steps = column["sgld_steps"]
        return config

    def validate(self) -> List[str]:
        """Validate every field before any work starts.

        Returns:
            List of error messages, empty if valid.
        """
        errors = []
        if self.dataset not in DATASETS:
            errors.append(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.tasks < 1:
            errors.append(f"tasks must be >= 1, got {self.tasks}")
        if self.train_subsample is not None and self.train_subsample < 1:
            errors.append(f"train_subsample must be >= 1, got {self.train_subsample}")
        if not 0.0 <= self.validation_fraction < 1.0:
            errors.append(f"validation_fraction must be in [0, 1), got {self.validation_fraction}")
        if not self.out_dir:
            errors.append("out_dir cannot be empty")
        if self.dataset != "synthetic" and not self.data_root:
            errors.append("data_root is required for MNIST-family datasets (--data-root or $BGR_DATA_ROOT)")
        errors.extend(self.arch.validate())
        errors.extend(self.train.validate())
        errors.extend(self.sgld.validate())
        return errors

    def raise_if_invalid(self) -> None:
        errors = self.validate()
        if errors:
            raise ConfigValidationError(errors)


@dataclass
class LabeledBatch:
    """Inputs with one-hot labels and optional per-row probability weights.

    Without weights every estimator uses the plain batch mean; with weights
    (summing to 1) the batch stands for an exact expectation.
    """
    x: np.ndarray
    y: np.ndarray
    weights: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.x.shape[0]

    def row_weights(self) -> np.ndarray:
        n = self.x.shape[0]
        if self.weights is None:
            return np.full(n, 1.0 / n, dtype=self.x.dtype)
        return self.weights


@dataclass
class TaskDataset:
    """One split of one classification task.

    Attributes:
        task_id: Sequential task id starting at 1
        X: (N, d) inputs in [0, 1]
        Y: (N, C) one-hot labels
        split: Split tag
        class_map: Original label -> head-local index
        indices: Example indices into the source split (disjointness checks)
    """
    task_id: int
    X: np.ndarray
    Y: np.ndarray
    split: Split
    class_map: Dict[int, int] = field(default_factory=dict)
    indices: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.X.shape[0]

    @property
    def num_classes(self) -> int:
        return self.Y.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.Y, axis=1)

    def as_batch(self) -> LabeledBatch:
        return LabeledBatch(self.X, self.Y)

    def astype(self, dtype) -> "TaskDataset":
        return TaskDataset(self.task_id, self.X.astype(dtype, copy=False), self.Y.astype(dtype, copy=False),
                           self.split, dict(self.class_map), self.indices)

    def validate(self) -> List[str]:
        errors = []
        if self.X.ndim != 2 or self.X.shape[0] == 0:
            errors.append(f"task {self.task_id} {self.split.value}: X must be a non-empty 2-D array")
            return errors
        if self.Y.shape[0] != self.X.shape[0]:
            errors.append(f"task {self.task_id} {self.split.value}: X/Y row counts differ")
        if np.any(self.X < 0.0) or np.any(self.X > 1.0):
            errors.append(f"task {self.task_id} {self.split.value}: inputs outside [0, 1]")
        if not (np.all((self.Y == 0) | (self.Y == 1)) and np.all(self.Y.sum(axis=1) == 1)):
            errors.append(f"task {self.task_id} {self.split.value}: labels are not one-hot")
        return errors


@dataclass
class TaskSplits:
    """Train/validation/test datasets of one task."""
    train: TaskDataset
    val: TaskDataset
    test: TaskDataset

    @property
    def task_id(self) -> int:
        return self.train.task_id


@dataclass
class TaskStream:
    """Ordered tasks plus the head topology they need.

    ``input_offset``/``input_scale`` record the affine map raw -> [0, 1]
    for streams generated in raw coordinates (x = (raw - offset) / scale).
    """
    tasks: List[TaskSplits]
    shared_head: bool
    input_dim: int
    name: str = ""
    input_offset: Optional[np.ndarray] = None
    input_scale: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def task_ids(self) -> List[int]:
        return [t.task_id for t in self.tasks]

    def heads(self) -> Dict[int, int]:
        return {t.task_id: t.train.num_classes for t in self.tasks}


@dataclass
class BaseDataset:
    """Flattened images in [0, 1] with integer labels (one split of a source file pair)."""
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"Image/label count mismatch: {self.images.shape[0]} vs {self.labels.shape[0]}"
            )

    @property
    def size(self) -> int:
        return self.images.shape[0]
