"""Datasets module.

Reads MNIST-family IDX files and builds the task streams used for
continual learning: Split-MNIST / Split-Fashion-MNIST (binary pairs,
multi-head), Permuted-MNIST (single head) and synthetic 2-D Gaussian
mixtures for small property tests.

Example indices stored on every TaskDataset share one namespace per
stream: training-file examples keep their index, test-file examples are
offset by the training-file size. Splits of a task are therefore disjoint
exactly when their index sets are.
"""

import gzip
import struct
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import multivariate_normal

from core.models import (
    BaseDataset, Split, SyntheticClusterSpec, SyntheticStreamSpec, TaskDataset, TaskSplits, TaskStream,
)
from utils.constants import MNIST_INPUT_DIM, SPLIT_PAIRS, VALIDATION_FRACTION
from utils.logger import get_logger

logger = get_logger(__name__)

IDX_UBYTE = 0x08
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class IdxFormatError(ValueError):
    """Exception raised when an IDX file cannot be parsed.

    Attributes:
        path: File being read
        message: Detailed error message ("bad magic", "short read", ...)
    """

    def __init__(self, message: str, path: Union[str, Path] = ""):
        self.path = str(path)
        self.message = message
        super().__init__(f"{message}: {self.path}" if self.path else message)


class DataValidationError(ValueError):
    """Raised when a dataset or stream violates its invariants."""

    def __init__(self, errors: Union[str, Sequence[str]]):
        self.errors = [errors] if isinstance(errors, str) else list(errors)
        super().__init__("; ".join(self.errors))


# IDX container

def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise IdxFormatError(f"short read (corrupt gzip stream: {e})", path)
    return raw


def parse_idx(data: bytes, path: Union[str, Path] = "") -> np.ndarray:
    """Parse an in-memory IDX container of unsigned bytes into a uint8 array."""
    if len(data) < 4:
        raise IdxFormatError("short read (missing magic)", path)
    (magic,) = struct.unpack(">I", data[:4])
    ndim = magic & 0xFF
    if (magic >> 8) != IDX_UBYTE or ndim < 1:
        raise IdxFormatError(f"bad magic 0x{magic:08x}", path)

    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IdxFormatError("short read (truncated dimension header)", path)
    shape = struct.unpack(f">{ndim}I", data[4:header_end])
    count = int(np.prod(shape))
    if len(data) < header_end + count:
        raise IdxFormatError(f"short read (expected {count} bytes, got {len(data) - header_end})", path)
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header_end).reshape(shape)


def load_idx(path: Union[str, Path], scale: Optional[bool] = None, dtype=np.float32) -> np.ndarray:
    """Load an IDX file (plain or gzip-compressed).

    Args:
        path: File to read
        scale: Divide by 255 into [0, 1]; default scales images (ndim > 1) only
        dtype: Output dtype when scaling

    Returns:
        uint8 array with the stored shape, or the scaled float array

    Raises:
        FileNotFoundError: If the file does not exist
        IdxFormatError: On a wrong magic number ("bad magic") or truncation ("short read")
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"IDX file not found: {path}")
    array = parse_idx(_read_bytes(path), path)
    if scale is None:
        scale = array.ndim > 1
    logger.debug(f"Loaded {path.name}: shape {array.shape}")
    if scale:
        return (array.astype(np.float64) / 255.0).astype(dtype)
    return array


def write_idx(array: np.ndarray, path: Union[str, Path], compress: bool = False) -> Path:
    """Write a uint8-valued array as an IDX file (inverse of load_idx without scaling)."""
    array = np.asarray(array)
    if array.ndim < 1 or array.ndim > 255:
        raise ValueError(f"IDX arrays need 1..255 dimensions, got {array.ndim}")
    if array.dtype != np.uint8:
        if np.any(array != np.round(array)) or np.any(array < 0) or np.any(array > 255):
            raise ValueError("IDX ubyte payload must be integers in [0, 255]")
        array = array.astype(np.uint8)
    data = struct.pack(">I", (IDX_UBYTE << 8) | array.ndim)
    data += struct.pack(f">{array.ndim}I", *array.shape)
    data += np.ascontiguousarray(array).tobytes()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(gzip.compress(data, mtime=0) if compress else data)
    return path


def _find_file(root: Path, name: str, stem: str) -> Path:
    for directory in (root / name, root):
        for candidate in (directory / stem, directory / f"{stem}.gz"):
            if candidate.exists():
                return candidate
    raise FileNotFoundError(f"{stem}[.gz] not found under {root / name} or {root}")


def load_mnist_family(root: Union[str, Path], name: str) -> Tuple[BaseDataset, BaseDataset]:
    """Load the standard four IDX files of an MNIST-family dataset.

    Files are looked up in ``<root>/<name>/`` first, then ``<root>/``.

    Returns:
        (train, test) with images flattened to rows in [0, 1]
    """
    root = Path(root)
    loaded: Dict[str, np.ndarray] = {}
    for key, stem in MNIST_FILES.items():
        loaded[key] = load_idx(_find_file(root, name, stem))

    splits = []
    for prefix in ("train", "test"):
        images = loaded[f"{prefix}_images"]
        labels = loaded[f"{prefix}_labels"].astype(np.int64)
        flat = images.reshape(images.shape[0], -1)
        splits.append(BaseDataset(flat, labels))
        logger.info(f"{name} {prefix}: {flat.shape[0]} images of {flat.shape[1]} pixels")
    return splits[0], splits[1]


# Task construction helpers

def one_hot(labels: np.ndarray, classes: int, dtype=np.float64) -> np.ndarray:
    return np.eye(classes, dtype=dtype)[labels]


def holdout_split(
    indices: np.ndarray, fraction: float, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded (train, val) partition; val holds floor(fraction * n) examples."""
    n_val = int(np.floor(fraction * len(indices)))
    shuffled = indices[rng.permutation(len(indices))]
    return np.sort(shuffled[n_val:]), np.sort(shuffled[:n_val])


def _subsample(indices: np.ndarray, count: Optional[int], rng: np.random.Generator) -> np.ndarray:
    if count is None or count >= len(indices):
        return indices
    return np.sort(indices[rng.permutation(len(indices))[:count]])


def _task_dataset(task_id, X, labels, classes, split, class_map, indices) -> TaskDataset:
    local = np.array([class_map[int(label)] for label in labels], dtype=np.int64)
    return TaskDataset(task_id, X, one_hot(local, classes, dtype=X.dtype), split, dict(class_map), indices)


def validate_task_dataset(dataset: TaskDataset) -> TaskDataset:
    """Raise DataValidationError unless ``dataset`` satisfies its invariants."""
    errors = dataset.validate()
    if errors:
        raise DataValidationError(errors)
    return dataset


def validate_stream(stream: TaskStream) -> TaskStream:
    """Check sequential task ids, dataset invariants and split disjointness."""
    errors = []
    expected = list(range(1, len(stream) + 1))
    if stream.task_ids != expected:
        errors.append(f"task ids must be 1..{len(stream)}, got {stream.task_ids}")
    for splits in stream.tasks:
        for dataset in (splits.train, splits.val, splits.test):
            if dataset.split == Split.VAL and dataset.size == 0:
                continue
            errors.extend(dataset.validate())
        seen = [d.indices for d in (splits.train, splits.val, splits.test) if d.indices is not None]
        for i in range(len(seen)):
            for j in range(i + 1, len(seen)):
                if np.intersect1d(seen[i], seen[j]).size:
                    errors.append(f"task {splits.task_id}: splits share examples")
    if errors:
        raise DataValidationError(errors)
    return stream


# Stream builders

def build_split_stream(
    base_train: BaseDataset,
    base_test: BaseDataset,
    pairs: Sequence[Tuple[int, int]] = SPLIT_PAIRS,
    validation_fraction: float = VALIDATION_FRACTION,
    seed: int = 0,
    train_subsample: Optional[int] = None,
    name: str = "split",
) -> TaskStream:
    """One binary multi-head task per label pair, labels remapped to {0, 1}.

    Raises:
        DataValidationError: If pairs overlap or a label is absent
    """
    flat = [label for pair in pairs for label in pair]
    if any(len(pair) != 2 for pair in pairs) or len(set(flat)) != len(flat):
        raise DataValidationError(f"label pairs must be disjoint pairs, got {list(pairs)}")

    offset = base_train.size
    tasks: List[TaskSplits] = []
    for task_id, pair in enumerate(pairs, start=1):
        class_map = {int(label): i for i, label in enumerate(pair)}
        train_idx = np.flatnonzero(np.isin(base_train.labels, pair))
        test_idx = np.flatnonzero(np.isin(base_test.labels, pair))
        for label in pair:
            if not np.any(base_train.labels == label) or not np.any(base_test.labels == label):
                raise DataValidationError(f"label {label} is absent from the base data")

        rng = np.random.default_rng([seed, task_id])
        train_idx, val_idx = holdout_split(train_idx, validation_fraction, rng)
        train_idx = _subsample(train_idx, train_subsample, rng)
        tasks.append(TaskSplits(
            train=_task_dataset(task_id, base_train.images[train_idx], base_train.labels[train_idx], 2,
                                Split.TRAIN, class_map, train_idx),
            val=_task_dataset(task_id, base_train.images[val_idx], base_train.labels[val_idx], 2,
                              Split.VAL, class_map, val_idx),
            test=_task_dataset(task_id, base_test.images[test_idx], base_test.labels[test_idx], 2,
                               Split.TEST, class_map, test_idx + offset),
        ))
        logger.info(f"Task {task_id} {pair}: {len(train_idx)} train / {len(val_idx)} val / {len(test_idx)} test")
    return TaskStream(tasks, shared_head=False, input_dim=base_train.images.shape[1], name=name)


def permutation_for_task(task_id: int, dim: int, seed: int) -> np.ndarray:
    """Pixel permutation of a Permuted-MNIST task (task 1 is the identity)."""
    if task_id == 1:
        return np.arange(dim)
    return np.random.default_rng([seed, task_id]).permutation(dim)


def build_permuted_stream(
    base_train: BaseDataset,
    base_test: BaseDataset,
    num_tasks: int,
    seed: int = 0,
    validation_fraction: float = VALIDATION_FRACTION,
    train_subsample: Optional[int] = None,
    name: str = "permuted",
) -> TaskStream:
    """T tasks sharing one 10-class head, each a fixed pixel permutation."""
    if num_tasks < 1:
        raise ValueError(f"num_tasks must be >= 1, got {num_tasks}")
    dim = base_train.images.shape[1]
    classes = int(max(base_train.labels.max(), base_test.labels.max())) + 1
    class_map = {c: c for c in range(classes)}

    rng = np.random.default_rng([seed, 0])
    train_idx, val_idx = holdout_split(np.arange(base_train.size), validation_fraction, rng)
    train_idx = _subsample(train_idx, train_subsample, rng)
    test_idx = np.arange(base_test.size)

    tasks: List[TaskSplits] = []
    for task_id in range(1, num_tasks + 1):
        perm = permutation_for_task(task_id, dim, seed)
        tasks.append(TaskSplits(
            train=_task_dataset(task_id, base_train.images[train_idx][:, perm], base_train.labels[train_idx],
                                classes, Split.TRAIN, class_map, train_idx),
            val=_task_dataset(task_id, base_train.images[val_idx][:, perm], base_train.labels[val_idx],
                              classes, Split.VAL, class_map, val_idx),
            test=_task_dataset(task_id, base_test.images[:, perm], base_test.labels, classes,
                               Split.TEST, class_map, test_idx + base_train.size),
        ))
    logger.info(f"Permuted stream: {num_tasks} tasks, {len(train_idx)} train examples each")
    return TaskStream(tasks, shared_head=True, input_dim=dim, name=name)


def _check_cluster(cluster: SyntheticClusterSpec, classes: int, where: str) -> np.ndarray:
    cov = np.asarray(cluster.cov, dtype=np.float64)
    center = np.asarray(cluster.center, dtype=np.float64)
    if center.shape != (2,) or cov.shape != (2, 2):
        raise DataValidationError(f"{where}: clusters need a 2-D center and a 2x2 covariance")
    if not np.allclose(cov, cov.T):
        raise DataValidationError(f"{where}: covariance must be symmetric")
    if np.min(np.linalg.eigvalsh(cov)) <= 0:
        raise DataValidationError(f"{where}: degenerate covariance (not positive definite)")
    if not 0 <= cluster.label < classes:
        raise DataValidationError(f"{where}: label {cluster.label} outside [0, {classes})")
    if cluster.count < 1:
        raise DataValidationError(f"{where}: count must be >= 1")
    return cov


def sample_synthetic_raw(spec: SyntheticStreamSpec) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Raw (unsquashed) points and integer labels per task, cluster by cluster."""
    rng = np.random.default_rng(spec.seed)
    raw = []
    for t, clusters in enumerate(spec.tasks, start=1):
        points, labels = [], []
        for k, cluster in enumerate(clusters):
            cov = _check_cluster(cluster, spec.classes, f"task {t} cluster {k}")
            points.append(rng.multivariate_normal(cluster.center, cov, size=cluster.count))
            labels.append(np.full(cluster.count, cluster.label, dtype=np.int64))
        if not clusters:
            raise DataValidationError(f"task {t} has no clusters")
        raw.append((np.vstack(points), np.concatenate(labels)))
    return raw


def build_synthetic_stream(
    spec: SyntheticStreamSpec,
    validation_fraction: float = VALIDATION_FRACTION,
    train_subsample: Optional[int] = None,
) -> TaskStream:
    """Seeded 2-D Gaussian-mixture tasks squashed affinely into [0, 1]^2.

    One affine map (global per-axis min/max over all tasks) is shared by
    every task and recorded on the stream.

    Raises:
        DataValidationError: For degenerate covariances or bad labels
    """
    if not spec.tasks:
        raise DataValidationError("synthetic stream needs at least one task")
    raw = sample_synthetic_raw(spec)
    everything = np.vstack([points for points, _ in raw])
    offset = everything.min(axis=0)
    scale = everything.max(axis=0) - offset
    scale[scale == 0] = 1.0

    class_map = {c: c for c in range(spec.classes)}
    tasks: List[TaskSplits] = []
    for task_id, (points, labels) in enumerate(raw, start=1):
        X = np.clip((points - offset) / scale, 0.0, 1.0)
        rng = np.random.default_rng([spec.seed, task_id])
        order = rng.permutation(len(labels))
        n_test = max(1, int(np.floor(spec.test_fraction * len(labels))))
        test_idx = np.sort(order[:n_test])
        train_idx, val_idx = holdout_split(np.sort(order[n_test:]), validation_fraction, rng)
        train_idx = _subsample(train_idx, train_subsample, rng)
        tasks.append(TaskSplits(
            train=_task_dataset(task_id, X[train_idx], labels[train_idx], spec.classes, Split.TRAIN,
                                class_map, train_idx),
            val=_task_dataset(task_id, X[val_idx], labels[val_idx], spec.classes, Split.VAL, class_map, val_idx),
            test=_task_dataset(task_id, X[test_idx], labels[test_idx], spec.classes, Split.TEST,
                               class_map, test_idx),
        ))
    return TaskStream(tasks, shared_head=spec.shared_head, input_dim=2, name="synthetic",
                      input_offset=offset, input_scale=scale)


def synthetic_bayes_predict(clusters: Sequence[SyntheticClusterSpec], raw_x: np.ndarray, classes: int) -> np.ndarray:
    """Bayes-optimal labels under the generating mixture (cluster counts as priors)."""
    scores = np.zeros((raw_x.shape[0], classes))
    for cluster in clusters:
        density = multivariate_normal(cluster.center, np.asarray(cluster.cov)).pdf(raw_x)
        scores[:, cluster.label] += cluster.count * np.atleast_1d(density)
    return np.argmax(scores, axis=1)


def synthetic_bayes_accuracy(spec: SyntheticStreamSpec, stream: TaskStream, task_id: int,
                             split: Split = Split.TEST) -> float:
    """Accuracy of the generating model's Bayes classifier on one split."""
    splits = stream.tasks[task_id - 1]
    dataset = {Split.TRAIN: splits.train, Split.VAL: splits.val, Split.TEST: splits.test}[split]
    raw_x = dataset.X * stream.input_scale + stream.input_offset
    predicted = synthetic_bayes_predict(spec.tasks[task_id - 1], raw_x, spec.classes)
    return float(np.mean(predicted == dataset.labels))


def default_synthetic_spec(seed: int = 0, count: int = 200) -> SyntheticStreamSpec:
    """Two shared-head tasks whose decision rules disagree.

    Task 1 separates along the first axis; task 2 lives higher up the
    second axis with the label sides swapped, so fitting task 2 alone
    overwrites the rule learned for task 1.
    """
    cov = [[0.25, 0.0], [0.0, 0.25]]
    return SyntheticStreamSpec(
        tasks=[
            [SyntheticClusterSpec([-2.0, 0.0], cov, 0, count), SyntheticClusterSpec([2.0, 0.0], cov, 1, count)],
            [SyntheticClusterSpec([-2.0, 4.0], cov, 1, count), SyntheticClusterSpec([2.0, 4.0], cov, 0, count)],
        ],
        classes=2,
        shared_head=True,
        seed=seed,
    )


DATASET_SOURCES = {"split-mnist": "mnist", "permuted": "mnist", "split-fashion": "fashion-mnist"}


def build_stream(
    dataset: str,
    data_root: Optional[Union[str, Path]] = None,
    num_tasks: int = 10,
    seed: int = 0,
    validation_fraction: float = VALIDATION_FRACTION,
    train_subsample: Optional[int] = None,
    synthetic: Optional[SyntheticStreamSpec] = None,
) -> TaskStream:
    """Build the stream named by a run configuration's ``dataset`` field."""
    if dataset == "synthetic":
        stream = build_synthetic_stream(synthetic or default_synthetic_spec(seed), validation_fraction,
                                        train_subsample)
    else:
        if dataset not in DATASET_SOURCES:
            raise ValueError(f"Unknown dataset {dataset!r}")
        if data_root is None:
            raise FileNotFoundError("No data root given for an MNIST-family dataset")
        train, test = load_mnist_family(data_root, DATASET_SOURCES[dataset])
        if train.images.shape[1] != MNIST_INPUT_DIM:
            logger.warning(f"Unexpected image size {train.images.shape[1]} (expected {MNIST_INPUT_DIM})")
        if dataset == "permuted":
            stream = build_permuted_stream(train, test, num_tasks, seed, validation_fraction, train_subsample)
        else:
            stream = build_split_stream(train, test, SPLIT_PAIRS, validation_fraction, seed,
                                        train_subsample, name=dataset)
    return validate_stream(stream)
