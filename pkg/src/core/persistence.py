"""Persistence Layer for training checkpoints.

Implements the versioned checkpoint file:

    offset  type                      value
    0       8 bytes                   b"BGRCKPT\\0" magic
    8       uint32 little-endian      format version (1)
    12      uint32 little-endian      header length H
    16      H bytes UTF-8 JSON        kind, method, architecture, layout, tasks, arrays
    16+H    little-endian float64     arrays in header order (C order)

Writes are atomic (temp file in the same directory, fsync, rename).
"""

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from core.tensor_diff import MlpArchitecture, ParamLayout
from utils.logger import get_logger

logger = get_logger(__name__)

MAGIC = b"BGRCKPT\0"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<II")

# Arrays every checkpoint kind must carry, one entry per parameter
PARAM_ARRAYS = {"posterior": ("mu", "rho"), "point": ("theta",)}
_PER_PARAMETER_PREFIXES = ("fisher_", "anchor_")


class CheckpointError(Exception):
    """Raised when a checkpoint cannot be written, read or parsed."""
    pass


def _check_parameter_arrays(kind: str, arch: MlpArchitecture, arrays: Dict[str, np.ndarray],
                            filepath: Path) -> None:
    expected = (arch.layout.size,)
    for name in PARAM_ARRAYS[kind]:
        if name not in arrays:
            raise CheckpointError(f"{kind} checkpoint has no {name!r} array: {filepath}")
    for name, array in arrays.items():
        if name in PARAM_ARRAYS[kind] or name.startswith(_PER_PARAMETER_PREFIXES):
            if array.shape != expected:
                raise CheckpointError(
                    f"Array {name!r} has shape {array.shape}, expected {expected} in {filepath}"
                )


@dataclass
class Checkpoint:
    """Everything needed to evaluate, sample from or resume a run.

    Attributes:
        kind: "posterior" (arrays mu, rho) or "point" (array theta)
        method: Training method name
        arch: Architecture the parameters belong to
        trained_tasks: Tasks completed so far, in order
        arrays: Named float arrays (parameters, buffer_x/buffer_y, EWC anchors)
        metadata: Free-form JSON-serializable run information
    """
    kind: str
    method: str
    arch: MlpArchitecture
    trained_tasks: List[int]
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "kind": self.kind,
            "method": self.method,
            "architecture": self.arch.to_dict(),
            "layout": self.arch.layout.to_list(),
            "trained_tasks": list(self.trained_tasks),
            "arrays": [
                {"name": name, "dtype": "<f8", "shape": list(array.shape)}
                for name, array in self.arrays.items()
            ],
            "metadata": self.metadata,
        }


class CheckpointRepository:
    """Handles storage and retrieval of Checkpoints with atomic safety."""

    @staticmethod
    def save_checkpoint(checkpoint: Checkpoint, filepath: Union[str, Path]) -> None:
        """Serialize ``checkpoint`` to ``filepath`` atomically.

        Raises:
            CheckpointError: If serialization or writing fails
        """
        filepath = Path(filepath)
        filepath.parent.mkdir(parents=True, exist_ok=True)

        try:
            header = json.dumps(checkpoint.header(), sort_keys=True).encode("utf-8")
            payload = b"".join(
                np.ascontiguousarray(array, dtype="<f8").tobytes()
                for array in checkpoint.arrays.values()
            )
        except (TypeError, ValueError) as e:
            raise CheckpointError(f"Serialization failed: {e}")

        tmp_path = None
        try:
            fd, tmp_path_str = tempfile.mkstemp(prefix=f".{filepath.name}.", dir=filepath.parent)
            tmp_path = Path(tmp_path_str)
            with open(fd, "wb") as f:
                f.write(MAGIC)
                f.write(_PREAMBLE.pack(FORMAT_VERSION, len(header)))
                f.write(header)
                f.write(payload)
                f.flush()
                os.fsync(f.fileno())
            tmp_path.replace(filepath)
            logger.info(f"Checkpoint saved: {filepath}")
        except OSError as e:
            logger.error(f"Failed to save checkpoint to {filepath}: {e}")
            if tmp_path and tmp_path.exists():
                tmp_path.unlink()
            raise CheckpointError(f"Atomic write failed: {e}")

    @staticmethod
    def load_checkpoint(filepath: Union[str, Path]) -> Checkpoint:
        """Parse a checkpoint file.

        Raises:
            CheckpointError: If the file is missing, truncated or malformed
        """
        filepath = Path(filepath)
        if not filepath.exists():
            raise CheckpointError(f"File not found: {filepath}")
        data = filepath.read_bytes()

        if data[:len(MAGIC)] != MAGIC:
            raise CheckpointError(f"Not a checkpoint file (bad magic): {filepath}")
        offset = len(MAGIC)
        if len(data) < offset + _PREAMBLE.size:
            raise CheckpointError(f"Truncated checkpoint header: {filepath}")
        version, header_len = _PREAMBLE.unpack_from(data, offset)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"Unsupported checkpoint version {version}")
        offset += _PREAMBLE.size

        try:
            header = json.loads(data[offset:offset + header_len].decode("utf-8"))
            arch = MlpArchitecture.from_dict(header["architecture"])
            if ParamLayout.from_list(header["layout"]) != arch.layout:
                raise CheckpointError("Stored layout does not match the stored architecture")
            kind = header["kind"]
            method = header["method"]
            trained_tasks = [int(t) for t in header["trained_tasks"]]
            array_specs = [(str(s["name"]), tuple(int(d) for d in s["shape"])) for s in header["arrays"]]
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"Corrupted checkpoint header: {e}")
        if kind not in PARAM_ARRAYS:
            raise CheckpointError(f"Unknown checkpoint kind {kind!r}")
        offset += header_len

        arrays: Dict[str, np.ndarray] = {}
        for name, shape in array_specs:
            nbytes = int(np.prod(shape)) * 8
            if offset + nbytes > len(data):
                raise CheckpointError(f"Truncated array {name!r} in {filepath}")
            if nbytes == 0:
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8,
                                             offset=offset).reshape(shape).astype(np.float64)
            offset += nbytes
        if offset != len(data):
            raise CheckpointError(f"Trailing bytes after arrays in {filepath}")
        _check_parameter_arrays(kind, arch, arrays, filepath)

        return Checkpoint(
            kind=kind,
            method=method,
            arch=arch,
            trained_tasks=trained_tasks,
            arrays=arrays,
            metadata=header.get("metadata", {}),
        )
