"""Sampler - Gibbs-Langevin dynamics over (x, y) with a persistent replay buffer.

Each chain alternates a categorical label draw y_s ~ p(y | x) with a noisy
gradient-ascent step on y_s^T f(x). Chains start from earlier chain
endpoints kept in a ring buffer, or from uniform noise.
"""

from typing import Callable, Optional, Protocol, Tuple

import numpy as np

from core.ebm import conditional_probs
from core.models import SgldConfig
from core.tensor_diff import DimensionMismatchError, MlpArchitecture, ParamVector, forward, grad_input
from utils.logger import get_logger

logger = get_logger(__name__)

StepHook = Callable[[int, float], None]


class SamplerDivergenceError(RuntimeError):
    """Raised when a chain produces non-finite values.

    Attributes:
        step: Langevin step at which the chain diverged
    """

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"diverged chain at step {step}")


class ReplayBufferError(ValueError):
    """Raised for invalid buffer contents or an empty-buffer draw."""


class ReplayBuffer:
    """Bounded FIFO ring of previous chain endpoints (x, y)."""

    def __init__(self, capacity: int, lo: float = 0.0, hi: float = 1.0):
        if capacity < 1:
            raise ReplayBufferError(f"Buffer capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.lo = lo
        self.hi = hi
        self._x: Optional[np.ndarray] = None
        self._y: Optional[np.ndarray] = None
        self._count = 0
        self.write_cursor = 0

    def __len__(self) -> int:
        return self._count

    @property
    def input_dim(self) -> Optional[int]:
        return None if self._x is None else self._x.shape[1]

    def push(self, x: np.ndarray, y: np.ndarray) -> "ReplayBuffer":
        """Append rows, overwriting the oldest entries once full."""
        x = np.atleast_2d(x)
        y = np.atleast_2d(y)
        if x.shape[0] != y.shape[0]:
            raise DimensionMismatchError("buffer rows", x.shape[0], y.shape[0])
        if self._x is None:
            self._x = np.zeros((self.capacity, x.shape[1]), dtype=x.dtype)
            self._y = np.zeros((self.capacity, y.shape[1]), dtype=y.dtype)
        elif x.shape[1] != self._x.shape[1] or y.shape[1] != self._y.shape[1]:
            raise DimensionMismatchError("buffer entry", (self._x.shape[1], self._y.shape[1]),
                                         (x.shape[1], y.shape[1]))
        if np.any(x < self.lo) or np.any(x > self.hi):
            raise ReplayBufferError(f"Buffer entries must lie in [{self.lo}, {self.hi}]")
        # only the newest `capacity` rows can survive
        if x.shape[0] > self.capacity:
            skipped = x.shape[0] - self.capacity
            self.write_cursor = (self.write_cursor + skipped) % self.capacity
            self._count = min(self.capacity, self._count + skipped)
            x, y = x[skipped:], y[skipped:]
        positions = (self.write_cursor + np.arange(x.shape[0])) % self.capacity
        self._x[positions] = x
        self._y[positions] = y
        self.write_cursor = int((self.write_cursor + x.shape[0]) % self.capacity)
        self._count = min(self.capacity, self._count + x.shape[0])
        return self

    def sample_x(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform draw with replacement from the stored inputs."""
        if self._count == 0:
            raise ReplayBufferError("Cannot sample from an empty buffer")
        return self._x[rng.integers(0, self._count, size=n)].copy()

    def entries(self) -> Tuple[np.ndarray, np.ndarray]:
        """Stored (x, y) from oldest to newest."""
        if self._count == 0:
            return np.zeros((0, 0)), np.zeros((0, 0))
        if self._count < self.capacity:
            order = np.arange(self._count)
        else:
            order = (self.write_cursor + np.arange(self.capacity)) % self.capacity
        return self._x[order].copy(), self._y[order].copy()

    def reset(self) -> None:
        self._x = None
        self._y = None
        self._count = 0
        self.write_cursor = 0

    @classmethod
    def from_entries(cls, capacity: int, x: np.ndarray, y: np.ndarray,
                     lo: float = 0.0, hi: float = 1.0) -> "ReplayBuffer":
        buffer = cls(capacity, lo, hi)
        if x.size:
            buffer.push(x, y)
        return buffer


def buffer_push(buffer: ReplayBuffer, x: np.ndarray, y: np.ndarray) -> ReplayBuffer:
    """Add chain endpoints to the buffer (FIFO overwrite at capacity)."""
    return buffer.push(x, y)


class EnergyLandscape(Protocol):
    """What a chain needs from a model: label conditionals and input gradients."""

    num_classes: int

    def conditional(self, x: np.ndarray) -> np.ndarray:
        ...

    def grad_x(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        ...


class ClassifierEnergy:
    """Energy y^T f_theta(x) of one classifier head."""

    def __init__(self, theta: ParamVector, arch: MlpArchitecture, task: int):
        self.theta = theta
        self.arch = arch
        self.task = task
        self.num_classes = arch.num_classes(task)

    def conditional(self, x: np.ndarray) -> np.ndarray:
        return conditional_probs(forward(self.theta, self.arch, x, self.task))

    def grad_x(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return grad_input(self.theta, self.arch, x, self.task, y)


class QuadraticEnergy:
    """log-density -||x - c||^2 / (2 tau^2) with a single dummy label.

    Its Langevin stationary law is N(c, tau^2 I), which makes it an oracle
    for the sampler.
    """

    num_classes = 1

    def __init__(self, center: np.ndarray, tau: float):
        self.center = np.asarray(center, dtype=np.float64)
        self.tau = float(tau)

    def conditional(self, x: np.ndarray) -> np.ndarray:
        return np.ones((x.shape[0], 1), dtype=x.dtype)

    def grad_x(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return -(x - self.center) / self.tau ** 2


def init_chain(
    buffer: Optional[ReplayBuffer],
    config: SgldConfig,
    rng: np.random.Generator,
    input_dim: int,
    dtype=np.float64,
) -> np.ndarray:
    """Chain starts: buffer rows with probability 1 - r, uniform noise otherwise."""
    n = config.chain_batch
    noise = rng.uniform(config.clamp_lo, config.clamp_hi, size=(n, input_dim)).astype(dtype)
    if buffer is None or len(buffer) == 0:
        return noise
    if buffer.input_dim != input_dim:
        raise DimensionMismatchError("buffer inputs", input_dim, buffer.input_dim)
    from_buffer = rng.random(n) >= config.reinit_rate
    stored = buffer.sample_x(n, rng).astype(dtype, copy=False)
    return np.where(from_buffer[:, None], stored, noise)


def draw_labels(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row, returned one-hot."""
    u = rng.random(probs.shape[0])
    index = np.sum(np.cumsum(probs, axis=1) < u[:, None], axis=1)
    index = np.minimum(index, probs.shape[1] - 1)
    return np.eye(probs.shape[1], dtype=probs.dtype)[index]


def step_size(config: SgldConfig, s: int) -> float:
    """eta_s for step s (1-based)."""
    return config.base_step / s if config.step_decay else config.base_step


def run_chains(
    energy: EnergyLandscape,
    x: np.ndarray,
    config: SgldConfig,
    rng: np.random.Generator,
    fixed_labels: Optional[np.ndarray] = None,
    step_hook: Optional[StepHook] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Run S Gibbs-Langevin steps from ``x``; returns (x_S, y_S)."""
    y = fixed_labels
    for s in range(1, config.steps + 1):
        eta = step_size(config, s)
        if fixed_labels is None:
            y = draw_labels(energy.conditional(x), rng)
        grad = energy.grad_x(x, y)
        x = x + 0.5 * eta * grad
        noise_std = config.noise_std if config.noise_schedule == "fixed" else np.sqrt(eta)
        if noise_std > 0:
            x = x + noise_std * rng.standard_normal(x.shape).astype(x.dtype, copy=False)
        if config.clamp:
            x = np.clip(x, config.clamp_lo, config.clamp_hi)
        if not np.all(np.isfinite(x)):
            raise SamplerDivergenceError(s)
        if step_hook is not None:
            step_hook(s, eta)
    return x, y


def sample(
    model_theta: ParamVector,
    arch: MlpArchitecture,
    task: int,
    buffer: Optional[ReplayBuffer],
    config: SgldConfig,
    rng: np.random.Generator,
    energy: Optional[EnergyLandscape] = None,
    fixed_labels: Optional[np.ndarray] = None,
    step_hook: Optional[StepHook] = None,
    input_dim: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Draw a batch from the model's joint distribution.

    Args:
        model_theta: Classifier parameters (ignored when ``energy`` is given)
        arch: Architecture of ``model_theta``
        task: Head whose energy is sampled
        buffer: Replay buffer for chain starts; endpoints are pushed back into it
        config: Sampler settings
        rng: Random stream
        energy: Override of the classifier energy (e.g. QuadraticEnergy)
        fixed_labels: Keep y fixed instead of Gibbs-drawing it (class-conditional generation)
        step_hook: Called with (s, eta_s) after every step
        input_dim: Chain dimension when no architecture is given

    Returns:
        (x_S, y_S) with one-hot y_S

    Raises:
        SamplerDivergenceError: If the chain leaves the finite reals
    """
    if energy is None:
        energy = ClassifierEnergy(model_theta, arch, task)
    if input_dim is None:
        input_dim = arch.input_dim
    dtype = model_theta.values.dtype if model_theta is not None else np.float64
    x0 = init_chain(buffer, config, rng, input_dim, dtype=dtype)
    x_s, y_s = run_chains(energy, x0, config, rng, fixed_labels=fixed_labels, step_hook=step_hook)
    logger.debug(f"SGLD task {task}: {config.steps} steps, mean x {x_s.mean():.4f}")
    if buffer is not None:
        buffer.push(x_s, y_s)
    return x_s, y_s
