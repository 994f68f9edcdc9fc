"""Trainer - Task-by-task training with every method and sequence evaluation.

Bayesian methods (VCL, BGR) optimize the variational parameters (mu, rho)
of a mean-field posterior; the other methods optimize point parameters.
A task only ever sees its own training split, except ALL_DATA which is
the joint-training upper bound.
"""

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core import sampler
from core.analysis import AccuracyMatrix
from core.ebm import (
    EnergyModel, ModelSample, bgr_loss_and_grad, cd_joint_grad, conditional_probs, nll_loss_and_grad,
)
from core.models import LabeledBatch, Method, SgldConfig, TaskDataset, TaskStream, TrainConfig
from core.persistence import Checkpoint
from core.posterior import (
    GaussianPosterior, PriorSpec, init_prior, init_training_posterior, kl_divergence,
    posterior_mean, predictive_probs, sample_params,
)
from core.sampler import ReplayBuffer
from core.tensor_diff import MlpArchitecture, ParamVector, forward
from utils.constants import ADAM_EPSILON, kl_batch_scale
from utils.logger import get_logger

logger = get_logger(__name__)

EVAL_CHUNK = 2048


class TrainingDivergenceError(RuntimeError):
    """Raised when the loss or a gradient stops being finite.

    Attributes:
        task: Task being trained
        epoch: Epoch (1-based)
        step: Optimizer step within the task
    """

    def __init__(self, task: int, epoch: int, step: int, what: str):
        self.task = task
        self.epoch = epoch
        self.step = step
        super().__init__(f"Training diverged on task {task} (epoch {epoch}, step {step}): {what}")


class UnknownMethodError(ValueError):
    """Raised for a method name outside Method."""

    def __init__(self, method: str):
        super().__init__(f"Unknown method: {method!r}")


@dataclass
class FisherDiag:
    """Diagonal empirical Fisher information (non-negative)."""
    values: ParamVector

    def __post_init__(self):
        if np.any(self.values.values < 0):
            raise ValueError("Fisher entries must be non-negative")


@dataclass
class EwcAnchor:
    """Importance weights and optimum of one completed task."""
    task: int
    fisher: FisherDiag
    theta_star: ParamVector


@dataclass
class StepRecord:
    """Metrics of one optimizer step (values before the update)."""
    task: int
    epoch: int
    step: int
    loss: float
    kl: float = 0.0
    kl_inherited: float = 0.0


class AdamOptimizer:
    """Adam with bias correction over a list of flat arrays."""

    def __init__(self, lr: float, betas: Tuple[float, float], eps: float = ADAM_EPSILON):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m: Optional[List[np.ndarray]] = None
        self._v: Optional[List[np.ndarray]] = None

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> List[np.ndarray]:
        """Return updated copies of ``params``."""
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        if len(grads) != len(self._m):
            raise ValueError("Optimizer received a different number of parameter arrays")
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        updated = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            m_hat = self._m[i] / correction1
            v_hat = self._v[i] / correction2
            updated.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return updated


@dataclass
class TrainerState:
    """Everything that persists between tasks.

    Bayesian methods use ``posterior``/``previous_posterior``; point methods
    use ``params``/``previous_params``. ``previous_posterior`` is never
    mutated while a task trains.
    """
    arch: MlpArchitecture
    prior: GaussianPosterior
    rng: np.random.Generator
    buffer: ReplayBuffer
    posterior: Optional[GaussianPosterior] = None
    previous_posterior: Optional[GaussianPosterior] = None
    params: Optional[ParamVector] = None
    previous_params: Optional[ParamVector] = None
    ewc_anchors: List[EwcAnchor] = field(default_factory=list)
    optimizer: Optional[AdamOptimizer] = None
    trained_tasks: List[int] = field(default_factory=list)
    history: List[StepRecord] = field(default_factory=list)
    wall_clock: Dict[int, float] = field(default_factory=dict)
    validation: Dict[int, float] = field(default_factory=dict)

    @property
    def fisher(self) -> Optional[FisherDiag]:
        """Fisher of the most recent task (EWC)."""
        return self.ewc_anchors[-1].fisher if self.ewc_anchors else None

    def eval_params(self) -> ParamVector:
        if self.posterior is not None:
            return posterior_mean(self.posterior)
        if self.params is not None:
            return self.params
        raise ValueError("Nothing has been trained yet")

    def to_checkpoint(self, method: str, metadata: Optional[dict] = None) -> Checkpoint:
        arrays: Dict[str, np.ndarray] = {}
        if self.posterior is not None or self.params is None:
            # an untrained state is stored as its prior
            q = self.posterior if self.posterior is not None else self.prior
            kind = "posterior"
            arrays["mu"] = q.mu.values
            arrays["rho"] = q.rho.values
        else:
            kind = "point"
            arrays["theta"] = self.eval_params().values
        buffer_x, buffer_y = self.buffer.entries()
        arrays["buffer_x"] = buffer_x
        arrays["buffer_y"] = buffer_y
        for anchor in self.ewc_anchors:
            arrays[f"fisher_{anchor.task}"] = anchor.fisher.values.values
            arrays[f"anchor_{anchor.task}"] = anchor.theta_star.values
        meta = dict(metadata or {})
        meta["buffer_capacity"] = self.buffer.capacity
        meta["buffer_bounds"] = [self.buffer.lo, self.buffer.hi]
        meta["wall_clock_seconds"] = {str(t): s for t, s in self.wall_clock.items()}
        meta["validation_accuracy"] = {str(t): a for t, a in self.validation.items()}
        return Checkpoint(kind, method, self.arch, list(self.trained_tasks), arrays, meta)

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, config: TrainConfig) -> "TrainerState":
        arch = checkpoint.arch
        layout = arch.layout
        dtype = config.dtype
        lo, hi = checkpoint.metadata.get("buffer_bounds", [0.0, 1.0])
        buffer = ReplayBuffer.from_entries(
            checkpoint.metadata.get("buffer_capacity", 1), checkpoint.arrays.get("buffer_x", np.zeros((0, 0))),
            checkpoint.arrays.get("buffer_y", np.zeros((0, 0))), lo, hi,
        )
        state = cls(
            arch=arch,
            prior=init_prior(arch, PriorSpec(0.0, config.prior_std), dtype=dtype),
            rng=np.random.default_rng([config.seed, len(checkpoint.trained_tasks)]),
            buffer=buffer,
            trained_tasks=list(checkpoint.trained_tasks),
            wall_clock={int(t): s for t, s in checkpoint.metadata.get("wall_clock_seconds", {}).items()},
            validation={int(t): a for t, a in checkpoint.metadata.get("validation_accuracy", {}).items()},
        )
        if not checkpoint.trained_tasks:
            # the stored prior is rebuilt from the config
            return state
        if checkpoint.kind == "posterior":
            state.posterior = GaussianPosterior(
                ParamVector(checkpoint.arrays["mu"].astype(dtype), layout),
                ParamVector(checkpoint.arrays["rho"].astype(dtype), layout),
            )
            state.previous_posterior = state.posterior
        else:
            state.params = ParamVector(checkpoint.arrays["theta"].astype(dtype), layout)
            state.previous_params = state.params
        for task in checkpoint.trained_tasks:
            if f"fisher_{task}" in checkpoint.arrays:
                state.ewc_anchors.append(EwcAnchor(
                    task,
                    FisherDiag(ParamVector(checkpoint.arrays[f"fisher_{task}"].astype(dtype), layout)),
                    ParamVector(checkpoint.arrays[f"anchor_{task}"].astype(dtype), layout),
                ))
        return state


@dataclass
class SequenceArtifacts:
    """By-products of run_sequence besides the accuracy matrix."""
    state: TrainerState

    @property
    def wall_clock(self) -> Dict[int, float]:
        """Training seconds per stream position, resumed tasks included."""
        return self.state.wall_clock

    @property
    def validation(self) -> Dict[int, float]:
        """Held-out accuracy of each task right after training it."""
        return self.state.validation


def ewc_fisher(params: ParamVector, arch: MlpArchitecture, dataset: TaskDataset, sample_cap: int) -> FisherDiag:
    """Diagonal empirical Fisher: mean squared gradient of log p(y* | x) over examples.

    Uses the first ``sample_cap`` examples and their observed labels.
    """
    if dataset.size == 0:
        raise ValueError("Cannot estimate the Fisher information of an empty dataset")
    n = min(sample_cap, dataset.size)
    model = EnergyModel(params, arch, dataset.task_id)
    total = np.zeros_like(params.values)
    for i in range(n):
        _, grad = nll_loss_and_grad(model, LabeledBatch(dataset.X[i:i + 1], dataset.Y[i:i + 1]))
        total += grad.values ** 2
    return FisherDiag(params.with_values(total / n))


class ContinualTrainer:
    """Runs one method over a task stream.

    Example:
        >>> trainer = ContinualTrainer(arch, TrainConfig(method="BGR"), SgldConfig())
        >>> matrix, artifacts = trainer.run_sequence(stream)
        >>> matrix.row_average(len(stream))
    """

    def __init__(self, arch: MlpArchitecture, config: TrainConfig, sgld: Optional[SgldConfig] = None):
        if config.method not in Method._value2member_map_:
            raise UnknownMethodError(config.method)
        self.arch = arch
        self.config = config
        self.sgld = sgld or SgldConfig()
        self.method = Method(config.method)
        self.dtype = config.dtype

    # State management

    def init_state(self) -> TrainerState:
        return TrainerState(
            arch=self.arch,
            prior=init_prior(self.arch, PriorSpec(0.0, self.config.prior_std), dtype=self.dtype),
            rng=np.random.default_rng(self.config.seed),
            buffer=ReplayBuffer(self.sgld.buffer_size, self.sgld.clamp_lo, self.sgld.clamp_hi),
        )

    def _fresh_mask(self, state: TrainerState, task: int) -> np.ndarray:
        """Coordinates that start from a fresh initialization for ``task``."""
        layout = self.arch.layout
        if not state.trained_tasks:
            mask = layout.trunk_mask() | layout.head_mask(self.arch.head_key(task))
        elif not self.arch.shared_head and task not in state.trained_tasks:
            mask = layout.head_mask(self.arch.head_key(task))
        else:
            mask = np.zeros(layout.size, dtype=bool)
        return mask

    def _frozen_mask(self, state: TrainerState, active: Sequence[int]) -> np.ndarray:
        """Heads of completed tasks stay fixed (multi-head only)."""
        layout = self.arch.layout
        mask = np.zeros(layout.size, dtype=bool)
        if self.arch.shared_head:
            return mask
        for task in state.trained_tasks:
            if task not in active:
                mask |= layout.head_mask(self.arch.head_key(task))
        return mask

    def _begin_task(self, state: TrainerState, task: int) -> np.ndarray:
        """Set up q_t = q_{t-1} (or theta), initialize new coordinates; returns the fresh mask."""
        fresh = self._fresh_mask(state, task)
        init = init_training_posterior(self.arch, state.rng, dtype=self.dtype)
        if self.method.is_bayesian:
            base = state.posterior if state.posterior is not None else state.prior
            state.previous_posterior = base
            mu = np.where(fresh, init.mu.values, base.mu.values)
            rho = np.where(fresh, init.rho.values, base.rho.values)
            state.posterior = base.replace(mu=mu, rho=rho)
        else:
            base = state.params if state.params is not None else state.prior.mu
            state.previous_params = state.params
            state.params = base.with_values(np.where(fresh, init.mu.values, base.values))
        if self.sgld.reset_buffer_per_task:
            state.buffer.reset()
        state.optimizer = AdamOptimizer(self.config.lr, tuple(self.config.adam_betas))
        return fresh

    def _finish_task(self, state: TrainerState, dataset: TaskDataset) -> None:
        task = dataset.task_id
        if self.method.is_bayesian:
            state.previous_posterior = state.posterior
        else:
            state.previous_params = state.params
        if self.method == Method.EWC:
            fisher = ewc_fisher(state.params, self.arch, dataset, self.config.fisher_sample_cap)
            state.ewc_anchors.append(EwcAnchor(task, fisher, state.params.copy()))
        if task not in state.trained_tasks:
            state.trained_tasks.append(task)

    # Gradient steps

    def _generate(self, state: TrainerState, theta: ParamVector, task: int) -> Optional[LabeledBatch]:
        if not (self.method.is_generative and self.config.gamma > 0):
            return None
        x_s, y_s = sampler.sample(theta, self.arch, task, state.buffer, self.sgld, state.rng)
        return LabeledBatch(x_s, y_s)

    def _bayesian_step(self, state: TrainerState, batch: LabeledBatch, task: int,
                       kl_scale: float, frozen: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
        q, q_prev = state.posterior, state.previous_posterior
        draws = [sample_params(q, state.rng) for _ in range(self.config.posterior_samples)]
        # one SGLD batch per minibatch, generated at the first draw and shared by all K
        sgld_batch = self._generate(state, draws[0][0], task)
        gamma = self.config.gamma if sgld_batch is not None else 0.0

        total_nll = 0.0
        grad_mu = np.zeros_like(q.mu.values)
        grad_rho = np.zeros_like(q.rho.values)
        for theta, eps in draws:
            sample = ModelSample(EnergyModel(theta, self.arch, task), eps)
            nll, g_mu, g_rho = bgr_loss_and_grad(q, q_prev, sample, batch, sgld_batch, gamma, kl_scale)
            total_nll += nll
            grad_mu += g_mu.values
            grad_rho += g_rho.values
        k = len(draws)
        grad_mu /= k
        grad_rho /= k
        grad_mu[frozen] = 0.0
        grad_rho[frozen] = 0.0
        return total_nll / k, grad_mu, grad_rho

    def _point_grad(self, state: TrainerState, batch: LabeledBatch, task: int,
                    inherited: np.ndarray) -> Tuple[float, np.ndarray]:
        theta = state.params
        model = EnergyModel(theta, self.arch, task)
        loss, grad = nll_loss_and_grad(model, batch)
        g = grad.values
        sgld_batch = self._generate(state, theta, task)
        if sgld_batch is not None:
            g = g - self.config.gamma * cd_joint_grad(model, batch, sgld_batch).values
        if self.method == Method.GEN_L2 and state.previous_params is not None:
            # fresh coordinates are not anchored
            diff = np.where(inherited, theta.values - state.previous_params.values, 0.0)
            g = g + self.config.l2_lambda * diff
            loss += 0.5 * self.config.l2_lambda * float(diff @ diff)
        if self.method == Method.EWC:
            for anchor in state.ewc_anchors:
                diff = theta.values - anchor.theta_star.values
                weighted = anchor.fisher.values.values * diff
                g = g + self.config.ewc_lambda * weighted
                loss += 0.5 * self.config.ewc_lambda * float(weighted @ diff)
        return loss, g

    def _apply_step(self, state: TrainerState, batch: LabeledBatch, task: int, n_examples: int,
                    frozen: np.ndarray, inherited: np.ndarray, epoch: int, step: int) -> None:
        if self.method.is_bayesian:
            scale_n = kl_batch_scale(len(batch), n_examples) if self.config.kl_mode == "batch" else 1.0 / n_examples
            kl = kl_divergence(state.posterior, state.previous_posterior)
            kl_inherited = kl_divergence(state.posterior, state.previous_posterior, mask=inherited)
            nll, grad_mu, grad_rho = self._bayesian_step(state, batch, task, scale_n, frozen)
            loss = nll + scale_n * kl
            self._check_finite(loss, (grad_mu, grad_rho), task, epoch, step)
            mu, rho = state.optimizer.step(
                [state.posterior.mu.values, state.posterior.rho.values], [grad_mu, grad_rho]
            )
            state.posterior = state.posterior.replace(mu=mu, rho=rho)
            record = StepRecord(task, epoch, step, loss, kl, kl_inherited)
        else:
            loss, grad = self._point_grad(state, batch, task, inherited)
            grad[frozen] = 0.0
            self._check_finite(loss, (grad,), task, epoch, step)
            (theta,) = state.optimizer.step([state.params.values], [grad])
            state.params = state.params.with_values(theta)
            record = StepRecord(task, epoch, step, loss)
        state.history.append(record)
        logger.debug(f"task {task} epoch {epoch} step {step}: loss {record.loss:.5f} kl {record.kl:.3f}")

    @staticmethod
    def _check_finite(loss: float, grads: Sequence[np.ndarray], task: int, epoch: int, step: int) -> None:
        if not np.isfinite(loss):
            raise TrainingDivergenceError(task, epoch, step, f"loss is {loss}")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise TrainingDivergenceError(task, epoch, step, "non-finite gradient")

    def _batches(self, rng: np.random.Generator, n: int) -> List[np.ndarray]:
        order = rng.permutation(n)
        size = self.config.batch_size
        return [order[i:i + size] for i in range(0, n, size)]

    # Public operations

    def train_task(self, state: TrainerState, dataset: TaskDataset) -> TrainerState:
        """Train on one task's data only.

        Raises:
            TrainingDivergenceError: If the loss or gradients become non-finite
        """
        if self.method == Method.ALL_DATA:
            return self.train_joint(state, [dataset])
        task = dataset.task_id
        self.arch.head_key(task)
        data = dataset.astype(self.dtype)
        fresh = self._begin_task(state, task)
        frozen = self._frozen_mask(state, [task])
        inherited = ~fresh
        step = 0
        for epoch in range(1, self.config.epochs + 1):
            first = len(state.history)
            for idx in self._batches(state.rng, data.size):
                batch = LabeledBatch(data.X[idx], data.Y[idx])
                self._apply_step(state, batch, task, data.size, frozen, inherited, epoch, step)
                step += 1
            losses = [r.loss for r in state.history[first:]]
            last = state.history[-1]
            logger.info(
                f"[{self.method.value}] task {task} epoch {epoch}/{self.config.epochs}: "
                f"loss {np.mean(losses):.4f}, kl {last.kl:.2f}"
            )
        self._finish_task(state, data)
        return state

    def train_joint(self, state: TrainerState, datasets: Sequence[TaskDataset]) -> TrainerState:
        """Joint training on several tasks: each step uses a minibatch of one of them."""
        current = datasets[-1].task_id
        data = [d.astype(self.dtype) for d in datasets]
        fresh = self._begin_task(state, current)
        active = [d.task_id for d in data]
        frozen = self._frozen_mask(state, active)
        step = 0
        for epoch in range(1, self.config.epochs + 1):
            schedule = [
                (i, idx) for i, d in enumerate(data) for idx in self._batches(state.rng, d.size)
            ]
            for j in state.rng.permutation(len(schedule)):
                i, idx = schedule[j]
                d = data[i]
                batch = LabeledBatch(d.X[idx], d.Y[idx])
                self._apply_step(state, batch, d.task_id, d.size, frozen, ~fresh, epoch, step)
                step += 1
            logger.info(f"[{self.method.value}] tasks {active} epoch {epoch}/{self.config.epochs}")
        for d in data:
            if d.task_id not in state.trained_tasks:
                state.trained_tasks.append(d.task_id)
        if self.method.is_bayesian:
            state.previous_posterior = state.posterior
        else:
            state.previous_params = state.params
        return state

    def predict_probs(self, state: TrainerState, x: np.ndarray, task: int) -> np.ndarray:
        if self.config.mc_eval_samples > 0 and state.posterior is not None:
            rng = np.random.default_rng([self.config.seed, task])
            return predictive_probs(state.posterior, self.arch, x, task, self.config.mc_eval_samples, rng)
        return conditional_probs(forward(state.eval_params(), self.arch, x, task))

    def evaluate(self, state: TrainerState, dataset: TaskDataset, task: Optional[int] = None) -> float:
        """Accuracy of the argmax prediction (ties go to the lowest class index)."""
        task = dataset.task_id if task is None else task
        self.arch.head_key(task)
        data = dataset.astype(self.dtype)
        correct = 0
        for start in range(0, data.size, EVAL_CHUNK):
            x = data.X[start:start + EVAL_CHUNK]
            predicted = np.argmax(self.predict_probs(state, x, task), axis=1)
            correct += int(np.sum(predicted == data.labels[start:start + EVAL_CHUNK]))
        return correct / data.size

    def run_sequence(
        self,
        stream: TaskStream,
        state: Optional[TrainerState] = None,
        on_task_end: Optional[Callable[[int, TrainerState, AccuracyMatrix], None]] = None,
        matrix: Optional[AccuracyMatrix] = None,
    ) -> Tuple[AccuracyMatrix, SequenceArtifacts]:
        """Train task after task and fill one accuracy-matrix row per task.

        Args:
            stream: Tasks in order
            state: Resume from this state; tasks it already trained are skipped
            on_task_end: Called with (task, state, matrix) after each row is filled
            matrix: Rows recorded before ``state`` was saved (resume)
        """
        if len(stream) == 0:
            raise ValueError("Task stream is empty")
        state = state or self.init_state()
        if matrix is None:
            matrix = AccuracyMatrix(len(stream))
        if matrix.num_tasks != len(stream):
            raise ValueError(f"Accuracy matrix has {matrix.num_tasks} tasks, stream has {len(stream)}")
        artifacts = SequenceArtifacts(state)
        seen: List[TaskDataset] = []

        for t, splits in enumerate(stream.tasks, start=1):
            seen.append(splits.train)
            if splits.task_id in state.trained_tasks:
                logger.info(f"Task {splits.task_id} already trained, skipping")
                continue
            started = time.perf_counter()
            if self.method == Method.ALL_DATA:
                self.train_joint(state, seen)
            else:
                self.train_task(state, splits.train)
            state.wall_clock[t] = time.perf_counter() - started
            if splits.val.size > 0:
                state.validation[splits.task_id] = self.evaluate(state, splits.val)

            for j, earlier in enumerate(stream.tasks[:t], start=1):
                matrix.set(t, j, self.evaluate(state, earlier.test))
            logger.info(f"After task {t}: average accuracy {matrix.row_average(t):.4f}")
            if on_task_end is not None:
                on_task_end(t, state, matrix)
        return matrix, artifacts
