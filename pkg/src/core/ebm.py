"""EBM - The classifier read as an energy-based model.

The joint p_theta(x, y) = exp(y^T f_theta(x)) / Z(theta) shares its
parameters with the conditional p_theta(y | x) = softmax(f_theta(x)). This
module provides the gradient estimators built on that view (contrastive
divergence, the marginal log p(x) estimator, the full BGR objective), plus
exact-enumeration oracles on finite input grids and the conditional
independence checker for discrete causal joints.

All estimators return ascent or descent directions as documented per
function; expectations are batch means, or weighted sums when a batch
carries probability weights.
"""

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import logsumexp, softmax

from core.models import LabeledBatch
from core.posterior import GaussianPosterior, kl_gradients, reparam_backward
from core.tensor_diff import (
    MlpArchitecture, ParamVector, backward_params, check_one_hot, forward, forward_backward,
)


class EstimatorError(ValueError):
    """Raised for invalid estimator inputs (empty batches, non-finite logits, bad joints)."""


@dataclass
class EnergyModel:
    """A parameter vector read through one head as an energy model."""
    params: ParamVector
    arch: MlpArchitecture
    task: int

    def logits(self, x: np.ndarray) -> np.ndarray:
        return forward(self.params, self.arch, x, self.task)

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes(self.task)


@dataclass
class ModelSample:
    """One reparametrized draw: the energy model at theta and the noise eps behind it."""
    model: EnergyModel
    eps: ParamVector


@dataclass
class GridEbmSpec:
    """Finite input domain on which Z(theta) is an exact sum (test oracles only)."""
    x_grid: np.ndarray
    classes: int

    def __post_init__(self):
        self.x_grid = np.atleast_2d(np.asarray(self.x_grid, dtype=np.float64))
        if self.x_grid.shape[0] == 0:
            raise EstimatorError("grid must not be empty")
        if self.classes < 1:
            raise EstimatorError(f"classes must be >= 1, got {self.classes}")


@dataclass
class DiscreteCausalJoint:
    """p(theta_t, theta_S, D) = p(theta_S) p(D | theta_S) p(theta_t | D) on finite supports.

    Attributes:
        p_thetaS: (S,) probability vector
        p_D_given_thetaS: (S, D) row-stochastic matrix
        p_thetat_given_D: (D, T) row-stochastic matrix
    """
    p_thetaS: np.ndarray
    p_D_given_thetaS: np.ndarray
    p_thetat_given_D: np.ndarray

    def __post_init__(self):
        self.p_thetaS = np.asarray(self.p_thetaS, dtype=np.float64)
        self.p_D_given_thetaS = np.asarray(self.p_D_given_thetaS, dtype=np.float64)
        self.p_thetat_given_D = np.asarray(self.p_thetat_given_D, dtype=np.float64)
        checks = (
            ("p_thetaS", self.p_thetaS.reshape(1, -1)),
            ("p_D_given_thetaS", self.p_D_given_thetaS),
            ("p_thetat_given_D", self.p_thetat_given_D),
        )
        for name, table in checks:
            if np.any(table < 0):
                raise EstimatorError(f"{name} has negative entries")
            if not np.allclose(table.sum(axis=1), 1.0, rtol=0.0, atol=1e-12):
                raise EstimatorError(f"{name} rows must sum to 1")
        if self.p_D_given_thetaS.shape[0] != self.p_thetaS.shape[0]:
            raise EstimatorError("p_D_given_thetaS rows must match p_thetaS")
        if self.p_thetat_given_D.shape[0] != self.p_D_given_thetaS.shape[1]:
            raise EstimatorError("p_thetat_given_D rows must match the D support")

    def joint_table(self) -> np.ndarray:
        """Joint probabilities indexed [theta_S, D, theta_t]."""
        return (
            self.p_thetaS[:, None, None]
            * self.p_D_given_thetaS[:, :, None]
            * self.p_thetat_given_D[None, :, :]
        )


def conditional_probs(logits: np.ndarray) -> np.ndarray:
    """p(y | x) = softmax(f(x)) per row (max-shifted by scipy)."""
    if not np.all(np.isfinite(logits)):
        raise EstimatorError("non-finite logits")
    return softmax(logits, axis=1)


def _require_batch(batch: LabeledBatch, name: str, classes: int) -> None:
    if batch is None or len(batch) == 0:
        raise EstimatorError(f"{name} batch is empty")
    check_one_hot(batch.y, classes)


def _expected_energy_grad(model: EnergyModel, batch: LabeledBatch) -> ParamVector:
    """E_batch[y^T grad_theta f(x)] with the batch's row weights."""
    upstream = batch.y * batch.row_weights()[:, None]
    return backward_params(model.params, model.arch, batch.x, model.task, upstream)


def nll_loss_and_grad(model: EnergyModel, batch: LabeledBatch) -> Tuple[float, ParamVector]:
    """Weighted-mean cross-entropy and its theta-gradient in one sweep."""
    _require_batch(batch, "data", model.num_classes)
    weights = batch.row_weights()[:, None]
    logits, grad = forward_backward(
        model.params, model.arch, batch.x, model.task,
        lambda logits: (conditional_probs(logits) - batch.y) * weights,
    )
    per_row = logsumexp(logits, axis=1) - np.sum(batch.y * logits, axis=1)
    return float(np.sum(per_row * weights[:, 0])), grad


def nll_grad(model: EnergyModel, x_batch: np.ndarray, y_batch: np.ndarray) -> ParamVector:
    """Gradient of the mean of -log p_theta(y | x) over the batch."""
    _, grad = nll_loss_and_grad(model, LabeledBatch(x_batch, y_batch))
    return grad


def cd_joint_grad(model: EnergyModel, data_batch: LabeledBatch, model_batch: LabeledBatch) -> ParamVector:
    """Contrastive-divergence ascent direction of log p_theta(x, y).

    E_data[y^T grad f(x)] - E_model[y^T grad f(x)]; negate for minimization.
    """
    _require_batch(data_batch, "data", model.num_classes)
    _require_batch(model_batch, "model", model.num_classes)
    positive = _expected_energy_grad(model, data_batch)
    negative = _expected_energy_grad(model, model_batch)
    return positive.with_values(positive.values - negative.values)


def logpx_grad(model: EnergyModel, x_batch: np.ndarray, model_batch: LabeledBatch,
               x_weights: Optional[np.ndarray] = None) -> ParamVector:
    """Ascent direction of log p_theta(x).

    The expectation over p(y | x) is summed exactly over classes; the
    expectation over p(x, y) uses the model batch.
    """
    if x_batch is None or x_batch.shape[0] == 0:
        raise EstimatorError("x batch is empty")
    _require_batch(model_batch, "model", model.num_classes)
    n = x_batch.shape[0]
    weights = np.full(n, 1.0 / n) if x_weights is None else np.asarray(x_weights)
    _, positive = forward_backward(
        model.params, model.arch, x_batch, model.task,
        lambda logits: conditional_probs(logits) * weights[:, None],
    )
    negative = _expected_energy_grad(model, model_batch)
    return positive.with_values(positive.values - negative.values)


def bgr_loss_and_grad(
    q_t: GaussianPosterior,
    q_prev: GaussianPosterior,
    sample: ModelSample,
    data_batch: LabeledBatch,
    sgld_batch: Optional[LabeledBatch],
    gamma: float,
    kl_scale: float,
) -> Tuple[float, ParamVector, ParamVector]:
    """Mean NLL of the draw plus the variational gradients of the BGR objective.

    The theta-gradient is  -grad log p(y|x) + gamma (E_model - E_data)[y^T grad f(x)];
    it is routed through the reparametrization, then kl_scale * grad KL is added.
    """
    if not (np.isfinite(gamma) and gamma >= 0):
        raise EstimatorError(f"gamma must be finite and >= 0, got {gamma}")
    if not (np.isfinite(kl_scale) and kl_scale >= 0):
        raise EstimatorError(f"kl_scale must be finite and >= 0, got {kl_scale}")

    nll, grad_theta = nll_loss_and_grad(sample.model, data_batch)
    if gamma > 0:
        contrast = cd_joint_grad(sample.model, data_batch, sgld_batch)
        grad_theta = grad_theta.with_values(grad_theta.values - gamma * contrast.values)

    grad_mu, grad_rho = reparam_backward(grad_theta, sample.eps, q_t.rho)
    if kl_scale > 0:
        kl_mu, kl_rho = kl_gradients(q_t, q_prev)
        grad_mu = grad_mu.with_values(grad_mu.values + kl_scale * kl_mu.values)
        grad_rho = grad_rho.with_values(grad_rho.values + kl_scale * kl_rho.values)
    return nll, grad_mu, grad_rho


def bgr_total_grad(
    q_t: GaussianPosterior,
    q_prev: GaussianPosterior,
    model_sample: ModelSample,
    data_batch: LabeledBatch,
    sgld_batch: Optional[LabeledBatch],
    gamma: float,
    kl_scale: float,
) -> Tuple[ParamVector, ParamVector]:
    """Gradients of the BGR objective with respect to (mu, rho).

    gamma = 0 gives the VCL gradient; gamma = 0 and kl_scale = 0 gives the
    plain NLL gradient routed through the reparametrization.
    """
    _, grad_mu, grad_rho = bgr_loss_and_grad(
        q_t, q_prev, model_sample, data_batch, sgld_batch, gamma, kl_scale
    )
    return grad_mu, grad_rho


# Exact enumeration on finite grids

def _grid_logits(model: EnergyModel, grid: GridEbmSpec) -> np.ndarray:
    logits = model.logits(grid.x_grid)
    if logits.shape[1] != grid.classes:
        raise EstimatorError(f"model has {logits.shape[1]} classes, grid expects {grid.classes}")
    return logits


def _grid_index(grid: GridEbmSpec, x: np.ndarray) -> int:
    hits = np.flatnonzero(np.all(grid.x_grid == np.asarray(x).reshape(1, -1), axis=1))
    if hits.size == 0:
        raise EstimatorError("x is not a grid point")
    return int(hits[0])


def exact_grid_log_partition(model: EnergyModel, grid: GridEbmSpec) -> float:
    """log Z = log sum_x' sum_y exp(y^T f(x'))."""
    return float(logsumexp(_grid_logits(model, grid)))


def exact_grid_logp(model: EnergyModel, grid: GridEbmSpec, x: np.ndarray) -> float:
    """Exact log p_theta(x) = log sum_y exp(y^T f(x)) - log Z on the grid."""
    index = _grid_index(grid, x)
    logits = _grid_logits(model, grid)
    return float(logsumexp(logits[index]) - logsumexp(logits))


def exact_grid_joint_logp(model: EnergyModel, grid: GridEbmSpec, x: np.ndarray, label: int) -> float:
    """Exact log p_theta(x, y) for the class index ``label``."""
    index = _grid_index(grid, x)
    logits = _grid_logits(model, grid)
    return float(logits[index, label] - logsumexp(logits))


def grid_joint_enumeration(model: EnergyModel, grid: GridEbmSpec) -> LabeledBatch:
    """Every (x, y) of the grid as a batch weighted by p_theta(x, y)."""
    logits = _grid_logits(model, grid)
    log_z = logsumexp(logits)
    g, c = logits.shape
    x = np.repeat(grid.x_grid, c, axis=0)
    y = np.tile(np.eye(c), (g, 1))
    weights = np.exp(logits.reshape(-1) - log_z)
    return LabeledBatch(x, y, weights)


# Conditional independence of theta_S and theta_t given D

def factorization_deviation(table: np.ndarray) -> float:
    """max |p(s, t | D) - p(s | D) p(t | D)| over all cells, for a [s, D, t] joint table.

    D values with zero probability are skipped.
    """
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 3:
        raise EstimatorError(f"joint table must be 3-D [theta_S, D, theta_t], got {table.shape}")
    if np.any(table < 0) or not np.isclose(table.sum(), 1.0, rtol=0.0, atol=1e-12):
        raise EstimatorError("joint table must be a probability table")
    worst = 0.0
    for d in range(table.shape[1]):
        slab = table[:, d, :]
        p_d = slab.sum()
        if p_d <= 0.0:
            continue
        cond = slab / p_d
        product = np.outer(cond.sum(axis=1), cond.sum(axis=0))
        worst = max(worst, float(np.max(np.abs(cond - product))))
    return worst


def proposition1_check(joint: Union[DiscreteCausalJoint, np.ndarray]) -> float:
    """Largest deviation from theta_S independent of theta_t given D.

    Accepts a causal joint (deviation is zero up to rounding) or any raw
    [theta_S, D, theta_t] probability table, e.g. a counterexample.
    """
    table = joint.joint_table() if isinstance(joint, DiscreteCausalJoint) else joint
    return factorization_deviation(table)
