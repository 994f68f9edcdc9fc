"""Posterior - Mean-field Gaussian variational posterior over parameters.

sigma is parametrized as softplus(rho), so every finite rho gives a valid
standard deviation. Posteriors are treated as immutable snapshots: every
operation returns new arrays.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit, softmax

from core.tensor_diff import MlpArchitecture, ParamVector, forward
from utils.constants import RHO_INIT


class LayoutMismatchError(ValueError):
    """Raised when two parameter vectors do not share a layout."""

    def __init__(self, what: str = "parameter layouts differ"):
        super().__init__(f"layout mismatch: {what}")


class PriorSpecError(ValueError):
    """Raised for an invalid prior specification."""


def softplus(rho: np.ndarray) -> np.ndarray:
    """ln(1 + exp(rho)), overflow-safe."""
    return np.logaddexp(0.0, rho)


def inverse_softplus(sigma: np.ndarray) -> np.ndarray:
    """rho such that softplus(rho) == sigma (sigma > 0)."""
    return np.log(np.expm1(sigma))


@dataclass(frozen=True)
class PriorSpec:
    """Isotropic Gaussian prior N(mean, std^2) over every parameter."""
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.std) and self.std > 0):
            raise PriorSpecError(f"prior std must be > 0, got {self.std}")


@dataclass(frozen=True)
class GaussianPosterior:
    """q(theta) = prod_i N(mu_i, softplus(rho_i)^2)."""
    mu: ParamVector
    rho: ParamVector

    def __post_init__(self):
        if self.mu.layout != self.rho.layout:
            raise LayoutMismatchError("mu and rho")

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.rho.values)

    @property
    def layout(self):
        return self.mu.layout

    def copy(self) -> "GaussianPosterior":
        return GaussianPosterior(self.mu.copy(), self.rho.copy())

    def replace(self, mu: Optional[np.ndarray] = None, rho: Optional[np.ndarray] = None) -> "GaussianPosterior":
        """New posterior with the given value arrays swapped in."""
        return GaussianPosterior(
            self.mu.with_values(self.mu.values if mu is None else mu),
            self.rho.with_values(self.rho.values if rho is None else rho),
        )


def _check_same_layout(*vectors: ParamVector) -> None:
    first = vectors[0].layout
    for vec in vectors[1:]:
        if vec.layout != first:
            raise LayoutMismatchError()


def init_prior(arch: MlpArchitecture, spec: PriorSpec = PriorSpec(), dtype=np.float64) -> GaussianPosterior:
    """The prior p0 as a member of the mean-field family."""
    if not spec.std > 0:
        raise PriorSpecError(f"prior std must be > 0, got {spec.std}")
    size = arch.num_params
    mu = np.full(size, spec.mean, dtype=dtype)
    rho = np.full(size, inverse_softplus(np.float64(spec.std)), dtype=dtype)
    return GaussianPosterior(ParamVector(mu, arch.layout), ParamVector(rho, arch.layout))


def init_training_posterior(
    arch: MlpArchitecture,
    rng: np.random.Generator,
    rho_init: float = RHO_INIT,
    dtype=np.float64,
) -> GaussianPosterior:
    """Starting point of optimization: He-scaled means, near-deterministic sigma.

    Every entry of a layer (weights and biases) is drawn from
    N(0, 2 / fan_in) where fan_in is that layer's input width.
    """
    layout = arch.layout
    mu = np.empty(layout.size, dtype=dtype)
    for seg in layout.segments:
        weight = seg if seg.kind == "weight" else layout.segment(seg.name.rsplit(".", 1)[0] + ".weight")
        std = np.sqrt(2.0 / weight.fan_in)
        mu[seg.slice] = rng.normal(0.0, std, size=seg.length)
    rho = np.full(layout.size, rho_init, dtype=dtype)
    return GaussianPosterior(ParamVector(mu, layout), ParamVector(rho, layout))


def sample_params(
    q: GaussianPosterior,
    rng: Optional[np.random.Generator] = None,
    eps: Optional[np.ndarray] = None,
) -> Tuple[ParamVector, ParamVector]:
    """Reparametrized draw theta = mu + sigma * eps.

    Args:
        q: Posterior to sample from
        rng: Random stream for eps
        eps: Force the standard-normal noise (test hook)

    Returns:
        (theta, eps) so callers can route gradients back to (mu, rho)
    """
    if eps is None:
        if rng is None:
            raise ValueError("sample_params needs an rng when eps is not given")
        eps = rng.standard_normal(q.layout.size).astype(q.mu.values.dtype, copy=False)
    elif eps.shape != q.mu.values.shape:
        raise LayoutMismatchError("eps has the wrong length")
    theta = q.mu.values + q.sigma * eps
    return ParamVector(theta, q.layout), ParamVector(eps, q.layout)


def kl_divergence(q: GaussianPosterior, p: GaussianPosterior, mask: Optional[np.ndarray] = None) -> float:
    """KL(q || p) summed over coordinates (optionally only where ``mask`` is set)."""
    _check_same_layout(q.mu, p.mu)
    sigma_q = q.sigma
    sigma_p = p.sigma
    terms = (
        np.log(sigma_p / sigma_q)
        + (sigma_q ** 2 + (q.mu.values - p.mu.values) ** 2) / (2.0 * sigma_p ** 2)
        - 0.5
    )
    if mask is not None:
        terms = terms[mask]
    return float(np.sum(terms))


def kl_gradients(q: GaussianPosterior, p: GaussianPosterior) -> Tuple[ParamVector, ParamVector]:
    """Analytic partials of KL(q || p) with respect to q's mu and rho."""
    _check_same_layout(q.mu, p.mu)
    sigma_q = q.sigma
    var_p = p.sigma ** 2
    grad_mu = (q.mu.values - p.mu.values) / var_p
    grad_sigma = sigma_q / var_p - 1.0 / sigma_q
    grad_rho = grad_sigma * expit(q.rho.values)
    return ParamVector(grad_mu, q.layout), ParamVector(grad_rho, q.layout)


def reparam_backward(
    grad_theta: ParamVector,
    eps: ParamVector,
    rho: ParamVector,
) -> Tuple[ParamVector, ParamVector]:
    """Chain rule through theta = mu + softplus(rho) * eps."""
    _check_same_layout(grad_theta, eps, rho)
    grad_rho = grad_theta.values * eps.values * expit(rho.values)
    return grad_theta.copy(), ParamVector(grad_rho, grad_theta.layout)


def posterior_mean(q: GaussianPosterior) -> ParamVector:
    """Deterministic evaluation parameters."""
    return q.mu


def predictive_probs(
    q: GaussianPosterior,
    arch: MlpArchitecture,
    x: np.ndarray,
    task: int,
    samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Monte-Carlo predictive: class probabilities averaged over posterior draws."""
    total = None
    for _ in range(samples):
        theta, _ = sample_params(q, rng)
        probs = softmax(forward(theta, arch, x, task), axis=1)
        total = probs if total is None else total + probs
    return total / samples
