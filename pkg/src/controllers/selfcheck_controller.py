"""Selfcheck Controller - Fast oracle suite run by the ``selfcheck`` command.

Each check compares an analytic routine against an independent oracle
(central finite differences, numerical quadrature, exact enumeration or a
known stationary law) and reports pass/fail with the worst error seen.
"""

import time
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np
from scipy import integrate, stats

from core import ebm, posterior, sampler, tensor_diff
from core.models import LabeledBatch, SgldConfig
from utils.constants import EXIT_FAILURE, EXIT_OK
from utils.logger import get_logger

logger = get_logger(__name__)

SEED = 1234
FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Gradient of a scalar function by central differences, one coordinate at a time."""
    grad = np.zeros_like(x)
    for i in range(x.size):
        up = x.copy()
        down = x.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (f(up) - f(down)) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(1e-8, float(np.max(np.abs(b)))))


def small_architecture(input_dim: int = 3, hidden: Tuple[int, ...] = (4, 3), classes: int = 3):
    return tensor_diff.MlpArchitecture(input_dim, hidden, {1: classes, 2: 2})


def random_posterior(arch, rng) -> posterior.GaussianPosterior:
    layout = arch.layout
    mu = rng.normal(0.0, 0.5, layout.size)
    rho = rng.normal(-1.0, 0.5, layout.size)
    return posterior.GaussianPosterior(tensor_diff.ParamVector(mu, layout), tensor_diff.ParamVector(rho, layout))


# Checks

def check_backprop(rng: np.random.Generator) -> Tuple[bool, str]:
    worst = 0.0
    for _ in range(20):
        arch = small_architecture()
        theta = tensor_diff.ParamVector(rng.normal(0.0, 0.7, arch.num_params), arch.layout)
        x = rng.uniform(0.0, 1.0, (4, arch.input_dim))
        upstream = rng.normal(size=(4, 3))

        def objective(values):
            return float(np.sum(upstream * tensor_diff.forward(theta.with_values(values), arch, x, 1)))

        analytic = tensor_diff.backward_params(theta, arch, x, 1, upstream).values
        worst = max(worst, relative_error(analytic, central_difference(objective, theta.values)))

        y = np.eye(3)[rng.integers(0, 3, 4)]

        def energy(flat_x):
            logits = tensor_diff.forward(theta, arch, flat_x.reshape(x.shape), 1)
            return float(np.sum(y * logits))

        dx = tensor_diff.grad_input(theta, arch, x, 1, y)
        worst = max(worst, relative_error(dx.ravel(), central_difference(energy, x.ravel())))
    return worst < 1e-4, f"max relative error {worst:.2e}"


def check_kl_gradients(rng: np.random.Generator) -> Tuple[bool, str]:
    worst = 0.0
    arch = small_architecture()
    layout = arch.layout
    for _ in range(20):
        q = random_posterior(arch, rng)
        p = random_posterior(arch, rng)
        g_mu, g_rho = posterior.kl_gradients(q, p)
        fd_mu = central_difference(lambda m: posterior.kl_divergence(q.replace(mu=m), p), q.mu.values)
        fd_rho = central_difference(lambda r: posterior.kl_divergence(q.replace(rho=r), p), q.rho.values)
        worst = max(worst, relative_error(g_mu.values, fd_mu), relative_error(g_rho.values, fd_rho))

        eps = tensor_diff.ParamVector(rng.standard_normal(layout.size), layout)
        w = rng.normal(size=layout.size)
        # linear test function of theta: d/d(mu, rho) of w . (mu + softplus(rho) eps)
        grad_theta = tensor_diff.ParamVector(w, layout)
        r_mu, r_rho = posterior.reparam_backward(grad_theta, eps, q.rho)
        fd_r = central_difference(lambda r: float(w @ (posterior.softplus(r) * eps.values)), q.rho.values)
        worst = max(worst, relative_error(r_mu.values, w), relative_error(r_rho.values, fd_r))
    return worst < 1e-6, f"max relative error {worst:.2e}"


def check_kl_quadrature(rng: np.random.Generator) -> Tuple[bool, str]:
    layout = tensor_diff.ParamLayout((tensor_diff.Segment("w", 0, "weight", 0, (1,)),))
    worst = 0.0
    for _ in range(100):
        mu_q, mu_p = rng.normal(0.0, 1.0, 2)
        s_q, s_p = rng.uniform(0.3, 2.0, 2)
        q = posterior.GaussianPosterior(tensor_diff.ParamVector(np.array([mu_q]), layout),
                                        tensor_diff.ParamVector(posterior.inverse_softplus(np.array([s_q])), layout))
        p = posterior.GaussianPosterior(tensor_diff.ParamVector(np.array([mu_p]), layout),
                                        tensor_diff.ParamVector(posterior.inverse_softplus(np.array([s_p])), layout))
        closed = posterior.kl_divergence(q, p)
        integrand = lambda t: stats.norm.pdf(t, mu_q, s_q) * (stats.norm.logpdf(t, mu_q, s_q)
                                                            - stats.norm.logpdf(t, mu_p, s_p))
        numeric, _ = integrate.quad(integrand, mu_q - 12 * s_q, mu_q + 12 * s_q, epsabs=1e-12, epsrel=1e-12)
        worst = max(worst, abs(closed - numeric))
    return worst < 1e-6, f"max absolute error {worst:.2e}"


def check_conditional_independence(rng: np.random.Generator) -> Tuple[bool, str]:
    worst = 0.0
    for _ in range(20):
        joint = ebm.DiscreteCausalJoint(
            rng.dirichlet(np.ones(3)),
            rng.dirichlet(np.ones(4), size=3),
            rng.dirichlet(np.ones(2), size=4),
        )
        worst = max(worst, ebm.proposition1_check(joint))
    counter = np.zeros((2, 2, 2))
    counter[0, 0, 0] = counter[1, 0, 1] = 0.5
    deviation = ebm.proposition1_check(counter)
    return worst < 1e-12 and deviation > 0.1, f"causal {worst:.1e}, counterexample {deviation:.3f}"


def _grid_problem(rng: np.random.Generator):
    arch = tensor_diff.MlpArchitecture(2, (3,), {1: 2})
    axis = np.linspace(0.0, 1.0, 3)
    grid = ebm.GridEbmSpec(np.array([[a, b] for a in axis for b in axis]), 2)
    theta = tensor_diff.ParamVector(rng.normal(0.0, 0.8, arch.num_params), arch.layout)
    rows = rng.choice(len(grid.x_grid), 4, replace=False)
    data = LabeledBatch(grid.x_grid[rows], np.eye(2)[rng.integers(0, 2, 4)])
    return arch, grid, theta, data


def check_joint_estimators(rng: np.random.Generator) -> Tuple[bool, str]:
    worst = 0.0
    for _ in range(5):
        arch, grid, theta, data = _grid_problem(rng)
        model = ebm.EnergyModel(theta, arch, 1)
        model_batch = ebm.grid_joint_enumeration(model, grid)

        def joint_objective(values):
            m = ebm.EnergyModel(theta.with_values(values), arch, 1)
            return np.mean([ebm.exact_grid_joint_logp(m, grid, x, int(np.argmax(y)))
                            for x, y in zip(data.x, data.y)])

        def marginal_objective(values):
            m = ebm.EnergyModel(theta.with_values(values), arch, 1)
            return np.mean([ebm.exact_grid_logp(m, grid, x) for x in data.x])

        cd = ebm.cd_joint_grad(model, data, model_batch).values
        worst = max(worst, float(np.max(np.abs(cd - central_difference(joint_objective, theta.values)))))
        px = ebm.logpx_grad(model, data.x, model_batch).values
        worst = max(worst, float(np.max(np.abs(px - central_difference(marginal_objective, theta.values)))))
    return worst < 1e-6, f"max absolute error {worst:.2e}"


def check_bgr_objective(rng: np.random.Generator) -> Tuple[bool, str]:
    arch, grid, theta, data = _grid_problem(rng)
    layout = arch.layout
    q = posterior.GaussianPosterior(theta, tensor_diff.ParamVector(rng.normal(-3.0, 0.3, layout.size), layout))
    q_prev = random_posterior(arch, rng)
    eps = tensor_diff.ParamVector(rng.standard_normal(layout.size), layout)
    gamma, kl_scale = 0.7, 0.05

    def objective(mu, rho):
        q_i = q.replace(mu=mu, rho=rho)
        theta_i, _ = posterior.sample_params(q_i, eps=eps.values)
        model = ebm.EnergyModel(theta_i, arch, 1)
        nll, _ = ebm.nll_loss_and_grad(model, data)
        joint = np.mean([ebm.exact_grid_joint_logp(model, grid, x, int(np.argmax(y)))
                         for x, y in zip(data.x, data.y)])
        return nll - gamma * joint + kl_scale * posterior.kl_divergence(q_i, q_prev)

    theta_s, _ = posterior.sample_params(q, eps=eps.values)
    sample = ebm.ModelSample(ebm.EnergyModel(theta_s, arch, 1), eps)
    model_batch = ebm.grid_joint_enumeration(sample.model, grid)
    g_mu, g_rho = ebm.bgr_total_grad(q, q_prev, sample, data, model_batch, gamma, kl_scale)
    fd_mu = central_difference(lambda m: objective(m, q.rho.values), q.mu.values)
    fd_rho = central_difference(lambda r: objective(q.mu.values, r), q.rho.values)
    worst = max(float(np.max(np.abs(g_mu.values - fd_mu))), float(np.max(np.abs(g_rho.values - fd_rho))))

    vcl_mu, vcl_rho = ebm.bgr_total_grad(q, q_prev, sample, data, None, 0.0, kl_scale)
    _, ref_mu, ref_rho = ebm.bgr_loss_and_grad(q, q_prev, sample, data, model_batch, 0.0, kl_scale)
    reduces = np.array_equal(vcl_mu.values, ref_mu.values) and np.array_equal(vcl_rho.values, ref_rho.values)
    return worst < 1e-6 and reduces, f"max absolute error {worst:.2e}, gamma=0 reduction {reduces}"


def check_sgld_stationarity(rng: np.random.Generator) -> Tuple[bool, str]:
    center, tau = np.array([1.0, 2.0]), 0.5
    config = SgldConfig(steps=1000, base_step=0.005, noise_schedule="langevin", step_decay=False,
                        clamp=False, chain_batch=10000, reinit_rate=1.0)
    x, _ = sampler.sample(None, None, 0, None, config, rng,
                          energy=sampler.QuadraticEnergy(center, tau), input_dim=2)
    mean_err = float(np.max(np.abs(x.mean(axis=0) - center) / np.abs(center)))
    var_err = float(np.max(np.abs(x.var(axis=0) - tau ** 2) / tau ** 2))
    return mean_err < 0.05 and var_err < 0.15, f"mean error {mean_err:.3%}, variance error {var_err:.3%}"


CHECKS: List[Tuple[str, Callable[[np.random.Generator], Tuple[bool, str]]]] = [
    ("backprop finite differences", check_backprop),
    ("KL and reparametrization gradients", check_kl_gradients),
    ("KL closed form vs quadrature", check_kl_quadrature),
    ("conditional independence checker", check_conditional_independence),
    ("joint and marginal estimators on a grid", check_joint_estimators),
    ("BGR objective gradient", check_bgr_objective),
    ("SGLD quadratic stationarity", check_sgld_stationarity),
]


def run_checks() -> List[CheckResult]:
    results = []
    for index, (name, check) in enumerate(CHECKS):
        started = time.perf_counter()
        try:
            passed, detail = check(np.random.default_rng([SEED, index]))
        except Exception as e:  # a crashing check is a failing check
            passed, detail = False, f"{type(e).__name__}: {e}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - started))
    return results


def cmd_selfcheck() -> int:
    """Run every oracle check, print one line each; exit 0 only if all pass."""
    results = run_checks()
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.name}: {r.detail} ({r.seconds:.2f}s)")
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error(f"selfcheck: {len(failed)} of {len(results)} checks failed")
        return EXIT_FAILURE
    logger.info(f"selfcheck: all {len(results)} checks passed")
    return EXIT_OK
