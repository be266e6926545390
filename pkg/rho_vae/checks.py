"""Self-check suite behind the `check` subcommand.

Production functions are called through their modules (``posterior.kl_ar1`` rather
than a bound name) so that a broken implementation is reported under its own name.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Tuple

import numpy as np

from . import ar1_math, oracle, posterior, trainer
from .errors import NotPositiveDefiniteError

logger = logging.getLogger(__name__)

D_GRID = (1, 2, 3, 8, 32, 64)
RHO_GRID = (-0.99, -0.5, 0.0, 0.5, 0.99)
S_GRID = (0.01, 1.0, 100.0)

# (d, rho, s) settings for the Monte-Carlo KL agreement.
MC_SETTINGS = ((4, 0.7, 2.0), (3, -0.5, 0.5), (6, 0.9, 1.5))


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error < self.tolerance)


def covariance_grid() -> Iterator[ar1_math.Ar1Cov]:
    for d, rho, s in itertools.product(D_GRID, RHO_GRID, S_GRID):
        yield ar1_math.Ar1Cov(d, rho, s)


def relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    gap = np.abs(actual - expected)
    scale = np.abs(expected)
    exact = gap == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(exact, 0.0, gap / scale)
    return float(np.max(ratio, initial=0.0))


def check_reconstruction() -> CheckResult:
    worst = 0.0
    for cov in covariance_grid():
        lower = ar1_math.cholesky_factor(cov)
        worst = max(worst, relative_error(lower @ lower.T, ar1_math.materialize(cov)))
    return CheckResult("cholesky_factor reconstruction L L^T = C", worst, 1e-10)


def check_factor_against_dense() -> CheckResult:
    worst = 0.0
    for cov in covariance_grid():
        fast = ar1_math.cholesky_factor(cov)
        dense = oracle.dense_cholesky(oracle.kms_matrix(cov.d, cov.rho, cov.s))
        worst = max(worst, float(np.max(np.abs(fast - dense) / np.maximum(1.0, np.abs(dense)))))
    return CheckResult("cholesky_factor vs dense_cholesky", worst, 1e-9)


def check_log_det() -> CheckResult:
    worst = 0.0
    for cov in covariance_grid():
        expected = oracle.dense_log_det(oracle.kms_matrix(cov.d, cov.rho, cov.s))
        worst = max(worst, abs(ar1_math.log_det(cov) - expected) / max(1.0, abs(expected)))
    return CheckResult("log_det vs dense determinant", worst, 1e-8)


def check_positive_definite() -> CheckResult:
    failures = 0
    for cov in covariance_grid():
        try:
            oracle.dense_cholesky(ar1_math.materialize(cov))
        except NotPositiveDefiniteError:
            failures += 1
    return CheckResult("materialize positive definite", float(failures), 0.5)


def check_color(seed: int) -> CheckResult:
    rng = np.random.default_rng((seed, 10))
    worst = 0.0
    for cov in covariance_grid():
        eps = rng.standard_normal(cov.d)
        gap = np.abs(ar1_math.color(cov, eps) - ar1_math.cholesky_factor(cov) @ eps)
        worst = max(worst, float(np.max(gap)))
    return CheckResult("color vs Cholesky matvec", worst, 1e-12)


def check_kl_oracle(seed: int) -> CheckResult:
    rng = np.random.default_rng((seed, 11))
    worst = 0.0
    for cov in covariance_grid():
        mu = rng.standard_normal(cov.d)
        value = float(posterior.kl_ar1(posterior.Ar1Posterior(mu=mu, rho=cov.rho, s=cov.s)))
        expected = oracle.gaussian_kl(mu, oracle.kms_matrix(cov.d, cov.rho, cov.s))
        worst = max(worst, abs(value - expected) / max(1.0, abs(expected)))
    return CheckResult("kl_ar1 vs dense Gaussian KL", worst, 1e-9)


def check_kl_diag_oracle(seed: int) -> CheckResult:
    rng = np.random.default_rng((seed, 12))
    worst = 0.0
    for d in D_GRID:
        mu = rng.standard_normal(d)
        s = np.exp(rng.uniform(-2.0, 2.0, size=d))
        value = float(posterior.kl_diag(posterior.DiagPosterior(mu=mu, s=s)))
        expected = oracle.gaussian_kl(mu, np.diag(s))
        worst = max(worst, abs(value - expected) / max(1.0, abs(expected)))
    return CheckResult("kl_diag vs dense Gaussian KL", worst, 1e-9)


def check_reduction(seed: int, cases: int = 1000) -> CheckResult:
    rng = np.random.default_rng((seed, 13))
    worst = 0.0
    for _ in range(cases):
        d = int(rng.integers(1, 17))
        mu = rng.standard_normal(d)
        s = float(np.exp(rng.uniform(-2.0, 2.0)))
        p = posterior.Ar1Posterior(mu=mu, rho=0.0, s=s)
        ar1 = float(posterior.kl_ar1(p))
        diag = float(posterior.kl_diag(posterior.isotropic(p)))
        worst = max(worst, abs(ar1 - diag) / max(1.0, abs(diag)))
    return CheckResult("kl_ar1 reduces to kl_diag at rho=0", worst, 1e-12)


def _ar1_sampler(mu: np.ndarray, rho: float, s: float) -> Callable[[np.random.Generator, int], np.ndarray]:
    def draw(rng: np.random.Generator, n: int) -> np.ndarray:
        batch = posterior.Ar1Posterior(
            mu=np.broadcast_to(mu, (n, mu.size)), rho=np.full(n, rho), s=np.full(n, s)
        )
        return posterior.sample_ar1(batch, rng).z

    return draw


def check_kl_monte_carlo(draws: int, seed: int) -> CheckResult:
    worst = 0.0
    for index, (d, rho, s) in enumerate(MC_SETTINGS):
        mu = np.linspace(-0.5, 0.5, d)
        cov = oracle.kms_matrix(d, rho, s)
        estimate, std_error = oracle.mc_kl(
            _ar1_sampler(mu, rho, s),
            lambda z, mu=mu, cov=cov: oracle.gaussian_log_density(z, mu, cov),
            oracle.standard_normal_log_density,
            n_draws=draws,
            seed=seed + index,
        )
        closed = float(posterior.kl_ar1(posterior.Ar1Posterior(mu=mu, rho=rho, s=s)))
        worst = max(worst, abs(estimate - closed) / std_error)
    return CheckResult("kl_ar1 Monte Carlo agreement (standard errors)", worst, 4.0)


def check_color_grad(seed: int) -> CheckResult:
    rng = np.random.default_rng((seed, 14))
    worst = 0.0
    for d, rho, s in ((1, 0.4, 1.0), (2, 0.5, 1.0), (6, -0.7, 2.5), (12, 0.95, 0.3)):
        eps = rng.standard_normal(d)
        upstream = rng.standard_normal(d)
        params = {"rho": np.array(rho), "log_s": np.array(np.log(s))}

        def loss() -> float:
            cov = ar1_math.Ar1Cov(d, float(params["rho"]), float(np.exp(params["log_s"])))
            return float(upstream @ ar1_math.color(cov, eps))

        d_rho, d_log_s = ar1_math.color_grad(ar1_math.Ar1Cov(d, rho, s), eps, upstream)
        report = oracle.finite_diff(loss, params, {"rho": d_rho, "log_s": d_log_s})
        worst = max(worst, report.max_error)
    return CheckResult("color_grad finite differences", worst, oracle.DEFAULT_TOLERANCE)


def _raw_ar1_params(mu: np.ndarray, rho: float, s: float) -> Dict[str, np.ndarray]:
    return {"mu": np.array(mu, dtype=np.float64), "log_s": np.array(np.log(s)), "rho_raw": np.array(np.arctanh(rho))}


def _ar1_from_raw(params: Dict[str, np.ndarray]) -> posterior.Ar1Posterior:
    return posterior.Ar1Posterior(
        mu=params["mu"], rho=float(np.tanh(params["rho_raw"])), s=float(np.exp(params["log_s"]))
    )


def check_kl_ar1_grad(seed: int) -> CheckResult:
    rng = np.random.default_rng((seed, 15))
    worst = 0.0
    for d, rho, s in ((1, 0.3, 1.7), (3, 0.5, 1.0), (4, 0.0, np.e), (8, -0.8, 0.4)):
        params = _raw_ar1_params(rng.standard_normal(d), rho, s)
        analytic = posterior.kl_ar1_grad(_ar1_from_raw(params))
        report = oracle.finite_diff(lambda: float(posterior.kl_ar1(_ar1_from_raw(params))), params, analytic)
        worst = max(worst, report.max_error)
    return CheckResult("kl_ar1_grad finite differences", worst, oracle.DEFAULT_TOLERANCE)


def check_sample_ar1_grad(seed: int) -> CheckResult:
    rng = np.random.default_rng((seed, 16))
    worst = 0.0
    for d, rho, s in ((1, 0.6, 1.0), (6, 0.3, 1.5), (10, -0.9, 0.7)):
        params = _raw_ar1_params(rng.standard_normal(d), rho, s)
        eps = rng.standard_normal(d)
        upstream = rng.standard_normal(d)
        q = _ar1_from_raw(params)
        analytic = posterior.sample_ar1_grad(q, posterior.reparametrize_ar1(q, eps), upstream)

        def loss() -> float:
            return float(upstream @ posterior.reparametrize_ar1(_ar1_from_raw(params), eps).z)

        worst = max(worst, oracle.finite_diff(loss, params, analytic).max_error)
    return CheckResult("sample_ar1_grad finite differences", worst, oracle.DEFAULT_TOLERANCE)


def check_diag_grads(seed: int) -> CheckResult:
    rng = np.random.default_rng((seed, 17))
    d = 5
    params = {"mu": rng.standard_normal(d), "logvar": rng.uniform(-1.0, 1.0, size=d)}
    eps = rng.standard_normal(d)
    upstream = rng.standard_normal(d)

    def build() -> posterior.DiagPosterior:
        return posterior.DiagPosterior(mu=params["mu"], s=np.exp(params["logvar"]))

    q = build()
    kl_report = oracle.finite_diff(lambda: float(posterior.kl_diag(build())), params, posterior.kl_diag_grad(q))
    path = posterior.sample_diag_grad(q, posterior.reparametrize_diag(q, eps), upstream)
    path_report = oracle.finite_diff(
        lambda: float(upstream @ posterior.reparametrize_diag(build(), eps).z), params, path
    )
    return CheckResult(
        "kl_diag_grad / sample_diag_grad finite differences",
        max(kl_report.max_error, path_report.max_error),
        oracle.DEFAULT_TOLERANCE,
    )


def end_to_end_report(kind: str, recon_loss: str = "bernoulli", seed: int = 0, beta: float = 1.0) -> oracle.GradCheckReport:
    """Gradient check of the full batch loss for a tiny model (16 pixels, d'=8, d=4, batch 2)."""
    cfg = trainer.TrainConfig(
        posterior_kind=kind,
        recon_loss=recon_loss,
        beta=beta,
        latent_dim=4,
        hidden_dim=8,
        epochs=1,
        batch_size=2,
        seed=seed,
    )
    model = trainer.build_model(cfg, (4, 4))
    rng = np.random.default_rng((seed, 18))
    x = rng.uniform(0.05, 0.95, size=(2, 16))
    eps = rng.standard_normal((2, cfg.latent_dim))

    model.zero_grad()
    trainer.loss_and_grad(model, x, eps, cfg)
    analytic = {name: grad.copy() for name, grad in model.gradients().items()}

    def loss() -> float:
        return trainer.loss_and_grad(model, x, eps, cfg, need_grad=False).mean_total

    return oracle.finite_diff(loss, model.parameters(), analytic)


def check_end_to_end(kind: str, seed: int) -> CheckResult:
    worst = 0.0
    for recon_loss in trainer.RECON_LOSSES:
        worst = max(worst, end_to_end_report(kind, recon_loss, seed).max_error)
    return CheckResult(f"end-to-end loss gradient ({kind} posterior)", worst, oracle.DEFAULT_TOLERANCE)


def run_checks(mc_draws: int = 200_000, seed: int = 0) -> List[CheckResult]:
    results = [
        check_reconstruction(),
        check_factor_against_dense(),
        check_log_det(),
        check_positive_definite(),
        check_color(seed),
        check_kl_oracle(seed),
        check_kl_diag_oracle(seed),
        check_reduction(seed),
        check_kl_monte_carlo(mc_draws, seed),
        check_color_grad(seed),
        check_kl_ar1_grad(seed),
        check_sample_ar1_grad(seed),
        check_diag_grads(seed),
        check_end_to_end("diag", seed),
        check_end_to_end("ar1", seed),
    ]
    for result in results:
        logger.debug("check finished", extra={"check": result.name, "max_error": result.max_error})
    return results


def format_table(results: List[CheckResult]) -> str:
    width = max(len(result.name) for result in results)
    lines = [f"{'check':{width}}  {'max error':>12}  {'tolerance':>10}  status", "-" * (width + 36)]
    for result in results:
        status = "ok" if result.passed else "FAIL"
        lines.append(f"{result.name:{width}}  {result.max_error:12.3e}  {result.tolerance:10.1e}  {status}")
    return "\n".join(lines)


def summarize(results: List[CheckResult]) -> Tuple[int, List[str]]:
    failures = [result.name for result in results if not result.passed]
    return len(results) - len(failures), failures
