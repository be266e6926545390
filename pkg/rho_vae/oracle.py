"""Independent verification machinery for the test suite and the self-check.

Nothing here imports the structured AR(1) code: matrices are built entry by entry and
factorised with the textbook Cholesky algorithm, so agreement with the closed forms is
evidence rather than tautology.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import InvalidParameterError, NotPositiveDefiniteError, ShapeMismatchError

Array = NDArray[np.float64]
DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
DEFAULT_ABS_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    errors: Dict[str, float]
    step: float
    tolerance: float
    abs_floor: float = DEFAULT_ABS_FLOOR
    passed: bool = field(init=False)

    def __post_init__(self) -> None:
        self.passed = all(error < self.tolerance for error in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst(self) -> str:
        return max(self.errors, key=self.errors.get) if self.errors else ""


def kms_matrix(d: int, rho: float, s: float) -> Array:
    """s * rho**|i-j| filled entry by entry."""
    m = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            m[i, j] = s * rho ** abs(i - j)
    return m


def dense_cholesky(m: ArrayLike) -> Array:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatchError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    lower = np.zeros_like(a)
    for i in range(n):
        for j in range(i + 1):
            acc = float(lower[i, :j] @ lower[j, :j])
            if i == j:
                pivot = a[i, i] - acc
                if not pivot > 0.0:
                    raise NotPositiveDefiniteError(f"not positive definite: pivot {i} is {pivot:.6g}")
                lower[i, j] = math.sqrt(pivot)
            else:
                lower[i, j] = (a[i, j] - acc) / lower[j, j]
    return lower


def dense_log_det(m: ArrayLike) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(dense_cholesky(m)))))


def gaussian_kl(mu: ArrayLike, cov: ArrayLike) -> float:
    """KL[N(mu, cov) || N(0, I)] = 0.5 (tr C + mu^T mu - d - log det C)."""
    mu_arr = np.asarray(mu, dtype=np.float64)
    cov_arr = np.asarray(cov, dtype=np.float64)
    if cov_arr.shape != (mu_arr.size, mu_arr.size):
        raise ShapeMismatchError(f"cov {cov_arr.shape} does not match mu of length {mu_arr.size}")
    return 0.5 * (float(np.trace(cov_arr)) + float(mu_arr @ mu_arr) - mu_arr.size - dense_log_det(cov_arr))


def gaussian_log_density(z: ArrayLike, mu: ArrayLike, cov: ArrayLike) -> Array:
    """log N(z | mu, cov) for every row of z."""
    z_arr = np.atleast_2d(np.asarray(z, dtype=np.float64))
    mu_arr = np.asarray(mu, dtype=np.float64)
    lower = dense_cholesky(cov)
    white = np.linalg.solve(lower, (z_arr - mu_arr).T)
    d = mu_arr.size
    log_det = 2.0 * float(np.sum(np.log(np.diag(lower))))
    return -0.5 * np.sum(white * white, axis=0) - 0.5 * log_det - 0.5 * d * math.log(2.0 * math.pi)


def standard_normal_log_density(z: ArrayLike) -> Array:
    z_arr = np.atleast_2d(np.asarray(z, dtype=np.float64))
    d = z_arr.shape[-1]
    return -0.5 * np.sum(z_arr * z_arr, axis=-1) - 0.5 * d * math.log(2.0 * math.pi)


def sample_covariance(draws: ArrayLike) -> Array:
    x = np.asarray(draws, dtype=np.float64)
    centered = x - x.mean(axis=0)
    return centered.T @ centered / (x.shape[0] - 1)


def mc_kl(
    sampler: Callable[[np.random.Generator, int], Array],
    log_q: Callable[[Array], Array],
    log_p: Callable[[Array], Array],
    n_draws: int,
    seed: int,
    shard_size: int = 100_000,
) -> Tuple[float, float]:
    """Monte-Carlo mean and standard error of log q(z) - log p(z), z ~ sampler."""
    if n_draws < 2:
        raise InvalidParameterError(f"n_draws must be at least 2, got {n_draws}")
    rng = np.random.default_rng(seed)
    pieces = []
    remaining = n_draws
    while remaining > 0:
        size = min(shard_size, remaining)
        z = sampler(rng, size)
        pieces.append(log_q(z) - log_p(z))
        remaining -= size
    diffs = np.concatenate(pieces)
    return float(diffs.mean()), float(diffs.std(ddof=1) / math.sqrt(n_draws))


def finite_diff(
    loss_fn: Callable[[], float],
    params: Dict[str, Array],
    analytic: Dict[str, ArrayLike],
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
    abs_floor: float = DEFAULT_ABS_FLOOR,
) -> GradCheckReport:
    """Central differences of `loss_fn` against `analytic`, one entry at a time.

    `params` are perturbed in place and restored; `loss_fn` must read them and keep
    any noise frozen. An entry whose absolute discrepancy is at most `abs_floor`
    counts as exact; otherwise its error is |a - n| / max(|a|, |n|).
    """
    errors: Dict[str, float] = {}
    for name, value in params.items():
        expected = np.asarray(analytic[name], dtype=np.float64)
        if expected.shape != value.shape:
            raise ShapeMismatchError(f"{name}: analytic gradient shape {expected.shape} != {value.shape}")
        worst = 0.0
        for index in np.ndindex(value.shape):
            original = value[index]
            value[index] = original + step
            upper = loss_fn()
            value[index] = original - step
            lower = loss_fn()
            value[index] = original
            numeric = (upper - lower) / (2.0 * step)
            gap = abs(float(expected[index]) - numeric)
            if gap <= abs_floor:
                continue
            worst = max(worst, gap / max(abs(float(expected[index])), abs(numeric)))
        errors[name] = worst
    return GradCheckReport(errors=errors, step=step, tolerance=tolerance, abs_floor=abs_floor)
