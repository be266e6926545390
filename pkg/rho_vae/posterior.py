"""Diagonal and AR(1) Gaussian approximate posteriors.

Both families expose the closed-form KL divergence to the N(0, I_d) prior,
reparametrized sampling, and the analytic gradients of both. Every field may carry a
leading batch axis: ``mu`` is (d,) or (B, d); for the AR(1) family ``rho`` and ``s``
are then scalars or (B,) arrays.

Gradients are returned with respect to the raw network outputs that the optimizer
updates: log-variance for the diagonal family, and ``log s`` and ``rho_raw`` (with
``rho = tanh(rho_raw)``) for the AR(1) family. The squashing itself lives in the
encoder heads.

Noise is drawn from a caller-supplied ``numpy.random.Generator``; its
``standard_normal`` uses the ziggurat method and is deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import ar1_math
from .errors import InvalidParameterError, ShapeMismatchError

Array = NDArray[np.float64]


@dataclass(frozen=True)
class DiagPosterior:
    mu: Array
    s: Array

    def __post_init__(self) -> None:
        mu = np.asarray(self.mu, dtype=np.float64)
        s = np.asarray(self.s, dtype=np.float64)
        if mu.ndim == 0 or mu.shape != s.shape:
            raise ShapeMismatchError(f"mu {mu.shape} and s {s.shape} must be equal-length vectors")
        if not np.all(np.isfinite(s)) or np.any(s <= 0.0):
            raise InvalidParameterError("diagonal variances must be finite and strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "s", s)

    @property
    def d(self) -> int:
        return self.mu.shape[-1]


@dataclass(frozen=True)
class Ar1Posterior:
    mu: Array
    rho: Array
    s: Array

    def __post_init__(self) -> None:
        mu = np.asarray(self.mu, dtype=np.float64)
        rho = np.asarray(self.rho, dtype=np.float64)
        s = np.asarray(self.s, dtype=np.float64)
        if mu.ndim == 0:
            raise ShapeMismatchError("mu must be a vector or a batch of vectors")
        if rho.shape != mu.shape[:-1] or s.shape != mu.shape[:-1]:
            raise ShapeMismatchError(
                f"rho {rho.shape} and s {s.shape} must match the batch shape {mu.shape[:-1]}"
            )
        if not np.all(np.abs(rho) < 1.0):
            raise InvalidParameterError("rho must lie strictly inside (-1, 1)")
        if not np.all(np.isfinite(s)) or np.any(s <= 0.0):
            raise InvalidParameterError("s must be finite and strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "s", s)

    @property
    def d(self) -> int:
        return self.mu.shape[-1]

    def cov(self) -> ar1_math.Ar1Cov:
        """Covariance of a single (unbatched) posterior."""
        if self.mu.ndim != 1:
            raise ShapeMismatchError("cov() is defined for a single posterior, not a batch")
        return ar1_math.Ar1Cov(self.d, float(self.rho), float(self.s))


@dataclass(frozen=True)
class LatentSample:
    z: Array
    eps: Array

    def __post_init__(self) -> None:
        if np.shape(self.z) != np.shape(self.eps):
            raise ShapeMismatchError(f"z {np.shape(self.z)} and eps {np.shape(self.eps)} differ")


def kl_diag(p: DiagPosterior) -> Array:
    return 0.5 * np.sum(p.s + p.mu * p.mu - 1.0 - np.log(p.s), axis=-1)


def kl_diag_grad(p: DiagPosterior) -> Dict[str, Array]:
    """Gradient of kl_diag with respect to mu and log-variance."""
    return {"mu": p.mu.copy(), "logvar": 0.5 * (p.s - 1.0)}


def kl_ar1(p: Ar1Posterior) -> Array:
    d = p.d
    return 0.5 * (
        np.sum(p.mu * p.mu, axis=-1)
        + d * (p.s - 1.0 - np.log(p.s))
        - (d - 1) * np.log1p(-p.rho * p.rho)
    )


def kl_ar1_grad(p: Ar1Posterior) -> Dict[str, Array]:
    # d/drho of -(d-1)/2 log(1-rho^2) is (d-1) rho / (1-rho^2); the tanh Jacobian
    # (1-rho^2) cancels the denominator.
    d = p.d
    return {
        "mu": p.mu.copy(),
        "log_s": 0.5 * d * (p.s - 1.0),
        "rho_raw": (d - 1) * p.rho,
    }


def reparametrize_diag(p: DiagPosterior, eps: ArrayLike) -> LatentSample:
    eps_arr = np.asarray(eps, dtype=np.float64)
    if eps_arr.shape != p.mu.shape:
        raise ShapeMismatchError(f"eps shape {eps_arr.shape} != mu shape {p.mu.shape}")
    return LatentSample(z=p.mu + np.sqrt(p.s) * eps_arr, eps=eps_arr)


def sample_diag(p: DiagPosterior, rng: np.random.Generator) -> LatentSample:
    return reparametrize_diag(p, rng.standard_normal(p.mu.shape))


def sample_diag_grad(p: DiagPosterior, sample: LatentSample, upstream: ArrayLike) -> Dict[str, Array]:
    """Pathwise gradient of <upstream, z> with respect to mu and log-variance."""
    upstream_arr = np.asarray(upstream, dtype=np.float64)
    if upstream_arr.shape != p.mu.shape or sample.eps.shape != p.mu.shape:
        raise ShapeMismatchError("upstream, eps and mu must share one shape")
    return {
        "mu": upstream_arr.copy(),
        "logvar": 0.5 * upstream_arr * np.sqrt(p.s) * sample.eps,
    }


def reparametrize_ar1(p: Ar1Posterior, eps: ArrayLike) -> LatentSample:
    eps_arr = np.asarray(eps, dtype=np.float64)
    if eps_arr.shape != p.mu.shape:
        raise ShapeMismatchError(f"eps shape {eps_arr.shape} != mu shape {p.mu.shape}")
    return LatentSample(z=p.mu + ar1_math.color_batch(p.rho, p.s, eps_arr), eps=eps_arr)


def sample_ar1(p: Ar1Posterior, rng: np.random.Generator) -> LatentSample:
    return reparametrize_ar1(p, rng.standard_normal(p.mu.shape))


def sample_ar1_grad(p: Ar1Posterior, sample: LatentSample, upstream: ArrayLike) -> Dict[str, Array]:
    """Pathwise gradient of <upstream, z> with respect to mu, log s and rho_raw."""
    upstream_arr = np.asarray(upstream, dtype=np.float64)
    if upstream_arr.shape != p.mu.shape or sample.eps.shape != p.mu.shape:
        raise ShapeMismatchError("upstream, eps and mu must share one shape")
    d_rho, d_log_s = ar1_math.color_grad_batch(p.rho, p.s, sample.eps, upstream_arr)
    return {
        "mu": upstream_arr.copy(),
        "log_s": d_log_s,
        "rho_raw": d_rho * (1.0 - p.rho) * (1.0 + p.rho),
    }


def isotropic(p: Ar1Posterior) -> DiagPosterior:
    """The diagonal posterior with the same mean and variance vector s * 1_d."""
    s = np.broadcast_to(np.asarray(p.s)[..., np.newaxis], p.mu.shape)
    return DiagPosterior(mu=p.mu, s=np.array(s))


def kl_pair(kind: str, p) -> Tuple[Array, Dict[str, Array]]:
    """KL value and gradient for either family, keyed by posterior kind."""
    if kind == "diag":
        return kl_diag(p), kl_diag_grad(p)
    if kind == "ar1":
        return kl_ar1(p), kl_ar1_grad(p)
    raise InvalidParameterError(f"unknown posterior kind {kind!r}")
