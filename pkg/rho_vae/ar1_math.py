"""Exact linear algebra for the AR(1) (Kac-Murdock-Szego) covariance family.

The covariance is ``C = s * Toeplitz([1, rho, rho**2, ..., rho**(d-1)])``. Its lower
Cholesky factor has the closed form

    L[i, 0] = sqrt(s) * rho**i
    L[i, j] = sqrt(s) * sqrt(1 - rho**2) * rho**(i - j)     1 <= j <= i

so ``L @ eps`` is the stationary AR(1) recursion

    y[0] = sqrt(s) * eps[0]
    y[j] = rho * y[j-1] + sqrt(s * (1 - rho**2)) * eps[j]

The dense constructors (`materialize`, `cholesky_factor`, `cholesky_mask`) exist for
tests and oracles; the sampling path (`color`, `color_grad` and their batched forms)
is O(d) per vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import InvalidParameterError, ShapeMismatchError

DenseMatrix = NDArray[np.float64]


@dataclass(frozen=True)
class Ar1Cov:
    d: int
    rho: float
    s: float

    def __post_init__(self) -> None:
        if isinstance(self.d, bool) or int(self.d) != self.d or self.d < 1:
            raise InvalidParameterError(f"d must be a positive integer, got {self.d!r}")
        if not math.isfinite(self.rho) or abs(self.rho) >= 1.0:
            raise InvalidParameterError(f"rho must lie strictly inside (-1, 1), got {self.rho!r}")
        if not math.isfinite(self.s) or self.s <= 0.0:
            raise InvalidParameterError(f"s must be a finite positive real, got {self.s!r}")
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "s", float(self.s))

    @property
    def innovation_scale(self) -> float:
        """sqrt(s * (1 - rho**2)), the scale of every innovation after the first."""
        return math.sqrt(self.s * (1.0 - self.rho) * (1.0 + self.rho))


def _lags(d: int) -> NDArray[np.int64]:
    index = np.arange(d)
    return np.subtract.outer(index, index)


def materialize(cov: Ar1Cov) -> DenseMatrix:
    return cov.s * np.power(cov.rho, np.abs(_lags(cov.d)))


def log_det(cov: Ar1Cov) -> float:
    return cov.d * math.log(cov.s) + (cov.d - 1) * math.log1p(-cov.rho * cov.rho)


def _column_scales(cov: Ar1Cov) -> NDArray[np.float64]:
    scales = np.full(cov.d, cov.innovation_scale)
    scales[0] = math.sqrt(cov.s)
    return scales


def cholesky_factor(cov: Ar1Cov) -> DenseMatrix:
    lags = _lags(cov.d)
    powers = np.where(lags >= 0, np.power(cov.rho, np.maximum(lags, 0)), 0.0)
    return powers * _column_scales(cov)[np.newaxis, :]


def cholesky_mask(cov: Ar1Cov) -> DenseMatrix:
    """Structured matrix M with ``materialize(cov) * M == cholesky_factor(cov)``."""
    lower = _lags(cov.d) >= 0
    return np.where(lower, _column_scales(cov)[np.newaxis, :] / cov.s, 0.0)


def _as_rows(rho: ArrayLike, s: ArrayLike, eps: ArrayLike) -> Tuple[NDArray, NDArray, NDArray]:
    eps_arr = np.asarray(eps, dtype=np.float64)
    if eps_arr.ndim == 0:
        raise ShapeMismatchError("eps must be a vector or a batch of vectors")
    rho_arr = np.asarray(rho, dtype=np.float64)
    s_arr = np.asarray(s, dtype=np.float64)
    lead = eps_arr.shape[:-1]
    try:
        rho_arr = np.broadcast_to(rho_arr, lead)
        s_arr = np.broadcast_to(s_arr, lead)
    except ValueError as exc:
        raise ShapeMismatchError(
            f"rho {rho_arr.shape} and s {s_arr.shape} do not match the batch shape {lead}"
        ) from exc
    return rho_arr, s_arr, eps_arr


def color_batch(rho: ArrayLike, s: ArrayLike, eps: ArrayLike) -> NDArray[np.float64]:
    """Apply the AR(1) recursion along the last axis, one (rho, s) per leading index."""
    rho_arr, s_arr, eps_arr = _as_rows(rho, s, eps)
    root_s = np.sqrt(s_arr)
    innovation = root_s * np.sqrt((1.0 - rho_arr) * (1.0 + rho_arr))

    y = np.empty_like(eps_arr)
    if eps_arr.shape[-1] == 0:
        return y
    y[..., 0] = root_s * eps_arr[..., 0]
    for j in range(1, eps_arr.shape[-1]):
        y[..., j] = rho_arr * y[..., j - 1] + innovation * eps_arr[..., j]
    return y


def color(cov: Ar1Cov, eps: ArrayLike) -> NDArray[np.float64]:
    eps_arr = np.asarray(eps, dtype=np.float64)
    if eps_arr.ndim != 1 or eps_arr.shape[0] != cov.d:
        raise ShapeMismatchError(f"eps must have length {cov.d}, got shape {eps_arr.shape}")
    return color_batch(cov.rho, cov.s, eps_arr)


def color_grad_batch(
    rho: ArrayLike, s: ArrayLike, eps: ArrayLike, upstream: ArrayLike
) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Return (d<upstream, y>/d rho, d<upstream, y>/d log s) per leading index.

    y is linear in sqrt(s), so dy/dlog s = y / 2. The rho tangent g = dy/drho obeys
    g[0] = 0, g[j] = y[j-1] + rho * g[j-1] + d(innovation)/drho * eps[j].
    """
    rho_arr, s_arr, eps_arr = _as_rows(rho, s, eps)
    upstream_arr = np.asarray(upstream, dtype=np.float64)
    if upstream_arr.shape != eps_arr.shape:
        raise ShapeMismatchError(f"upstream shape {upstream_arr.shape} != eps shape {eps_arr.shape}")

    root_s = np.sqrt(s_arr)
    one_minus_rho2 = (1.0 - rho_arr) * (1.0 + rho_arr)
    innovation = root_s * np.sqrt(one_minus_rho2)
    d_innovation = -root_s * rho_arr / np.sqrt(one_minus_rho2)

    d = eps_arr.shape[-1]
    d_rho = np.zeros(eps_arr.shape[:-1])
    d_log_s = np.zeros(eps_arr.shape[:-1])
    if d == 0:
        return d_rho, d_log_s

    y_prev = root_s * eps_arr[..., 0]
    g_prev = np.zeros_like(y_prev)
    d_log_s = d_log_s + 0.5 * upstream_arr[..., 0] * y_prev
    for j in range(1, d):
        g = y_prev + rho_arr * g_prev + d_innovation * eps_arr[..., j]
        y = rho_arr * y_prev + innovation * eps_arr[..., j]
        d_rho = d_rho + upstream_arr[..., j] * g
        d_log_s = d_log_s + 0.5 * upstream_arr[..., j] * y
        y_prev, g_prev = y, g
    return d_rho, d_log_s


def color_grad(cov: Ar1Cov, eps: ArrayLike, upstream: ArrayLike) -> Tuple[float, float]:
    eps_arr = np.asarray(eps, dtype=np.float64)
    upstream_arr = np.asarray(upstream, dtype=np.float64)
    if eps_arr.shape != (cov.d,) or upstream_arr.shape != (cov.d,):
        raise ShapeMismatchError(
            f"eps and upstream must have length {cov.d}, got {eps_arr.shape} and {upstream_arr.shape}"
        )
    d_rho, d_log_s = color_grad_batch(cov.rho, cov.s, eps_arr, upstream_arr)
    return float(d_rho), float(d_log_s)
