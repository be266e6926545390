"""Exception hierarchy shared by the library and the CLI."""

from __future__ import annotations

from typing import Dict, Optional

import numpy as np


class RhoVaeError(Exception):
    """Base class for every error raised by rho_vae."""


class InvalidParameterError(RhoVaeError, ValueError):
    pass


class ShapeMismatchError(RhoVaeError, ValueError):
    pass


class ConfigError(InvalidParameterError):
    """A configuration value is invalid; `field` names it."""

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field
        self.reason = message


class IdxFormatError(RhoVaeError, ValueError):
    pass


class CheckpointError(RhoVaeError, ValueError):
    pass


class StaleCacheError(RhoVaeError, RuntimeError):
    pass


class NotPositiveDefiniteError(RhoVaeError, np.linalg.LinAlgError):
    pass


class NanLossError(RhoVaeError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(
        self,
        epoch: int,
        batch: int,
        loss: float,
        parameter_norms: Optional[Dict[str, float]] = None,
    ) -> None:
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        self.parameter_norms = dict(parameter_norms or {})
        norms = ", ".join(f"{name}={value:.4g}" for name, value in self.parameter_norms.items())
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}; parameter norms: {norms or 'n/a'}"
        )
