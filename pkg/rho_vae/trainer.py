"""Negative-ELBO objective, mini-batch training, evaluation and prior sampling."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import posterior
from .data_io import Dataset, batches
from .errors import ConfigError, InvalidParameterError, NanLossError, ShapeMismatchError
from .nets import AdamState, POSTERIOR_KINDS, Vae, adam_step

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]

RECON_LOSSES = ("bernoulli", "gaussian")
PROB_CLAMP = 1e-7

CSV_FIELDS = ["epoch", "train_loss", "test_loss", "test_recon", "test_kl", "seconds"]
COMPARISON_FIELDS = ["epoch", "diag_test_loss", "ar1_test_loss"]

# Random stream ids, combined with the seed as default_rng((seed, stream, ...)).
# Stream 0 is weight initialisation (see Vae.build).
TRAIN_NOISE_STREAM = 1
EVAL_NOISE_STREAM = 2
SHUFFLE_STREAM = 3
GENERATE_STREAM = 4


@dataclass(frozen=True)
class TrainConfig:
    posterior_kind: str = "ar1"
    recon_loss: str = "bernoulli"
    beta: float = 1.0
    latent_dim: int = 20
    hidden_dim: int = 400
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.posterior_kind not in POSTERIOR_KINDS:
            raise ConfigError("posterior_kind", f"expected one of {', '.join(POSTERIOR_KINDS)}")
        if self.recon_loss not in RECON_LOSSES:
            raise ConfigError("recon_loss", f"expected one of {', '.join(RECON_LOSSES)}")
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise ConfigError("beta", f"must be a positive real, got {self.beta}")
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ConfigError("lr", f"must be a positive real, got {self.lr}")
        for name in ("latent_dim", "hidden_dim", "batch_size"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(name, f"must be a positive integer, got {value!r}")
        if isinstance(self.epochs, bool) or not isinstance(self.epochs, int) or self.epochs < 0:
            raise ConfigError("epochs", f"must be a non-negative integer, got {self.epochs!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed", f"must be an unsigned integer, got {self.seed!r}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        known = {name: data[name] for name in cls.__dataclass_fields__ if name in data}
        return cls(**known)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    test_loss: float
    test_recon: float
    test_kl: float
    seconds: float


@dataclass
class BatchResult:
    recon: Array
    kl: Array
    total: Array

    @property
    def mean_total(self) -> float:
        return float(np.mean(self.total))


@dataclass
class TrainResult:
    model: Vae
    stats: List[EpochStats]
    csv_text: str
    config: TrainConfig
    train_recon: List[float] = field(default_factory=list)
    train_kl: List[float] = field(default_factory=list)


def _check_pixels(x: Array) -> None:
    if np.any(x < 0.0) or np.any(x > 1.0) or not np.all(np.isfinite(x)):
        raise InvalidParameterError("observations must lie in [0, 1]")


def elbo_loss(x: ArrayLike, x_hat: ArrayLike, kl: ArrayLike, cfg: TrainConfig) -> Tuple[Array, Array]:
    """Per-sample (total, recon) with total = recon + beta * kl.

    bernoulli: recon = -sum[x log x_hat + (1 - x) log(1 - x_hat)], x_hat clamped to
    [1e-7, 1 - 1e-7]; gaussian: recon = 0.5 * ||x - x_hat||^2 (unit variance).
    """
    x_arr = np.asarray(x, dtype=np.float64)
    x_hat_arr = np.asarray(x_hat, dtype=np.float64)
    if x_arr.shape != x_hat_arr.shape:
        raise ShapeMismatchError(f"x {x_arr.shape} and x_hat {x_hat_arr.shape} differ")
    _check_pixels(x_arr)
    if cfg.recon_loss == "bernoulli":
        clamped = np.clip(x_hat_arr, PROB_CLAMP, 1.0 - PROB_CLAMP)
        recon = -np.sum(x_arr * np.log(clamped) + (1.0 - x_arr) * np.log1p(-clamped), axis=-1)
    else:
        diff = x_arr - x_hat_arr
        recon = 0.5 * np.sum(diff * diff, axis=-1)
    total = recon + cfg.beta * np.asarray(kl, dtype=np.float64)
    return total, recon


def elbo_loss_grad(x: ArrayLike, x_hat: ArrayLike, cfg: TrainConfig) -> Array:
    """d recon / d x_hat, zero where the bernoulli clamp is active."""
    x_arr = np.asarray(x, dtype=np.float64)
    x_hat_arr = np.asarray(x_hat, dtype=np.float64)
    if cfg.recon_loss == "bernoulli":
        clamped = np.clip(x_hat_arr, PROB_CLAMP, 1.0 - PROB_CLAMP)
        inside = (x_hat_arr > PROB_CLAMP) & (x_hat_arr < 1.0 - PROB_CLAMP)
        return (-(x_arr / clamped) + (1.0 - x_arr) / (1.0 - clamped)) * inside
    return x_hat_arr - x_arr


def loss_and_grad(
    model: Vae, x: ArrayLike, eps: ArrayLike, cfg: TrainConfig, need_grad: bool = True
) -> BatchResult:
    """Batch objective with frozen noise; accumulates d(mean total)/d(parameter) when asked."""
    x_arr = np.asarray(x, dtype=np.float64)
    eps_arr = np.asarray(eps, dtype=np.float64)
    batch = x_arr.shape[0]

    q, encoder_cache = model.encoder.forward(x_arr)
    if model.kind == "diag":
        sample = posterior.reparametrize_diag(q, eps_arr)
    else:
        sample = posterior.reparametrize_ar1(q, eps_arr)
    kl, kl_grad = posterior.kl_pair(model.kind, q)
    x_hat, decoder_cache = model.decoder.forward(sample.z)
    total, recon = elbo_loss(x_arr, x_hat, kl, cfg)
    result = BatchResult(recon=recon, kl=kl, total=total)
    if not need_grad:
        return result

    d_x_hat = elbo_loss_grad(x_arr, x_hat, cfg) / batch
    d_z = model.decoder.backward(decoder_cache, d_x_hat)
    if model.kind == "diag":
        path = posterior.sample_diag_grad(q, sample, d_z)
    else:
        path = posterior.sample_ar1_grad(q, sample, d_z)
    head_grads = {name: path[name] + (cfg.beta / batch) * kl_grad[name] for name in path}
    model.encoder.backward(encoder_cache, head_grads)
    return result


def evaluate(model: Vae, dataset: Dataset, cfg: TrainConfig) -> Tuple[float, float]:
    """Mean test (recon, kl) under the fixed evaluation noise stream."""
    rng = np.random.default_rng((cfg.seed, EVAL_NOISE_STREAM))
    recon_sum = 0.0
    kl_sum = 0.0
    for start in range(0, dataset.count, cfg.batch_size):
        x = dataset.images[start : start + cfg.batch_size]
        eps = rng.standard_normal((x.shape[0], model.latent_dim))
        result = loss_and_grad(model, x, eps, cfg, need_grad=False)
        recon_sum += float(np.sum(result.recon))
        kl_sum += float(np.sum(result.kl))
    return recon_sum / dataset.count, kl_sum / dataset.count


def build_model(cfg: TrainConfig, image_shape: Tuple[int, int], init: str = "uniform") -> Vae:
    return Vae.build(
        posterior_kind=cfg.posterior_kind,
        recon_loss=cfg.recon_loss,
        image_shape=image_shape,
        hidden=cfg.hidden_dim,
        latent=cfg.latent_dim,
        seed=cfg.seed,
        init=init,
    )


def train(
    train_set: Dataset,
    test_set: Dataset,
    cfg: TrainConfig,
    model: Optional[Vae] = None,
    wall_clock: bool = False,
) -> TrainResult:
    if train_set.count == 0:
        raise InvalidParameterError("training split is empty")
    if test_set.count == 0:
        raise InvalidParameterError("test split is empty")
    if train_set.n != test_set.n:
        raise ShapeMismatchError("train and test images differ in size")
    if model is None:
        model = build_model(cfg, train_set.image_shape)

    state = AdamState(lr=cfg.lr)
    noise = np.random.default_rng((cfg.seed, TRAIN_NOISE_STREAM))
    stats: List[EpochStats] = []
    train_recon: List[float] = []
    train_kl: List[float] = []

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        loss_sum = recon_sum = kl_sum = 0.0
        for batch_index, index in enumerate(batches(train_set, cfg.batch_size, (cfg.seed, SHUFFLE_STREAM, epoch))):
            x = train_set.images[index]
            eps = noise.standard_normal((x.shape[0], model.latent_dim))
            model.zero_grad()
            result = loss_and_grad(model, x, eps, cfg)
            batch_loss = result.mean_total
            if not math.isfinite(batch_loss):
                raise NanLossError(epoch, batch_index, batch_loss, model.parameter_norms())
            adam_step(model.parameters(), model.gradients(), state)
            model.mark_updated()
            loss_sum += float(np.sum(result.total))
            recon_sum += float(np.sum(result.recon))
            kl_sum += float(np.sum(result.kl))

        test_recon, test_kl = evaluate(model, test_set, cfg)
        if not (math.isfinite(test_recon) and math.isfinite(test_kl)):
            raise NanLossError(epoch, -1, test_recon + cfg.beta * test_kl, model.parameter_norms())
        elapsed = time.perf_counter() - started
        epoch_stats = EpochStats(
            epoch=epoch,
            train_loss=loss_sum / train_set.count,
            test_loss=test_recon + cfg.beta * test_kl,
            test_recon=test_recon,
            test_kl=test_kl,
            seconds=elapsed if wall_clock else 0.0,
        )
        stats.append(epoch_stats)
        train_recon.append(recon_sum / train_set.count)
        train_kl.append(kl_sum / train_set.count)
        logger.info(
            "epoch finished",
            extra={
                **asdict(epoch_stats),
                "seconds": elapsed,
                "train_recon": train_recon[-1],
                "train_kl": train_kl[-1],
                "posterior_kind": cfg.posterior_kind,
            },
        )

    return TrainResult(
        model=model,
        stats=stats,
        csv_text=format_csv(stats),
        config=cfg,
        train_recon=train_recon,
        train_kl=train_kl,
    )


def generate(model: Vae, count: int, rng: np.random.Generator) -> List[Array]:
    """Decode `count` prior draws z ~ N(0, I); images are (rows, cols) in [0, 1]."""
    if count < 0:
        raise InvalidParameterError("count cannot be negative")
    if count == 0:
        return []
    z = rng.standard_normal((count, model.latent_dim))
    x_hat, _ = model.decoder.forward(z)
    pixels = np.clip(x_hat, 0.0, 1.0)
    return [image.reshape(model.image_shape) for image in pixels]


def format_number(value: float) -> str:
    return np.format_float_positional(value, precision=12, unique=False, fractional=False, trim="k")


def _render_csv(fieldnames: List[str], rows: List[List[str]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(fieldnames)
    writer.writerows(rows)
    return buffer.getvalue()


def format_csv(stats: List[EpochStats]) -> str:
    rows = [
        [str(item.epoch)]
        + [format_number(getattr(item, name)) for name in CSV_FIELDS[1:]]
        for item in stats
    ]
    return _render_csv(CSV_FIELDS, rows)


def format_comparison_csv(diag: List[EpochStats], ar1: List[EpochStats]) -> str:
    rows = [
        [str(left.epoch), format_number(left.test_loss), format_number(right.test_loss)]
        for left, right in zip(diag, ar1)
    ]
    return _render_csv(COMPARISON_FIELDS, rows)


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(text)


@dataclass
class ComparisonResult:
    diag: TrainResult
    ar1: TrainResult

    @property
    def csv_text(self) -> str:
        return format_comparison_csv(self.diag.stats, self.ar1.stats)

    def summary(self) -> str:
        if not self.diag.stats:
            return "no epochs run; nothing to compare"
        last_diag = self.diag.stats[-1]
        last_ar1 = self.ar1.stats[-1]
        difference = last_ar1.test_loss - last_diag.test_loss
        verdict = "ar1 <= diag" if difference <= 0 else "ar1 > diag"
        return (
            f"epoch {last_diag.epoch}: diag test loss {format_number(last_diag.test_loss)} "
            f"(recon {format_number(last_diag.test_recon)}, kl {format_number(last_diag.test_kl)}); "
            f"ar1 test loss {format_number(last_ar1.test_loss)} "
            f"(recon {format_number(last_ar1.test_recon)}, kl {format_number(last_ar1.test_kl)}); "
            f"difference ar1 - diag = {format_number(difference)} [{verdict}]"
        )


def compare_posteriors(train_set: Dataset, test_set: Dataset, cfg: TrainConfig, wall_clock: bool = False) -> ComparisonResult:
    """Train both posterior kinds with otherwise identical settings and seed."""
    results = {}
    for kind in POSTERIOR_KINDS:
        variant = TrainConfig.from_dict({**cfg.to_dict(), "posterior_kind": kind})
        results[kind] = train(train_set, test_set, variant, wall_clock=wall_clock)
    return ComparisonResult(diag=results["diag"], ar1=results["ar1"])
