"""Command-line surface: train, compare, sample, check and synth subcommands."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__, checks, data_io, trainer
from .checkpoint import load_checkpoint, save_checkpoint
from .config import LOG_FORMATS, Settings, load_settings
from .data_io import Dataset
from .errors import (
    CheckpointError,
    ConfigError,
    IdxFormatError,
    InvalidParameterError,
    RhoVaeError,
    ShapeMismatchError,
)
from .log import configure_logging
from .nets import POSTERIOR_KINDS, head_parameter_count

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_IO = 3

MANIFEST_NAME = "manifest.json"
TRAIN_LOG_NAME = "train_log.csv"
CHECKPOINT_NAME = "model.ckpt"
COMPARISON_NAME = "comparison.csv"

SYNTH = "synth"
SYNTH_TRAIN_COUNT = 4000
SYNTH_TEST_COUNT = 1000
SYNTH_SIDE = 8
SYNTH_RHO = 0.8

# TrainConfig field -> flag that sets it, so validation errors name the flag.
FLAG_FOR_FIELD = {
    "posterior_kind": "--posterior",
    "recon_loss": "--recon",
    "beta": "--beta",
    "latent_dim": "--d",
    "hidden_dim": "--hidden",
    "epochs": "--epochs",
    "batch_size": "--batch",
    "lr": "--lr",
    "seed": "--seed",
}


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors share exit code 1."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise ConfigError("usage", message)


@dataclass
class RunManifest:
    command: str
    config: Dict[str, Any]
    data: Dict[str, Any]
    outputs: Dict[str, str]
    wall_clock: bool = False
    config_hash: str = field(init=False)
    version: str = __version__

    def __post_init__(self) -> None:
        self.config_hash = content_hash({"command": self.command, "config": self.config, "data": self.data})

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def content_hash(payload: Dict[str, Any]) -> str:
    """sha1 over 'blob <len>\\0' + canonical JSON, the way git hashes a blob."""
    body = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def save_json(path: Path, data: Dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        json.dump(data, fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path: Path) -> Dict[str, Any]:
    with path.open("r", encoding="utf-8") as fh:
        return json.load(fh)


def write_manifest(path: Path, manifest: RunManifest) -> None:
    save_json(path, manifest.to_dict())
    logger.info("manifest written", extra={"path": str(path), "config_hash": manifest.config_hash})


def _add_model_flags(parser: argparse.ArgumentParser, settings: Settings) -> None:
    defaults = trainer.TrainConfig()
    parser.add_argument(
        "--data",
        default=str(settings.data_dir) if settings.data_dir else SYNTH,
        help="IDX image directory, or 'synth' for the built-in correlated images (default: RHOVAE_DATA_DIR or synth)",
    )
    parser.add_argument("--recon", default=defaults.recon_loss, help="Reconstruction loss: bernoulli or gaussian")
    parser.add_argument("--d", type=int, default=defaults.latent_dim, help="Latent dimension")
    parser.add_argument("--hidden", type=int, default=defaults.hidden_dim, help="Hidden width of the encoder trunk")
    parser.add_argument("--beta", type=float, default=defaults.beta, help="Weight of the KL term")
    parser.add_argument("--epochs", type=int, default=defaults.epochs, help="Training epochs")
    parser.add_argument("--batch", type=int, default=defaults.batch_size, help="Mini-batch size")
    parser.add_argument("--lr", type=float, default=defaults.lr, help="Adam learning rate")
    parser.add_argument("--seed", type=int, default=defaults.seed, help="Seed for every random stream")
    parser.add_argument("--out", type=Path, default=None, help=f"Output directory (default: {settings.out_dir})")
    parser.add_argument("--wall-clock", action="store_true", help="Record measured epoch seconds in the CSV")
    _add_synth_flags(parser)


def _add_synth_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--synth-train", type=int, default=SYNTH_TRAIN_COUNT, help="Synthetic training images")
    parser.add_argument("--synth-test", type=int, default=SYNTH_TEST_COUNT, help="Synthetic test images")
    parser.add_argument("--synth-side", type=int, default=SYNTH_SIDE, help="Synthetic image side length")
    parser.add_argument("--synth-rho", type=float, default=SYNTH_RHO, help="Pixel lag-1 correlation of synthetic images")


def build_parser(settings: Settings) -> ArgumentParser:
    parser = ArgumentParser(prog="rho-vae", description="AR(1)-correlated Gaussian posteriors for VAEs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default=settings.log_level, help="Logging level (default: RHOVAE_LOG_LEVEL or INFO)")
    common.add_argument("--log-format", default=settings.log_format, choices=LOG_FORMATS, help="Log record format on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", parents=[common], help="Train one VAE and write its CSV log, checkpoint and manifest.")
    train.add_argument("--posterior", default=trainer.TrainConfig().posterior_kind, help="diag or ar1")
    _add_model_flags(train, settings)
    train.add_argument("--from-manifest", type=Path, default=None, help="Re-run a recorded manifest.json")

    compare = sub.add_parser("compare", parents=[common], help="Train the diag and ar1 variants with identical settings.")
    _add_model_flags(compare, settings)

    sample = sub.add_parser("sample", parents=[common], help="Decode prior draws from a checkpoint into a PGM grid.")
    sample.add_argument("--checkpoint", type=Path, required=True, help="model.ckpt written by train")
    sample.add_argument("--count", type=int, default=64, help="Number of images")
    sample.add_argument("--seed", type=int, default=0, help="Seed of the generation stream")
    sample.add_argument("--out", type=Path, default=None, help=f"PGM file (default: {settings.out_dir / 'samples.pgm'})")

    check = sub.add_parser("check", parents=[common], help="Run the numerical self-check suite.")
    check.add_argument("--mc-draws", type=int, default=200_000, help="Monte-Carlo draws per KL setting")
    check.add_argument("--seed", type=int, default=0, help="Seed of the check suite")

    synth = sub.add_parser("synth", parents=[common], help="Export the synthetic correlated dataset as IDX files.")
    _add_synth_flags(synth)
    synth.add_argument("--seed", type=int, default=0, help="Dataset seed")
    synth.add_argument("--out", type=Path, default=None, help=f"Output directory (default: {settings.out_dir / 'synth'})")
    return parser


def _train_config(args: argparse.Namespace, posterior_kind: str) -> trainer.TrainConfig:
    try:
        return trainer.TrainConfig(
            posterior_kind=posterior_kind,
            recon_loss=args.recon,
            beta=args.beta,
            latent_dim=args.d,
            hidden_dim=args.hidden,
            epochs=args.epochs,
            batch_size=args.batch,
            lr=args.lr,
            seed=args.seed,
        )
    except ConfigError as exc:
        raise ConfigError(FLAG_FOR_FIELD.get(exc.field, exc.field), exc.reason) from exc


def _data_source(args: argparse.Namespace) -> Dict[str, Any]:
    if args.data != SYNTH:
        return {"source": "idx", "directory": str(args.data)}
    if args.synth_train < 1:
        raise ConfigError("--synth-train", f"must be a positive integer, got {args.synth_train}")
    if args.synth_test < 1:
        raise ConfigError("--synth-test", f"must be a positive integer, got {args.synth_test}")
    if args.synth_side < 1:
        raise ConfigError("--synth-side", f"must be a positive integer, got {args.synth_side}")
    if not (math.isfinite(args.synth_rho) and abs(args.synth_rho) < 1.0):
        raise ConfigError("--synth-rho", f"must lie strictly inside (-1, 1), got {args.synth_rho}")
    return {
        "source": SYNTH,
        "train_count": args.synth_train,
        "test_count": args.synth_test,
        "side": args.synth_side,
        "rho_pix": args.synth_rho,
    }


def load_data(source: Dict[str, Any], seed: int) -> Tuple[Dataset, Dataset]:
    if source["source"] == SYNTH:
        return data_io.synth_splits(
            source["train_count"], source["test_count"], source["side"], source["rho_pix"], seed
        )
    directory = Path(source["directory"])
    if not directory.is_dir():
        raise FileNotFoundError(f"--data: directory not found: {directory}")
    return data_io.load_idx_directory(directory)


def _out_dir(args: argparse.Namespace, settings: Settings) -> Path:
    return args.out if args.out is not None else settings.out_dir


def _train_outputs(out_dir: Path) -> Dict[str, str]:
    return {
        "manifest": str(out_dir / MANIFEST_NAME),
        "train_log": str(out_dir / TRAIN_LOG_NAME),
        "checkpoint": str(out_dir / CHECKPOINT_NAME),
    }


def _run_one(
    train_set: Dataset, test_set: Dataset, cfg: trainer.TrainConfig, out_dir: Path, wall_clock: bool
) -> trainer.TrainResult:
    result = trainer.train(train_set, test_set, cfg, wall_clock=wall_clock)
    trainer.write_text(out_dir / TRAIN_LOG_NAME, result.csv_text)
    save_checkpoint(out_dir / CHECKPOINT_NAME, result.model, cfg)
    logger.info("training artifacts written", extra={"out_dir": str(out_dir), "posterior_kind": cfg.posterior_kind})
    return result


def cmd_train(args: argparse.Namespace, settings: Settings) -> int:
    if args.from_manifest is not None:
        recorded = load_json(args.from_manifest)
        if recorded.get("command") != "train":
            raise ConfigError("--from-manifest", f"expected a train manifest, got {recorded.get('command')!r}")
        try:
            cfg = trainer.TrainConfig.from_dict(recorded["config"])
            source = dict(recorded["data"])
            recorded_dir = Path(recorded["outputs"]["manifest"]).parent
        except KeyError as exc:
            raise ConfigError("--from-manifest", f"missing key {exc}") from exc
        wall_clock = bool(recorded.get("wall_clock", False))
        out_dir = args.out if args.out is not None else recorded_dir
    else:
        cfg = _train_config(args, args.posterior)
        source = _data_source(args)
        wall_clock = args.wall_clock
        out_dir = _out_dir(args, settings)

    manifest = RunManifest(
        command="train", config=cfg.to_dict(), data=source, outputs=_train_outputs(out_dir), wall_clock=wall_clock
    )
    write_manifest(out_dir / MANIFEST_NAME, manifest)
    train_set, test_set = load_data(source, cfg.seed)
    result = _run_one(train_set, test_set, cfg, out_dir, wall_clock)
    if result.stats:
        last = result.stats[-1]
        print(
            f"{cfg.posterior_kind}: {len(result.stats)} epochs, final test loss "
            f"{trainer.format_number(last.test_loss)}; artifacts in {out_dir}"
        )
    else:
        print(f"{cfg.posterior_kind}: no epochs run; initial weights saved in {out_dir}")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace, settings: Settings) -> int:
    base = _train_config(args, POSTERIOR_KINDS[0])
    source = _data_source(args)
    out_dir = _out_dir(args, settings)
    outputs = {"manifest": str(out_dir / MANIFEST_NAME), "comparison": str(out_dir / COMPARISON_NAME)}
    for kind in POSTERIOR_KINDS:
        for name, path in _train_outputs(out_dir / kind).items():
            if name != "manifest":
                outputs[f"{kind}_{name}"] = path
    manifest = RunManifest(
        command="compare", config=base.to_dict(), data=source, outputs=outputs, wall_clock=args.wall_clock
    )
    write_manifest(out_dir / MANIFEST_NAME, manifest)

    train_set, test_set = load_data(source, base.seed)
    results = {}
    for kind in POSTERIOR_KINDS:
        cfg = trainer.TrainConfig.from_dict({**base.to_dict(), "posterior_kind": kind})
        results[kind] = _run_one(train_set, test_set, cfg, out_dir / kind, args.wall_clock)
    comparison = trainer.ComparisonResult(diag=results["diag"], ar1=results["ar1"])
    trainer.write_text(out_dir / COMPARISON_NAME, comparison.csv_text)

    print(comparison.summary())
    print(
        "posterior head parameters: "
        + ", ".join(f"{kind} {head_parameter_count(kind, base.hidden_dim, base.latent_dim)}" for kind in POSTERIOR_KINDS)
    )
    return EXIT_OK


def tile_grid(images: List[np.ndarray]) -> np.ndarray:
    """Row-major grid with ceil(sqrt(count)) tiles per row; unused tiles stay black."""
    count = len(images)
    rows, cols = images[0].shape
    per_row = math.ceil(math.sqrt(count))
    grid_rows = math.ceil(count / per_row)
    grid = np.zeros((grid_rows * rows, per_row * cols))
    for index, image in enumerate(images):
        r, c = divmod(index, per_row)
        grid[r * rows : (r + 1) * rows, c * cols : (c + 1) * cols] = image
    return grid


def encode_pgm(grid: np.ndarray) -> bytes:
    pixels = np.floor(np.clip(grid, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    height, width = pixels.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def cmd_sample(args: argparse.Namespace, settings: Settings) -> int:
    if args.count < 1:
        raise ConfigError("--count", f"must be a positive integer, got {args.count}")
    if args.seed < 0:
        raise ConfigError("--seed", f"must be an unsigned integer, got {args.seed}")
    out_path = args.out if args.out is not None else settings.out_dir / "samples.pgm"
    manifest_path = out_path.parent / f"{out_path.stem}.manifest.json"

    model, cfg = load_checkpoint(args.checkpoint)
    manifest = RunManifest(
        command="sample",
        config={"checkpoint_config": cfg.to_dict(), "count": args.count, "seed": args.seed},
        data={"source": "checkpoint", "path": str(args.checkpoint)},
        outputs={"manifest": str(manifest_path), "image": str(out_path)},
    )
    write_manifest(manifest_path, manifest)

    rng = np.random.default_rng((args.seed, trainer.GENERATE_STREAM))
    images = trainer.generate(model, args.count, rng)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_bytes(encode_pgm(tile_grid(images)))
    logger.info("sample grid written", extra={"path": str(out_path), "count": args.count})
    print(f"Wrote {args.count} samples to {out_path}")
    return EXIT_OK


def cmd_check(args: argparse.Namespace, settings: Settings) -> int:
    if args.mc_draws < 2:
        raise ConfigError("--mc-draws", f"must be at least 2, got {args.mc_draws}")
    results = checks.run_checks(mc_draws=args.mc_draws, seed=args.seed)
    print(checks.format_table(results))
    passed, failures = checks.summarize(results)
    if failures:
        print(f"{len(failures)} check(s) failed: {', '.join(failures)}")
        return EXIT_RUNTIME
    print(f"all {passed} checks passed")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace, settings: Settings) -> int:
    args.data = SYNTH
    source = _data_source(args)
    if args.seed < 0:
        raise ConfigError("--seed", f"must be an unsigned integer, got {args.seed}")
    out_dir = args.out if args.out is not None else settings.out_dir / SYNTH
    manifest = RunManifest(
        command="synth",
        config={"seed": args.seed},
        data=source,
        outputs={
            "manifest": str(out_dir / MANIFEST_NAME),
            "train_images": str(out_dir / data_io.TRAIN_IMAGES),
            "test_images": str(out_dir / data_io.TEST_IMAGES),
        },
    )
    write_manifest(out_dir / MANIFEST_NAME, manifest)
    train_set, test_set = load_data(source, args.seed)
    written = data_io.save_idx_directory(out_dir, train_set, test_set)
    print(f"Wrote {train_set.count} train and {test_set.count} test images to {', '.join(str(p) for p in written)}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "compare": cmd_compare,
    "sample": cmd_sample,
    "check": cmd_check,
    "synth": cmd_synth,
}


def _fail(code: int, message: str) -> int:
    logger.error(message, extra={"exit_code": code})
    print(f"error: {message}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        settings = load_settings()
        args = build_parser(settings).parse_args(argv)
        configure_logging(args.log_level.upper(), args.log_format)
        return COMMANDS[args.command](args, settings)
    except (IdxFormatError, CheckpointError, OSError) as exc:
        return _fail(EXIT_IO, str(exc))
    except (InvalidParameterError, ShapeMismatchError) as exc:
        return _fail(EXIT_VALIDATION, str(exc))
    except RhoVaeError as exc:
        return _fail(EXIT_RUNTIME, str(exc))
    except ValueError as exc:
        # unknown log level names reach here from logging.setLevel
        return _fail(EXIT_VALIDATION, str(exc))


if __name__ == "__main__":
    raise SystemExit(main())
