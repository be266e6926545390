"""Versioned model checkpoint container (see docs/checkpoint_format.md)."""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

from .errors import CheckpointError
from .nets import Vae
from .trainer import TrainConfig, build_model

logger = logging.getLogger(__name__)

MAGIC = b"RHOVAE-CKPT\n"
FORMAT_VERSION = 1
HEADER_LENGTH = struct.Struct(">I")
DTYPE = "<f8"
ITEM_SIZE = np.dtype(DTYPE).itemsize


def to_bytes(model: Vae, cfg: TrainConfig) -> bytes:
    arrays = []
    chunks = []
    offset = 0
    for name, value in model.parameters().items():
        raw = np.ascontiguousarray(value, dtype=DTYPE).tobytes()
        arrays.append({"name": name, "shape": list(value.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header: Dict[str, Any] = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "image_shape": list(model.image_shape),
        "dtype": DTYPE,
        "arrays": arrays,
    }
    encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + HEADER_LENGTH.pack(len(encoded)) + encoded + b"".join(chunks)


def from_bytes(data: bytes) -> Tuple[Vae, TrainConfig]:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a rho-vae checkpoint (bad magic)")
    start = len(MAGIC)
    if len(data) < start + HEADER_LENGTH.size:
        raise CheckpointError("truncated checkpoint header")
    (length,) = HEADER_LENGTH.unpack_from(data, start)
    start += HEADER_LENGTH.size
    try:
        header = json.loads(data[start : start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')!r}")

    try:
        cfg = TrainConfig.from_dict(header["config"])
        model = build_model(cfg, tuple(header["image_shape"]), init="zeros")
        recorded = {entry["name"]: entry for entry in header["arrays"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid checkpoint header: {exc}") from exc
    params = model.parameters()
    payload = data[start + length :]
    if recorded.keys() != params.keys():
        raise CheckpointError("checkpoint arrays do not match the configured architecture")
    for name, target in params.items():
        entry = recorded[name]
        if tuple(entry["shape"]) != target.shape:
            raise CheckpointError(f"{name}: stored shape {entry['shape']} != expected {list(target.shape)}")
        offset, nbytes = entry.get("offset"), entry.get("nbytes")
        if not isinstance(offset, int) or offset < 0 or nbytes != target.size * ITEM_SIZE:
            raise CheckpointError(f"{name}: byte range offset={offset!r} nbytes={nbytes!r} does not fit its shape")
        end = offset + nbytes
        if end > len(payload):
            raise CheckpointError(f"truncated payload while reading {name}")
        target[...] = np.frombuffer(payload[offset:end], dtype=DTYPE).reshape(target.shape)
    return model, cfg


def save_checkpoint(path: Path, model: Vae, cfg: TrainConfig) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(model, cfg))
    logger.info("checkpoint written", extra={"path": str(path)})


def load_checkpoint(path: Path) -> Tuple[Vae, TrainConfig]:
    return from_bytes(path.read_bytes())
