"""Versioned binary checkpoint container.

Layout::

    magic   8 bytes  b"PSEDCKPT"
    version u32 LE
    hlen    u32 LE   length of the JSON header in bytes
    header  hlen bytes UTF-8 JSON
    payload little-endian float32 arrays, concatenated in header order

The header records the network config and its hash, the parameter count, a
SHA-256 checksum of the payload, each array's name and shape, and the numpy
bit-generator state of the model RNG.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import OrderedDict

import numpy as np

from ..exceptions import ChecksumError, FormatError, ShapeError
from .network import Embedder, EmbedderConfig

MAGIC = b"PSEDCKPT"
VERSION = 1


def _jsonable_rng_state(state):
    if isinstance(state, dict):
        return {k: _jsonable_rng_state(v) for k, v in state.items()}
    if isinstance(state, (np.integer,)):
        return int(state)
    return state


def save_checkpoint(model: Embedder, path: str | os.PathLike, extra: dict | None = None) -> None:
    arrays = model.state_arrays()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays.values())
    header = {
        "config": model.config.to_dict(),
        "config_hash": model.config.hash(),
        "param_count": model.n_params,
        "checksum": hashlib.sha256(payload).hexdigest(),
        "arrays": [[k, list(a.shape)] for k, a in arrays.items()],
        "rng_state": _jsonable_rng_state(model.rng.bit_generator.state),
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    os.replace(tmp, path)


def read_checkpoint(path: str | os.PathLike) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC or len(blob) < 16:
        raise FormatError(f"{path} is not a protosed checkpoint")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"{path}: corrupt checkpoint header") from exc
    payload = blob[16 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("checksum"):
        raise ChecksumError(f"{path}: payload checksum mismatch")
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    offset = 0
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape).copy()
        offset += 4 * n
    if offset != len(payload):
        raise ChecksumError(f"{path}: payload length does not match header")
    return header, arrays


def load_checkpoint(path: str | os.PathLike, model: Embedder | None = None) -> Embedder:
    """Restore an embedder. With ``model`` given, its config must match the file."""
    header, arrays = read_checkpoint(path)
    cfg_dict = dict(header["config"])
    cfg_dict["channels"] = tuple(cfg_dict["channels"])
    cfg = EmbedderConfig(**cfg_dict)
    if model is None:
        model = Embedder(cfg, seed=0)
    elif model.config.hash() != header["config_hash"]:
        raise ShapeError(
            f"checkpoint network config {header['config_hash']} does not match model "
            f"{model.config.hash()}"
        )
    model.load_state_arrays(arrays)
    model.rng.bit_generator.state = header["rng_state"]
    return model


def checkpoint_extra(path: str | os.PathLike) -> dict:
    return read_checkpoint(path)[0].get("extra", {})
