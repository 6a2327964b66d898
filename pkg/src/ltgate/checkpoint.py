"""Versioned binary checkpoints for networks and optimizer state.

Layout (little-endian): magic "LTGC", u16 version, u16 config-hash
length + UTF-8 hash, u32 tensor count, then per tensor a u16 name
length + name, u8 ndim, u32 per dimension, and the float64 payload.
A CRC32 of everything preceding closes the file. Restoring onto a
network with the same architecture reproduces forward outputs bitwise.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import DataFormatError, ShapeError
from .network import Network
from .training import AdamState

_MAGIC = b"LTGC"
_VERSION = 1


def network_tensors(net: Network, adam: AdamState | None = None) -> dict:
    """Flat name -> float64 array map covering weights, gates, thresholds
    and (optionally) optimizer moments."""
    out = {}
    for i, layer in enumerate(net.layers):
        out[f"layer{i}.weights"] = layer.weights
        out[f"layer{i}.bias"] = layer.bias
        out[f"layer{i}.raw_gamma"] = layer.raw_gamma
        out[f"layer{i}.v_th"] = np.float64(layer.threshold.v_th)
    if adam is not None:
        out["optim.step"] = np.float64(adam.step)
        out["optim.lr"] = np.float64(adam.lr)
        for name, m in adam.m.items():
            out[f"optim.m.{name}"] = m
        for name, v in adam.v.items():
            out[f"optim.v.{name}"] = v
    return out


def save_checkpoint(path, net: Network, adam: AdamState | None = None, config_hash: str = "") -> None:
    tensors = network_tensors(net, adam)
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<H", _VERSION)
    hash_bytes = config_hash.encode("utf-8")
    blob += struct.pack("<H", len(hash_bytes))
    blob += hash_bytes
    blob += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<H", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += arr.tobytes(order="C")
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with open(path, "wb") as f:
        f.write(bytes(blob))


class CheckpointData:
    """Parsed checkpoint contents."""

    def __init__(self, config_hash: str, tensors: dict):
        self.config_hash = config_hash
        self.tensors = tensors

    @property
    def has_optimizer(self) -> bool:
        return "optim.step" in self.tensors


def load_checkpoint(path) -> CheckpointData:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 16:
        raise DataFormatError(f"{path}: truncated file")
    if blob[:4] != _MAGIC:
        raise DataFormatError(f"{path}: magic mismatch, not an LTGC checkpoint")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise DataFormatError(f"{path}: checksum failure")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != _VERSION:
        raise DataFormatError(
            f"{path}: version mismatch, expected {_VERSION}, got {version}"
        )
    pos = 6
    (hash_len,) = struct.unpack_from("<H", blob, pos)
    pos += 2
    config_hash = blob[pos : pos + hash_len].decode("utf-8")
    pos += hash_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos) if ndim else ()
        pos += 4 * ndim
        n_items = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n_items, offset=pos).reshape(shape)
        pos += 8 * n_items
        tensors[name] = arr.copy()
    if pos != len(blob) - 4:
        raise DataFormatError(f"{path}: trailing bytes after tensor table")
    return CheckpointData(config_hash, tensors)


def apply_checkpoint(net: Network, ckpt: CheckpointData, adam: AdamState | None = None) -> None:
    """Copy checkpoint tensors into an architecture-matched network.

    Raises DataFormatError for missing tensors and ShapeError when a
    stored tensor disagrees with the target layer's shape.
    """
    for i, layer in enumerate(net.layers):
        for attr in ("weights", "bias", "raw_gamma"):
            key = f"layer{i}.{attr}"
            if key not in ckpt.tensors:
                raise DataFormatError(f"checkpoint is missing tensor {key}")
            stored = ckpt.tensors[key]
            target = getattr(layer, attr)
            if stored.shape != target.shape:
                raise ShapeError(
                    f"{key}: checkpoint shape {stored.shape} does not match "
                    f"network shape {target.shape}"
                )
            setattr(layer, attr, stored.copy())
        key = f"layer{i}.v_th"
        if key not in ckpt.tensors:
            raise DataFormatError(f"checkpoint is missing tensor {key}")
        layer.threshold.v_th = float(ckpt.tensors[key])
    if adam is not None and ckpt.has_optimizer:
        adam.step = int(ckpt.tensors["optim.step"])
        adam.lr = float(ckpt.tensors.get("optim.lr", adam.lr))
        adam.m = {
            k[len("optim.m.") :]: v.copy()
            for k, v in ckpt.tensors.items()
            if k.startswith("optim.m.")
        }
        adam.v = {
            k[len("optim.v.") :]: v.copy()
            for k, v in ckpt.tensors.items()
            if k.startswith("optim.v.")
        }
