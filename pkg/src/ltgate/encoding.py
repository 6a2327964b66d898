"""Dataset ingestion and rate coding into spike trains.

Images (IDX files or synthetic blobs) are turned into binary rasters by
Bernoulli rate coding: each pixel spikes per step with probability
intensity * max_rate_hz * dt_ms / 1000, clamped to [0, 1]. Presentation
frequency is the only thing that differs between the fast, slow, and
exposure domains. A small checksummed binary format (LTGS) round-trips
encoded batches.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError, ParameterError, ShapeError

_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801
_LTGS_MAGIC = b"LTGS"
_LTGS_VERSION = 1


@dataclass
class ImageDataset:
    """Intensity images in [0, 1] with integer class labels."""

    images: np.ndarray  # [N, H, W]
    labels: np.ndarray  # [N]
    name: str = ""
    split: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.images.ndim != 3:
            raise ShapeError(f"images must be [N,H,W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ShapeError(
                f"image/label count mismatch: {len(self.images)} vs {len(self.labels)}"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ParameterError("image intensities must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def feature_dim(self) -> int:
        return int(self.images.shape[1] * self.images.shape[2])


@dataclass
class EncodingSpec:
    """How one domain turns intensities into spikes."""

    frequency_hz: float
    dt_ms: float = 1.0
    duration_ms: float = 50.0
    max_rate_hz: float | None = None
    scheme: str = "bernoulli_rate"
    seed: int = 0

    def __post_init__(self):
        if self.max_rate_hz is None:
            self.max_rate_hz = self.frequency_hz
        if not (self.frequency_hz > 0.0):
            raise ParameterError(
                f"frequency_hz must be positive, got {self.frequency_hz}"
            )
        if not (self.dt_ms > 0.0):
            raise ParameterError(f"dt_ms must be positive, got {self.dt_ms}")
        if self.duration_ms < self.dt_ms:
            raise ParameterError(
                f"duration_ms ({self.duration_ms}) must be >= dt_ms ({self.dt_ms})"
            )
        if self.max_rate_hz * self.dt_ms / 1000.0 > 1.0 + 1e-12:
            raise ParameterError(
                f"frequency_hz: per-step spike probability "
                f"{self.max_rate_hz * self.dt_ms / 1000.0:.3f} exceeds 1"
            )
        if self.scheme != "bernoulli_rate":
            raise ParameterError(f"unsupported scheme: {self.scheme!r}")
        if self.seed < 0:
            raise ParameterError(f"seed must be >= 0, got {self.seed}")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration_ms / self.dt_ms))

    def spike_probability(self, intensity):
        return np.clip(
            np.asarray(intensity) * self.max_rate_hz * self.dt_ms / 1000.0, 0.0, 1.0
        )

    def to_dict(self) -> dict:
        return {
            "frequency_hz": self.frequency_hz,
            "dt_ms": self.dt_ms,
            "duration_ms": self.duration_ms,
            "max_rate_hz": self.max_rate_hz,
            "scheme": self.scheme,
            "seed": self.seed,
        }


@dataclass
class SpikeTrainBatch:
    """Binary spike raster [batch, T, features] plus its encoding."""

    spikes: np.ndarray
    spec: EncodingSpec
    source_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.spikes = np.asarray(self.spikes, dtype=np.uint8)
        if self.spikes.ndim != 3:
            raise ShapeError(
                f"spikes must be [batch, T, features], got {self.spikes.shape}"
            )
        if self.spikes.size and self.spikes.max() > 1:
            raise ParameterError("spike raster entries must be binary")
        if self.spikes.shape[1] != self.spec.n_steps:
            raise ShapeError(
                f"raster has {self.spikes.shape[1]} steps but the spec gives "
                f"{self.spec.n_steps}"
            )
        if self.source_ids is None:
            self.source_ids = np.arange(self.spikes.shape[0], dtype=np.int64)
        else:
            self.source_ids = np.asarray(self.source_ids, dtype=np.int64)

    def __len__(self) -> int:
        return self.spikes.shape[0]


def _read_exact(f, n: int, path, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DataFormatError(f"{path}: truncated file while reading {what}")
    return data


def load_idx(images_path, labels_path) -> ImageDataset:
    """Parse big-endian IDX image/label files into a dataset."""
    images_path = Path(images_path)
    labels_path = Path(labels_path)
    with open(images_path, "rb") as f:
        magic, n, h, w = struct.unpack(">iiii", _read_exact(f, 16, images_path, "header"))
        if magic != _IDX_IMAGE_MAGIC:
            raise DataFormatError(
                f"{images_path}: magic mismatch, expected "
                f"0x{_IDX_IMAGE_MAGIC:08x}, got 0x{magic:08x}"
            )
        raw = _read_exact(f, n * h * w, images_path, "pixel data")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w) / 255.0
    with open(labels_path, "rb") as f:
        magic, n_labels = struct.unpack(">ii", _read_exact(f, 8, labels_path, "header"))
        if magic != _IDX_LABEL_MAGIC:
            raise DataFormatError(
                f"{labels_path}: magic mismatch, expected "
                f"0x{_IDX_LABEL_MAGIC:08x}, got 0x{magic:08x}"
            )
        raw = _read_exact(f, n_labels, labels_path, "label data")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if n != n_labels:
        raise DataFormatError(
            f"image/label count mismatch: {n} images vs {n_labels} labels"
        )
    return ImageDataset(images=images, labels=labels, name=images_path.stem)


def encode(ds: ImageDataset, spec: EncodingSpec, indices=None) -> SpikeTrainBatch:
    """Bernoulli rate coding of selected dataset images.

    Each sample's raster depends only on (spec.seed, dataset index), so
    re-encoding any subset reproduces the same spikes regardless of
    batch composition.
    """
    if indices is None:
        indices = np.arange(len(ds))
    indices = np.asarray(indices, dtype=np.int64)
    t = spec.n_steps
    f = ds.feature_dim
    flat = ds.images.reshape(len(ds), -1)
    out = np.empty((len(indices), t, f), dtype=np.uint8)
    for row, i in enumerate(indices):
        p = spec.spike_probability(flat[i])
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, int(i)]))
        out[row] = rng.random((t, f)) < p
    return SpikeTrainBatch(spikes=out, spec=spec, source_ids=indices)


def make_toy_dataset(
    classes: int,
    n_per_class: int,
    feature_dim: int,
    separation: float,
    seed: int,
    noise: float = 0.1,
    split: str = "train",
    image_hw: tuple[int, int] | None = None,
) -> ImageDataset:
    """Gaussian-blob intensity images, linearly separable for large separation.

    Class prototypes sit at 0.5 + separation*noise along random unit
    directions; samples add isotropic noise and are clipped to [0, 1].
    Prototypes depend only on `seed`, so train and test splits of the
    same seed share the class structure while drawing disjoint samples.
    """
    if separation < 0.0:
        raise ParameterError(f"separation must be >= 0, got {separation}")
    if noise <= 0.0:
        raise ParameterError(f"noise must be positive, got {noise}")
    h, w = image_hw if image_hw is not None else (1, feature_dim)
    if h * w != feature_dim:
        raise ShapeError(f"image_hw {image_hw} does not match feature_dim {feature_dim}")
    proto_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    directions = proto_rng.normal(size=(classes, feature_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    prototypes = 0.5 + separation * noise * directions
    split_code = {"train": 0, "test": 1, "probe": 2}.get(split)
    if split_code is None:
        raise ParameterError(f"unknown split: {split!r}")
    sample_rng = np.random.default_rng(np.random.SeedSequence([seed, 1, split_code]))
    labels = np.repeat(np.arange(classes), n_per_class)
    samples = prototypes[labels] + noise * sample_rng.normal(
        size=(len(labels), feature_dim)
    )
    samples = np.clip(samples, 0.0, 1.0)
    order = sample_rng.permutation(len(labels))
    return ImageDataset(
        images=samples[order].reshape(-1, h, w),
        labels=labels[order],
        name="toy",
        split=split,
    )


def save_spikes(batch: SpikeTrainBatch, path) -> None:
    """Write one batch to the LTGS container.

    Layout (little-endian): magic "LTGS", u16 version, u32 batch/T/
    features, u32 metadata length + UTF-8 JSON (spec fields and source
    ids), bit-packed raster, u32 CRC32 of all preceding bytes.
    """
    b, t, f = batch.spikes.shape
    meta = dict(batch.spec.to_dict())
    meta["source_ids"] = batch.source_ids.tolist()
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = np.packbits(batch.spikes.reshape(-1)).tobytes()
    blob = bytearray()
    blob += _LTGS_MAGIC
    blob += struct.pack("<H", _LTGS_VERSION)
    blob += struct.pack("<III", b, t, f)
    blob += struct.pack("<I", len(meta_bytes))
    blob += meta_bytes
    blob += payload
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_spikes(path) -> SpikeTrainBatch:
    """Read an LTGS file back into a bit-exact SpikeTrainBatch."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 22:
        raise DataFormatError(f"{path}: truncated file")
    if blob[:4] != _LTGS_MAGIC:
        raise DataFormatError(f"{path}: magic mismatch, not an LTGS file")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise DataFormatError(f"{path}: checksum failure")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != _LTGS_VERSION:
        raise DataFormatError(
            f"{path}: version mismatch, expected {_LTGS_VERSION}, got {version}"
        )
    b, t, f = struct.unpack("<III", blob[6:18])
    (meta_len,) = struct.unpack("<I", blob[18:22])
    meta_end = 22 + meta_len
    meta = json.loads(blob[22:meta_end].decode("utf-8"))
    source_ids = np.asarray(meta.pop("source_ids"), dtype=np.int64)
    spec = EncodingSpec(**meta)
    n_bits = b * t * f
    packed = np.frombuffer(blob[meta_end:-4], dtype=np.uint8)
    bits = np.unpackbits(packed)[:n_bits]
    return SpikeTrainBatch(
        spikes=bits.reshape(b, t, f), spec=spec, source_ids=source_ids
    )
