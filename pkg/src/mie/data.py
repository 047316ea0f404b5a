"""Synthetic multimodal classification data and its binary container.

Each modality draws one Gaussian prototype per class; samples are
prototype times a per-modality signal strength plus unit Gaussian noise,
so the signal strengths directly control which modality dominates.
Datasets round-trip bitwise through the MMD1 container format.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, ValidationError

__all__ = [
    "MultimodalDataset",
    "SyntheticSpec",
    "batches",
    "generate",
    "load_dataset",
    "ordered_batches",
    "save_dataset",
]

DATASET_MAGIC = b"MMD1"
DATASET_VERSION = 1

SPLIT_NAMES = ("train", "val", "test")
_SPLIT_CODE = {name: i for i, name in enumerate(SPLIT_NAMES)}


@dataclass
class MultimodalDataset:
    """Feature blocks per modality, one-hot labels, and split tags."""

    features: list[np.ndarray]  # m blocks, each n x d_j
    labels: np.ndarray  # n x c, one-hot float64
    splits: np.ndarray  # n, uint8 codes into SPLIT_NAMES

    def __post_init__(self):
        if not self.features:
            raise ValidationError("dataset needs at least one modality")
        self.features = [np.asarray(f, dtype=np.float64) for f in self.features]
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.splits = np.asarray(self.splits, dtype=np.uint8)
        n = self.features[0].shape[0]
        for j, block in enumerate(self.features):
            if block.ndim != 2 or block.shape[0] != n:
                raise ValidationError(f"modality {j + 1} block has inconsistent shape")
            if not np.all(np.isfinite(block)):
                raise ValidationError(f"modality {j + 1} features contain non-finite values")
        if self.labels.shape[0] != n or self.labels.ndim != 2:
            raise ValidationError("labels do not match sample count")
        one_hot = (self.labels == 0.0) | (self.labels == 1.0)
        if not (np.all(one_hot) and np.all(self.labels.sum(axis=1) == 1.0)):
            raise ValidationError("labels must be exactly one-hot")
        if self.splits.shape != (n,) or self.splits.max(initial=0) >= len(SPLIT_NAMES):
            raise ValidationError("split tags must be one code per sample")

    @property
    def n(self) -> int:
        return self.features[0].shape[0]

    @property
    def m(self) -> int:
        return len(self.features)

    @property
    def c(self) -> int:
        return self.labels.shape[1]

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(block.shape[1] for block in self.features)

    def split_indices(self, split: str) -> np.ndarray:
        if split not in _SPLIT_CODE:
            raise ValidationError(f"unknown split {split!r}")
        return np.flatnonzero(self.splits == _SPLIT_CODE[split])


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the generator; snr[j] is modality j's dominance."""

    n: int = 2000
    c: int = 10
    m: int = 2
    dims: tuple[int, ...] = (32, 32)
    snr: tuple[float, ...] = (3.0, 0.8)
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        if self.c < 2:
            raise ValidationError("need at least two classes")
        if self.m < 1 or len(self.dims) != self.m or len(self.snr) != self.m:
            raise ValidationError("dims and snr must list one value per modality")
        if any(d < 1 for d in self.dims):
            raise ValidationError("feature dims must be >= 1")
        if any(not np.isfinite(s) or s < 0 for s in self.snr):
            raise ValidationError("snr values must be finite and non-negative")
        if len(self.split_fractions) != 3 or any(f < 0 for f in self.split_fractions):
            raise ValidationError("split_fractions must be three non-negative values")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValidationError(
                f"split_fractions must sum to 1, got {sum(self.split_fractions)}"
            )
        if self.n < 3:
            raise ValidationError("need at least three samples to populate all splits")


def generate(spec: SyntheticSpec) -> MultimodalDataset:
    """Draw a dataset from the spec; identical seeds give identical bytes.

    Labels are assigned round-robin, so class counts differ by at most
    one. Split membership is a seeded shuffle cut at the requested
    fractions, with every split guaranteed non-empty.
    """
    rng = np.random.default_rng(spec.seed)
    labels_idx = np.arange(spec.n) % spec.c
    features = []
    for j in range(spec.m):
        prototypes = rng.standard_normal((spec.c, spec.dims[j]))
        noise = rng.standard_normal((spec.n, spec.dims[j]))
        features.append(spec.snr[j] * prototypes[labels_idx] + noise)
    labels = np.zeros((spec.n, spec.c))
    labels[np.arange(spec.n), labels_idx] = 1.0

    n_train = int(round(spec.split_fractions[0] * spec.n))
    n_val = int(round(spec.split_fractions[1] * spec.n))
    n_train = min(max(n_train, 1), spec.n - 2)
    n_val = min(max(n_val, 1), spec.n - n_train - 1)
    order = rng.permutation(spec.n)
    splits = np.empty(spec.n, dtype=np.uint8)
    splits[order[:n_train]] = _SPLIT_CODE["train"]
    splits[order[n_train : n_train + n_val]] = _SPLIT_CODE["val"]
    splits[order[n_train + n_val :]] = _SPLIT_CODE["test"]
    return MultimodalDataset(features=features, labels=labels, splits=splits)


def save_dataset(dataset: MultimodalDataset, path) -> None:
    """Write the MMD1 container.

    Layout: magic "MMD1", version byte, little-endian u32 n/m/c, u32 d_j
    per modality, float64 feature blocks modality-major, u16 class
    indices, u8 split tags, and a trailing u32 CRC-32 over everything
    between the magic and the checksum.
    """
    payload = [struct.pack("<BIII", DATASET_VERSION, dataset.n, dataset.m, dataset.c)]
    payload.append(struct.pack(f"<{dataset.m}I", *dataset.dims))
    for block in dataset.features:
        payload.append(np.ascontiguousarray(block, dtype="<f8").tobytes())
    class_idx = np.argmax(dataset.labels, axis=1).astype("<u2")
    payload.append(class_idx.tobytes())
    payload.append(dataset.splits.astype("u1").tobytes())
    body = b"".join(payload)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_dataset(path) -> MultimodalDataset:
    """Read an MMD1 container, verifying structure and checksum."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DATASET_MAGIC:
            raise DataFormatError(f"{path}: bad dataset magic {magic!r}")
        blob = fh.read()
    if len(blob) < 4:
        raise DataFormatError(f"{path}: truncated before checksum")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise DataFormatError(f"{path}: checksum mismatch")

    pos = 0

    def take(size: int, what: str) -> bytes:
        nonlocal pos
        if pos + size > len(body):
            raise DataFormatError(f"{path}: truncated while reading {what}")
        chunk = body[pos : pos + size]
        pos += size
        return chunk

    version, n, m, c = struct.unpack("<BIII", take(13, "header"))
    if version != DATASET_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if n < 1 or m < 1 or c < 2:
        raise DataFormatError(f"{path}: implausible header (n={n}, m={m}, c={c})")
    dims = struct.unpack(f"<{m}I", take(4 * m, "modality dims"))
    features = []
    for j in range(m):
        raw = take(8 * n * dims[j], f"features block for modality {j + 1}")
        features.append(np.frombuffer(raw, dtype="<f8").reshape(n, dims[j]).copy())
    class_idx = np.frombuffer(take(2 * n, "labels"), dtype="<u2")
    if class_idx.max(initial=0) >= c:
        raise DataFormatError(f"{path}: label index out of range")
    splits = np.frombuffer(take(n, "split tags"), dtype="u1").copy()
    if pos != len(body):
        raise DataFormatError(f"{path}: trailing bytes after split tags")
    labels = np.zeros((n, c))
    labels[np.arange(n), class_idx] = 1.0
    try:
        return MultimodalDataset(features=features, labels=labels, splits=splits)
    except ValidationError as exc:
        raise DataFormatError(f"{path}: inconsistent container: {exc}") from exc


def batches(
    dataset: MultimodalDataset, split: str, batch_size: int, seed
) -> list[np.ndarray]:
    """Seeded shuffle of a split, cut into ceil(n/B) index batches."""
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    indices = dataset.split_indices(split)
    if indices.size == 0:
        raise ValidationError(f"split {split!r} is empty")
    order = np.random.default_rng(seed).permutation(indices)
    return [order[i : i + batch_size] for i in range(0, order.size, batch_size)]


def ordered_batches(
    dataset: MultimodalDataset, split: str, batch_size: int
) -> list[np.ndarray]:
    """Fixed, shuffle-free batch partition used for covariance passes."""
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    indices = dataset.split_indices(split)
    if indices.size == 0:
        raise ValidationError(f"split {split!r} is empty")
    return [indices[i : i + batch_size] for i in range(0, indices.size, batch_size)]
