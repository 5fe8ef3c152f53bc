import gzip
import logging
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.core_module import ContractViolation, IdxFormatError, NonFiniteError

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    """
    Instances plus optional ground-truth labels.

    Labels are for evaluation and the supervised baseline only; the
    unsupervised losses never read them.
    """
    X: np.ndarray
    labels: Optional[np.ndarray] = None
    name: str = "dataset"

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        if not np.all(np.isfinite(self.X)):
            raise NonFiniteError(self.name, "dataset holds non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.size != self.X.shape[0]:
                raise ContractViolation(f"{self.name}: {self.X.shape[0]} instances but {self.labels.size} labels")
            if np.any(self.labels < 0):
                raise ContractViolation(f"{self.name}: labels must be nonnegative")

    @property
    def size(self) -> int:
        return int(self.X.shape[0])

    @property
    def dim(self) -> int:
        return int(self.X.shape[1])

    @property
    def num_classes(self) -> Optional[int]:
        return None if self.labels is None or self.labels.size == 0 else int(self.labels.max()) + 1


def gen_two_circles(n_per_class: int = 300, r_inner: float = 1.0, r_outer: float = 2.0,
                    noise_sigma: float = 0.1, seed: int = 0) -> Dataset:
    """
    Two concentric rings with Gaussian radial noise.

    Args:
        n_per_class: Points per ring.
        r_inner: Radius of ring 0.
        r_outer: Radius of ring 1.
        noise_sigma: Standard deviation of the radial noise.
        seed: Generator seed.

    Returns:
        A Dataset with 2 * n_per_class rows, inner ring first.
    """
    if not 0 < r_inner < r_outer:
        raise ContractViolation(f"need 0 < r_inner < r_outer, got {r_inner}, {r_outer}")
    if noise_sigma < 0 or n_per_class < 1:
        raise ContractViolation("noise_sigma must be nonnegative and n_per_class positive")
    rng = np.random.default_rng(seed)
    parts, labels = [], []
    for label, radius in enumerate((r_inner, r_outer)):
        angles = rng.uniform(0.0, 2.0 * np.pi, n_per_class)
        radii = radius + noise_sigma * rng.standard_normal(n_per_class)
        parts.append(np.column_stack([radii * np.cos(angles), radii * np.sin(angles)]))
        labels.append(np.full(n_per_class, label))
    return Dataset(np.vstack(parts), np.concatenate(labels), name=f"two_circles(seed={seed})")


def _open(path: str, mode: str) -> BinaryIO:
    return gzip.open(path, mode) if path.endswith(".gz") else open(path, mode)


def read_idx(path: str, expected_magic: int) -> np.ndarray:
    """
    Reads one IDX file (optionally gzip-compressed) into a uint8 array.

    Raises:
        IdxFormatError: Wrong magic number or truncated payload, with the byte offset.
    """
    with _open(path, 'rb') as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxFormatError(path, 0, "file too short for a magic number")
    magic, = struct.unpack('>I', raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(path, 0, f"magic number {magic:#010x}, expected {expected_magic:#010x}")
    ndim = expected_magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxFormatError(path, len(raw), "truncated dimension header")
    dims = struct.unpack(f'>{ndim}I', raw[4:header_end])
    expected = int(np.prod(dims))
    payload = raw[header_end:]
    if len(payload) < expected:
        raise IdxFormatError(path, header_end + len(payload), f"truncated payload: {len(payload)} of {expected} bytes")
    if len(payload) > expected:
        logger.warning(f"{path}: ignoring {len(payload) - expected} trailing bytes")
    return np.frombuffer(payload, dtype=np.uint8, count=expected).reshape(dims)


def load_idx(images_path: str, labels_path: str, name: Optional[str] = None) -> Dataset:
    """
    Loads an IDX image/label pair (the MNIST distribution format).

    Returns:
        A Dataset whose rows are the flattened images as raw byte values.
    """
    images = read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = read_idx(labels_path, IDX_LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(labels_path, 4, f"{labels.shape[0]} labels for {images.shape[0]} images")
    logger.info(f"Loaded {images.shape[0]} images of shape {images.shape[1:]} from {images_path}")
    return Dataset(images.reshape(images.shape[0], -1).astype(np.float64), labels.astype(np.int64),
                   name=name or os.path.basename(images_path))


def write_idx(path: str, array: np.ndarray, kind: str = "images") -> None:
    """
    Writes a uint8 array as IDX; `kind` is "images" (n x rows x cols) or "labels" (n).
    """
    array = np.asarray(array)
    if kind == "images":
        magic, ndim = IDX_IMAGE_MAGIC, 3
    elif kind == "labels":
        magic, ndim = IDX_LABEL_MAGIC, 1
    else:
        raise ContractViolation(f"kind must be 'images' or 'labels', got {kind!r}")
    if array.ndim != ndim:
        raise ContractViolation(f"{kind} need {ndim} dimensions, got {array.ndim}")
    if np.any(array < 0) or np.any(array > 255):
        raise ContractViolation("IDX payload must fit in unsigned bytes")
    with _open(path, 'wb') as f:
        f.write(struct.pack('>I', magic))
        f.write(struct.pack(f'>{ndim}I', *array.shape))
        f.write(array.astype(np.uint8).tobytes())


def load_csv(path: str, label_column: Optional[str] = None, name: Optional[str] = None) -> Dataset:
    """CSV with a header row; `label_column`, if given, becomes the labels."""
    df = pd.read_csv(path)
    labels = None
    if label_column is not None:
        if label_column not in df.columns:
            raise ContractViolation(f"{path}: no column named {label_column!r}")
        labels = df.pop(label_column).to_numpy()
    return Dataset(df.to_numpy(dtype=np.float64), labels, name=name or os.path.basename(path))


@dataclass
class Standardizer:
    """One global affine map x -> (x - mean) / std, pooled over every value."""
    mean: float
    std: float

    def apply(self, ds: Dataset) -> Dataset:
        return Dataset((ds.X - self.mean) / self.std, ds.labels, ds.name)


def standardize(ds: Dataset) -> Tuple[Dataset, Standardizer]:
    mean = float(ds.X.mean())
    std = float(ds.X.std())
    if std <= 0:
        raise ContractViolation(f"{ds.name}: cannot standardize a constant dataset")
    transform = Standardizer(mean, std)
    return transform.apply(ds), transform


def subset(ds: Dataset, classes: Sequence[int], per_class: int, seed: int = 0) -> Dataset:
    """
    Balanced random subsample of the given classes, relabeled 0..len(classes)-1
    in the order given.
    """
    if ds.labels is None:
        raise ContractViolation(f"{ds.name}: subset needs labels")
    rng = np.random.default_rng(seed)
    rows: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    for new_label, c in enumerate(classes):
        members = np.flatnonzero(ds.labels == c)
        if members.size < per_class:
            raise ContractViolation(f"{ds.name}: class {c} has {members.size} instances, {per_class} requested")
        rows.append(np.sort(rng.choice(members, size=per_class, replace=False)))
        labels.append(np.full(per_class, new_label))
    idx = np.concatenate(rows)
    return Dataset(ds.X[idx], np.concatenate(labels), name=f"{ds.name}[{','.join(str(c) for c in classes)}]")


def concat(a: Dataset, b: Dataset) -> Dataset:
    """Stacks two splits; labels survive only if both carry them."""
    if a.dim != b.dim:
        raise ContractViolation(f"cannot concatenate {a.dim}- and {b.dim}-dimensional datasets")
    labels = None
    if a.labels is not None and b.labels is not None:
        labels = np.concatenate([a.labels, b.labels])
    return Dataset(np.vstack([a.X, b.X]), labels, name=f"{a.name}+{b.name}")
