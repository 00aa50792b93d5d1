"""Dataset ingestion and construction.

Provides the IDX image/label format used by the MNIST distribution, the
binary 2x5 digit grouping with hidden subclass labels, a synthetic Gaussian
mixture used as a discovery oracle, and deterministic minibatch iteration.

Hidden subclass labels exist only for evaluation; no loss ever receives
them (losses take one-hot class targets only).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(Exception):
    """Malformed IDX file; message carries the file and byte offset."""


@dataclass
class LabeledBatch:
    """Inputs with one-hot class targets and optional hidden subclass labels
    (flat index class*s + subclass, evaluation only)."""

    x: np.ndarray
    y_class: np.ndarray
    hidden_subclass: np.ndarray | None = None

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def c(self):
        return self.y_class.shape[1]

    def take(self, idx):
        hidden = None if self.hidden_subclass is None else self.hidden_subclass[idx]
        return LabeledBatch(self.x[idx], self.y_class[idx], hidden)


@dataclass
class DatasetSpec:
    """Where a dataset comes from and how it is shaped.

    source "idx" reads image/label IDX pairs and applies a named grouping;
    source "synthetic" draws the Gaussian-mixture oracle.  train_size /
    val_size cap or set split sizes (None keeps the files' full size).
    """

    source: str = "synthetic"
    grouping: str = "mnist_2x5"
    train_images: str | None = None
    train_labels: str | None = None
    val_images: str | None = None
    val_labels: str | None = None
    normalization: str = "scale_255"
    classes: int = 2
    subclasses: int = 5
    dim: int = 16
    separation: float = 10.0
    train_size: int | None = None
    val_size: int | None = None
    seed: int = 0


def one_hot(labels, c):
    labels = np.asarray(labels)
    out = np.zeros((labels.size, c), dtype=np.float32)
    out[np.arange(labels.size), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# IDX format
# ---------------------------------------------------------------------------

def _read_exact(fh, count, path, what, offset):
    raw = fh.read(count)
    if len(raw) != count:
        raise IdxFormatError(
            f"{path}: truncated reading {what} at offset {offset} "
            f"(wanted {count} bytes, got {len(raw)})")
    return raw


def load_idx(images_path, labels_path):
    """Parse a big-endian IDX image/label pair.

    Returns (images uint8 [n, rows, cols], labels uint8 [n]); the two counts
    must agree.
    """
    with open(images_path, "rb") as fh:
        magic, = struct.unpack(">I", _read_exact(fh, 4, images_path, "magic", 0))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(
                f"{images_path}: wrong magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{IDX_IMAGES_MAGIC:08x})")
        count, rows, cols = struct.unpack(
            ">III", _read_exact(fh, 12, images_path, "dimensions", 4))
        raw = _read_exact(fh, count * rows * cols, images_path, "pixels", 16)
        if fh.read(1):
            raise IdxFormatError(f"{images_path}: trailing bytes at offset {16 + len(raw)}")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)
    with open(labels_path, "rb") as fh:
        magic, = struct.unpack(">I", _read_exact(fh, 4, labels_path, "magic", 0))
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: wrong magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{IDX_LABELS_MAGIC:08x})")
        lcount, = struct.unpack(">I", _read_exact(fh, 4, labels_path, "count", 4))
        labels = np.frombuffer(_read_exact(fh, lcount, labels_path, "labels", 8),
                               dtype=np.uint8)
        if fh.read(1):
            raise IdxFormatError(f"{labels_path}: trailing bytes at offset {8 + lcount}")
    if count != lcount:
        raise IdxFormatError(
            f"count mismatch: {images_path} has {count} images, "
            f"{labels_path} has {lcount} labels")
    return images, labels


def save_idx(images, labels, images_path, labels_path):
    """Write an IDX pair (inverse of load_idx, byte-exact round trip)."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    if labels.shape != (n,):
        raise ValueError(f"need {n} labels, got shape {labels.shape}")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(labels.tobytes())


def normalize_pixels(raw):
    """Byte pixels to [0, 1] floats (divide by 255)."""
    return np.asarray(raw, dtype=np.float32) / np.float32(255.0)


# ---------------------------------------------------------------------------
# Groupings
# ---------------------------------------------------------------------------

# digit -> (class, subclass): digits 0-4 form class 0, digits 5-9 class 1
MNIST_2X5 = {d: (0 if d < 5 else 1, d % 5) for d in range(10)}

GROUPINGS = {"mnist_2x5": MNIST_2X5}


def group_binary(images, labels, grouping=MNIST_2X5):
    """Relabel raw examples through a label -> (class, subclass) partition.

    Pixels are normalized to [0, 1] and kept as [n, rows, cols, 1] images;
    the true label is stored as the hidden flat subclass index class*s +
    subclass, for evaluation only.
    """
    labels = np.asarray(labels)
    uncovered = sorted(set(np.unique(labels).tolist()) - set(grouping))
    if uncovered:
        raise ValueError(f"grouping does not cover labels {uncovered}")
    c = max(cls for cls, _ in grouping.values()) + 1
    s = max(sub for _, sub in grouping.values()) + 1
    class_of = np.zeros(max(grouping) + 1, dtype=np.int64)
    sub_of = np.zeros(max(grouping) + 1, dtype=np.int64)
    for label, (cls, sub) in grouping.items():
        class_of[label], sub_of[label] = cls, sub
    y = class_of[labels]
    hidden = y * s + sub_of[labels]
    x = normalize_pixels(images)[..., None]
    return LabeledBatch(x=x, y_class=one_hot(y, c), hidden_subclass=hidden)


# ---------------------------------------------------------------------------
# Synthetic mixture and iteration
# ---------------------------------------------------------------------------

def synth_gaussian_mixture(c, s, dim, separation, n, seed):
    """c*s unit-variance isotropic Gaussians at mutually equidistant centers.

    Centers sit on scaled coordinate axes (a simplex), so every pair of
    centers is exactly `separation` apart; component counts are balanced to
    within one example.  Class label = component // s, hidden subclass =
    component index.
    """
    if separation <= 0:
        raise ValueError(f"separation must be positive, got {separation}")
    if dim < c * s:
        raise ValueError(f"dim={dim} cannot hold {c * s} equidistant centers")
    rng = np.random.default_rng(seed)
    centers = np.zeros((c * s, dim))
    centers[np.arange(c * s), np.arange(c * s)] = separation / np.sqrt(2.0)
    comp = rng.permutation(np.arange(n) % (c * s))
    x = centers[comp] + rng.standard_normal((n, dim))
    return LabeledBatch(x=x.astype(np.float32),
                        y_class=one_hot(comp // s, c),
                        hidden_subclass=comp.astype(np.int64))


def batch_indices(n, batch_size, epoch_seed):
    """Seeded permutation of range(n) yielded in batch_size slices."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(epoch_seed).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def minibatches(dataset, batch_size, epoch_seed):
    """Seeded random-order minibatches covering the dataset exactly once;
    the final short batch is included."""
    for idx in batch_indices(dataset.n, batch_size, epoch_seed):
        yield dataset.take(idx)


def load_dataset(spec, resolve=lambda p: p):
    """Materialize (train, validation) LabeledBatches from a DatasetSpec.

    `resolve` maps config-relative paths to real ones.
    """
    if spec.source == "synthetic":
        n_train = spec.train_size if spec.train_size is not None else 5000
        n_val = spec.val_size if spec.val_size is not None else 1000
        train = synth_gaussian_mixture(spec.classes, spec.subclasses, spec.dim,
                                       spec.separation, n_train, spec.seed)
        val = synth_gaussian_mixture(spec.classes, spec.subclasses, spec.dim,
                                     spec.separation, n_val, spec.seed + 1)
        return train, val
    if spec.source == "idx":
        grouping = GROUPINGS.get(spec.grouping)
        if grouping is None:
            raise ValueError(f"unknown grouping {spec.grouping!r}")
        if spec.normalization != "scale_255":
            raise ValueError(f"unknown normalization {spec.normalization!r}")
        train = group_binary(*load_idx(resolve(spec.train_images),
                                       resolve(spec.train_labels)), grouping)
        val = group_binary(*load_idx(resolve(spec.val_images),
                                     resolve(spec.val_labels)), grouping)
        if spec.train_size is not None:
            train = train.take(np.arange(min(spec.train_size, train.n)))
        if spec.val_size is not None:
            val = val.take(np.arange(min(spec.val_size, val.n)))
        return train, val
    raise ValueError(f"unknown dataset source {spec.source!r}")
