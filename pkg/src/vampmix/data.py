"""Dataset ingestion (IDX, CSV), synthetic mixtures and train/validation splits."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field, replace

import numpy as np

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
SCALINGS = ("symmetric-unit", "none")


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass
class Dataset:
    """Features plus optional labels and a train/validation partition.

    ``scaling`` is ``"symmetric-unit"`` for images mapped to [-1, 1].
    """

    features: np.ndarray
    labels: np.ndarray | None = None
    train_idx: np.ndarray | None = None
    val_idx: np.ndarray | None = None
    scaling: str = "none"
    image_shape: tuple | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be an N x D array")
        if np.isnan(self.features).any():
            raise ValueError("features contain NaN")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.features):
                raise ValueError("labels and features differ in length")
        if self.scaling not in SCALINGS:
            raise ValueError(f"unknown scaling {self.scaling!r}")

    def __len__(self):
        return len(self.features)

    @property
    def pseudo_transform(self):
        return "tanh" if self.scaling == "symmetric-unit" else "identity"

    def _idx(self, which):
        idx = self.train_idx if which == "train" else self.val_idx
        return np.arange(len(self)) if idx is None else idx

    def train_features(self):
        return self.features[self._idx("train")]

    def validation_features(self):
        return self.features[self._idx("validation")]

    def train_labels(self):
        return None if self.labels is None else self.labels[self._idx("train")]

    def validation_labels(self):
        return None if self.labels is None else self.labels[self._idx("validation")]


# ------------------------------------------------------------------------ IDX

def _open(path):
    with open(path, "rb") as f:
        head = f.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path):
    """Parse an unsigned-byte IDX file (optionally gzip-compressed)."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the IDX header")
    (magic,) = struct.unpack(">i", raw[:4])
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise IdxMagicError(f"{path}: unexpected IDX magic number {magic}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(">" + "i" * ndim, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IdxTruncatedError(f"{path}: payload has {len(raw) - header} bytes, expected {count}")
    return magic, np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    magic = IDX_IMAGES_MAGIC if array.ndim == 3 else IDX_LABELS_MAGIC
    if array.ndim not in (1, 3):
        raise ValueError("IDX writer supports label vectors (1-D) and image stacks (3-D)")
    with open(path, "wb") as f:
        f.write(struct.pack(">i", magic))
        f.write(struct.pack(">" + "i" * array.ndim, *array.shape))
        f.write(array.tobytes())


def load_idx(images_path, labels_path=None, limit=None):
    """Load an IDX image file (and labels) with pixels mapped to [-1, 1]."""
    magic, images = read_idx(images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise IdxMagicError(f"{images_path}: expected image magic {IDX_IMAGES_MAGIC}, got {magic}")
    labels = None
    if labels_path is not None:
        magic, labels = read_idx(labels_path)
        if magic != IDX_LABELS_MAGIC:
            raise IdxMagicError(f"{labels_path}: expected label magic {IDX_LABELS_MAGIC}, got {magic}")
        if len(labels) != len(images):
            raise IdxCountMismatchError(f"{len(images)} images but {len(labels)} labels")
    if limit is not None:
        images = images[:limit]
        labels = None if labels is None else labels[:limit]
    n, rows, cols = images.shape
    x = images.reshape(n, rows * cols).astype(np.float64) / 127.5 - 1.0
    return Dataset(x, labels, scaling="symmetric-unit", image_shape=(rows, cols))


# ------------------------------------------------------------------------ CSV

def _is_number(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_csv(path, labels=False):
    """Comma-separated numeric table; header row is detected and skipped.

    With ``labels`` the final column holds integer class labels.
    """
    with open(path, newline="", encoding="utf-8") as f:
        rows = [r for r in csv.reader(f) if r]
    if rows and not all(_is_number(c) for c in rows[0]):
        rows = rows[1:]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    table = np.array([[float(c) for c in r] for r in rows])
    if labels:
        return Dataset(table[:, :-1], table[:, -1].astype(np.int64))
    return Dataset(table)


# ----------------------------------------------------------------- synthetic

def polygon_means(n_components, dim, separation):
    """Means on a regular polygon in the first two axes, adjacent ones
    ``separation`` apart (for dim 1, evenly spaced on a line)."""
    if dim == 1 or n_components == 1:
        return np.arange(n_components, dtype=np.float64)[:, None] * separation * np.ones(dim)
    radius = separation / (2.0 * np.sin(np.pi / n_components))
    angles = 2.0 * np.pi * np.arange(n_components) / n_components
    means = np.zeros((n_components, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


@dataclass
class SynthSpec:
    n_components: int = 3
    dim: int = 2
    points_per_component: int = 1000
    scale: float = 1.0
    separation: float = 8.0
    means: np.ndarray | None = None
    seed: int = 0
    scales: list = field(default_factory=list)

    def resolved_means(self):
        if self.means is not None:
            m = np.asarray(self.means, dtype=np.float64).reshape(self.n_components, self.dim)
        else:
            m = polygon_means(self.n_components, self.dim, self.separation * self.scale)
        if len({tuple(row) for row in m}) != len(m):
            raise ValueError("synthetic component means must be pairwise distinct")
        return m

    def resolved_scales(self):
        return np.asarray(self.scales or [self.scale] * self.n_components, dtype=np.float64)


def synth_mixture(spec):
    """Isotropic Gaussian clusters; labels are the component of origin."""
    rng = np.random.default_rng(spec.seed)
    means = spec.resolved_means()
    scales = spec.resolved_scales()
    n = spec.points_per_component
    x = np.concatenate([means[j] + scales[j] * rng.standard_normal((n, spec.dim))
                        for j in range(spec.n_components)])
    y = np.repeat(np.arange(spec.n_components), n)
    return Dataset(x, y)


def split(dataset, validation_fraction, seed):
    """Seeded shuffle, then the first ``round(f N)`` indices become validation."""
    if not 0.0 < validation_fraction < 1.0:
        raise ValueError("validation fraction must lie in (0, 1)")
    n = len(dataset)
    n_val = int(round(validation_fraction * n))
    if n_val == 0 or n_val == n:
        raise ValueError(f"validation fraction {validation_fraction} leaves an empty fold for N={n}")
    order = np.random.default_rng(seed).permutation(n)
    return replace(dataset, train_idx=np.sort(order[n_val:]), val_idx=np.sort(order[:n_val]))
