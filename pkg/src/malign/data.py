"""Datasets: IDX and CSV ingestion plus deterministic synthetic image tasks."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import idctn

from .errors import ConfigError, DatasetError, HeaderError, LengthMismatchError, RowWidthError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SYNTH_KINDS = ("gauss-blobs", "ring-classes")


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    provenance: str = ""
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.shape[0] != labels.shape[0]:
            raise LengthMismatchError(f"{inputs.shape[0]} inputs but {labels.shape[0]} labels")
        if inputs.size and (inputs.min() < 0.0 or inputs.max() > 1.0):
            raise DatasetError("inputs must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        ids = np.arange(len(labels)) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        for arr in (inputs, labels, ids):
            arr.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, positions) -> "Dataset":
        pos = np.asarray(positions, dtype=np.int64)
        return Dataset(self.inputs[pos], self.labels[pos], self.num_classes, self.split, self.provenance, self.ids[pos])

    def by_ids(self, ids) -> "Dataset":
        lookup = {int(v): i for i, v in enumerate(self.ids)}
        try:
            pos = [lookup[int(i)] for i in ids]
        except KeyError as exc:
            raise DatasetError(f"sample id {exc.args[0]} not in dataset") from None
        return self.subset(pos)


# -- IDX ----------------------------------------------------------------------


def _read_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise HeaderError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise HeaderError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    payload = raw[header_len:]
    if len(payload) != int(np.prod(dims)):
        raise HeaderError(f"{path}: header declares {int(np.prod(dims))} bytes of data, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None, split: str = "train") -> Dataset:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise LengthMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    inputs = images[:, None, :, :].astype(np.float64) / 255.0
    k = num_classes if num_classes is not None else int(labels.max()) + 1 if labels.size else 1
    return Dataset(inputs, labels, k, split, f"idx-file:{images_path}")


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 ``images`` (N, rows, cols) and ``labels`` (N,) in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# -- CSV ----------------------------------------------------------------------


def load_csv(path, header: bool = False, image_shape: tuple[int, ...] | None = None, scale: float = 1.0,
             num_classes: int | None = None, split: str = "train") -> Dataset:
    """Label in column 0, features after it. ``scale`` maps raw values into [0, 1]."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if header:
        rows = rows[1:]
    rows = [r for r in rows if r]
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    width = len(rows[0])
    if width < 2:
        raise RowWidthError(f"{path}: rows need a label and at least one feature")
    for lineno, r in enumerate(rows, start=2 if header else 1):
        if len(r) != width:
            raise RowWidthError(f"{path}: line {lineno} has {len(r)} columns, expected {width}")
    try:
        table = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise DatasetError(f"{path}: non-numeric value ({exc})") from None
    labels = table[:, 0]
    if np.any(labels != np.round(labels)):
        raise DatasetError(f"{path}: labels must be integers")
    feats = table[:, 1:] * scale
    if image_shape is not None:
        if int(np.prod(image_shape)) != feats.shape[1]:
            raise RowWidthError(f"{path}: {feats.shape[1]} features cannot form shape {tuple(image_shape)}")
        feats = feats.reshape((len(feats),) + tuple(image_shape))
    labels = labels.astype(np.int64)
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(feats, labels, k, split, f"csv-file:{path}")


def load_dataset(path, format: str, labels_path=None, **kwargs) -> Dataset:
    if format == "idx":
        if labels_path is None:
            raise ConfigError("IDX datasets need a labels file")
        return load_idx(path, labels_path, **kwargs)
    if format == "csv":
        return load_csv(path, **kwargs)
    raise ConfigError(f"unknown dataset format {format!r}")


# -- synthetic ----------------------------------------------------------------


def _blob_centroids(rng, num_classes: int, size: int, channels: int, separation: float) -> np.ndarray:
    band = max(2, size // 3)
    cents = np.empty((num_classes, channels, size, size))
    for k in range(num_classes):
        for c in range(channels):
            coef = np.zeros((size, size))
            coef[:band, :band] = rng.standard_normal((band, band))
            coef[0, 0] = 0.0
            img = idctn(coef, norm="ortho")
            img = (img - img.min()) / (img.max() - img.min())
            cents[k, c] = 0.5 + separation * (img - 0.5)
    return cents


def _rings(rng, labels, num_classes: int, size: int, channels: int) -> np.ndarray:
    radii = np.linspace(1.0, size / 2 - 1.0, num_classes)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.empty((len(labels), channels, size, size))
    for n, k in enumerate(labels):
        cy, cx = (size - 1) / 2 + rng.uniform(-1.0, 1.0, size=2)
        d = np.hypot(yy - cy, xx - cx)
        out[n] = 0.8 * np.exp(-((d - radii[k]) ** 2) / (2 * 0.6**2))
    return out


def synth_split(kind: str, n_train: int, n_test: int, num_classes: int = 10, noise: float = 0.1, seed: int = 0,
                image_size: int = 12, channels: int = 1, separation: float = 0.7) -> tuple[Dataset, Dataset]:
    """Generate disjoint train/test splits of a synthetic image task.

    ``gauss-blobs``: each class is a smooth random template, samples add i.i.d.
    Gaussian pixel noise. ``ring-classes``: a ring whose radius encodes the class,
    with a jittered centre. Values are clipped to [0, 1].
    """
    if kind not in SYNTH_KINDS:
        raise ConfigError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    if n_train < 1 or n_test < 0 or num_classes < 2 or noise < 0 or image_size < 2 or channels < 1:
        raise ConfigError("synthetic dataset parameters must be positive")
    rng = np.random.default_rng(seed)
    n = n_train + n_test
    labels = rng.integers(0, num_classes, size=n)
    if kind == "gauss-blobs":
        clean = _blob_centroids(rng, num_classes, image_size, channels, separation)[labels]
    else:
        clean = _rings(rng, labels, num_classes, image_size, channels)
    noisy = clean + noise * rng.standard_normal(clean.shape) if noise else clean
    inputs = np.clip(noisy, 0.0, 1.0)
    tag = f"synthetic({kind},seed={seed},noise={noise},separation={separation})"
    ids = np.arange(n)
    train = Dataset(inputs[:n_train], labels[:n_train], num_classes, "train", tag, ids[:n_train])
    test = Dataset(inputs[n_train:], labels[n_train:], num_classes, "test", tag, ids[n_train:])
    return train, test


def synth_dataset(kind: str, n: int, num_classes: int = 10, noise: float = 0.1, seed: int = 0,
                  image_size: int = 12, channels: int = 1, separation: float = 0.7) -> Dataset:
    return synth_split(kind, n, 0, num_classes, noise, seed, image_size, channels, separation)[0]


def batches(n: int, batch_size: int, rng: np.random.Generator | None):
    """Yield index arrays covering ``range(n)``; shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
