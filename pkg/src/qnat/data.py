"""Datasets: CSV and IDX loaders, crop-and-pool downsampling, splits, toys.

A dataset manifest (JSON) names the source and its preprocessing::

    {"kind": "idx", "train_images": "...", "train_labels": "...",
     "test_images": "...", "test_labels": "...",
     "classes": [3, 6], "pool": {"crop": 24, "out": 4}, "seed": 0}

``kind`` is one of ``csv``, ``idx``, ``synth_blobs`` and ``synth_two_feature``;
relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError

__all__ = [
    "Dataset",
    "PoolSpec",
    "Splits",
    "load_csv",
    "save_csv",
    "load_idx",
    "center_crop_avg_pool",
    "filter_classes",
    "split",
    "synth_blobs",
    "synth_two_feature",
    "load_manifest",
]


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels)
        if x.ndim != 2:
            raise ValueError("features must be a (samples, dims) matrix")
        if y.shape != (x.shape[0],):
            raise ValueError("one label per sample required")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y.astype(np.int64))

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)


@dataclass(frozen=True)
class PoolSpec:
    crop: int
    out: int

    def __post_init__(self):
        if self.crop < 1 or self.out < 1:
            raise ValueError("crop and out must be positive")
        if self.crop % self.out:
            raise ValueError(f"crop side {self.crop} is not divisible by output side {self.out}")


# ---------------------------------------------------------------------------
# CSV

def load_csv(path: str | Path, n_classes: int | None = None) -> Dataset:
    """Comma-separated rows; the last column is the integer label."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            rows.append((lineno, row))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    width = len(rows[0][1])
    if width < 2:
        raise ValueError(f"{path}: need at least one feature and a label")
    feats, labels = [], []
    for lineno, row in rows:
        if len(row) != width:
            raise ValueError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
        try:
            feats.append([float(c) for c in row[:-1]])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric feature") from None
        lab = row[-1].strip()
        try:
            v = float(lab)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: label {lab!r} is not an integer") from None
        if not v.is_integer() or v < 0:
            raise ValueError(f"{path}:{lineno}: label {lab!r} is not a non-negative integer")
        labels.append(int(v))
    y = np.array(labels, dtype=np.int64)
    k = int(y.max()) + 1 if n_classes is None else n_classes
    return Dataset(np.array(feats, dtype=float), y, k)


def save_csv(ds: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for x, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


# ---------------------------------------------------------------------------
# IDX

_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801


def _read_bytes(path: str | Path) -> bytes:
    p = Path(path)
    opener = gzip.open if p.suffix == ".gz" else open
    with opener(p, "rb") as fh:
        return fh.read()


def _idx_payload(raw: bytes, magic: int, ndim: int, path) -> tuple[tuple[int, ...], np.ndarray]:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise ValueError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise ValueError(f"{path}: truncated payload ({len(raw) - header} of {size} bytes)")
    data = np.frombuffer(raw, dtype=np.uint8, count=size, offset=header)
    return dims, data.reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path, *, images_only: bool = False):
    """Standard big-endian IDX files; pixels scaled to [0, 1].

    Returns a Dataset of flattened images, or with ``images_only`` the
    (count, rows, cols) image array and the labels.
    """
    _, imgs = _idx_payload(_read_bytes(images_path), _IDX_IMAGES, 3, images_path)
    _, labels = _idx_payload(_read_bytes(labels_path), _IDX_LABELS, 1, labels_path)
    if imgs.shape[0] != labels.shape[0]:
        raise ValueError(f"{imgs.shape[0]} images but {labels.shape[0]} labels")
    imgs = imgs.astype(float) / 255.0
    labels = labels.astype(np.int64)
    if images_only:
        return imgs, labels
    k = int(labels.max()) + 1 if labels.size else 1
    return Dataset(imgs.reshape(imgs.shape[0], -1), labels, k)


def center_crop_avg_pool(images, spec: PoolSpec) -> np.ndarray:
    """Central ``crop``x``crop`` window, then block means down to ``out``x``out``.

    ``images`` is (count, H, W) or a single (H, W); output is flattened
    row-major per image.
    """
    a = np.asarray(images, dtype=float)
    single = a.ndim == 2
    if single:
        a = a[None]
    _, h, w = a.shape
    if spec.crop > h or spec.crop > w:
        raise ValueError(f"crop {spec.crop} larger than image {h}x{w}")
    top = (h - spec.crop) // 2
    left = (w - spec.crop) // 2
    c = a[:, top:top + spec.crop, left:left + spec.crop]
    f = spec.crop // spec.out
    pooled = c.reshape(a.shape[0], spec.out, f, spec.out, f).mean(axis=(2, 4))
    out = pooled.reshape(a.shape[0], -1)
    return out[0] if single else out


def filter_classes(ds: Dataset, classes: Sequence[int]) -> Dataset:
    """Keep the listed labels and renumber them 0..len(classes)-1 in list order."""
    classes = [int(c) for c in classes]
    if len(set(classes)) != len(classes):
        raise ValueError("duplicate classes")
    remap = {c: i for i, c in enumerate(classes)}
    keep = np.isin(ds.labels, classes)
    y = np.array([remap[int(v)] for v in ds.labels[keep]], dtype=np.int64)
    return Dataset(ds.features[keep], y, len(classes))


# ---------------------------------------------------------------------------
# splits

@dataclass(frozen=True)
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


def split(train_pool: Dataset, seed: int, test_pool: Dataset | None = None,
          val_frac: float = 0.05, test_limit: int | None = 300, test_frac: float = 0.0) -> Splits:
    """Shuffled train/validation split of the pool plus a sequential test set.

    The test set is the first ``test_limit`` samples of ``test_pool``.  Without
    a test pool, ``test_frac`` of the shuffled pool (at most ``test_limit``)
    is held out first; the default holds out nothing.
    """
    if len(train_pool) == 0:
        raise ValueError("empty dataset")
    if not 0 <= val_frac < 1 or not 0 <= test_frac < 1:
        raise ValueError("fractions must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(train_pool))
    if test_pool is None:
        n_test = int(round(test_frac * len(perm)))
        if test_limit is not None:
            n_test = min(n_test, test_limit)
        test = train_pool.subset(perm[:n_test])
        perm = perm[n_test:]
    else:
        n_test = len(test_pool) if test_limit is None else min(test_limit, len(test_pool))
        test = test_pool.subset(np.arange(n_test))
    n_val = int(round(val_frac * len(perm)))
    if len(perm) >= 2 and val_frac > 0:
        n_val = min(max(n_val, 1), len(perm) - 1)
    # subsets keep the shuffled order: evaluation batches are normalized with
    # their own statistics, so they must not be grouped by class
    return Splits(train_pool.subset(perm[n_val:]), train_pool.subset(perm[:n_val]), test)


# ---------------------------------------------------------------------------
# synthetic sets

def synth_blobs(n_classes: int, feature_dim: int, per_class: int, spread: float, seed: int) -> Dataset:
    """Gaussian clusters around class centers drawn uniformly in [0, pi]^d."""
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if spread < 0:
        raise ValueError("spread must be >= 0")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, np.pi, size=(n_classes, feature_dim))
    x = np.repeat(centers, per_class, axis=0)
    x = x + spread * rng.normal(size=x.shape)
    y = np.repeat(np.arange(n_classes), per_class)
    return Dataset(x, y, n_classes)


# class 0 fills [LOW]^2, class 1 fills [HIGH]^2 (radians)
TWO_FEATURE_LOW = (0.2, 1.3)
TWO_FEATURE_HIGH = (1.85, 2.95)


def synth_two_feature(n_per_class: int, seed: int) -> Dataset:
    """Two features in [0, pi]; the classes fill two diagonally opposite squares.

    Every class-0 coordinate is below every class-1 coordinate, so either
    feature alone, or their sum, separates the classes with a positive gap.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    lo = rng.uniform(*TWO_FEATURE_LOW, size=(n_per_class, 2))
    hi = rng.uniform(*TWO_FEATURE_HIGH, size=(n_per_class, 2))
    y = np.repeat([0, 1], n_per_class)
    return Dataset(np.concatenate([lo, hi]), y, 2)


# ---------------------------------------------------------------------------
# manifests

def _path(base: Path, m: Mapping, key: str) -> Path:
    if key not in m:
        raise ConfigError("missing", key)
    p = Path(m[key])
    return p if p.is_absolute() else base / p


def _pool(ds_imgs: np.ndarray, labels: np.ndarray, m: Mapping) -> Dataset:
    pool = m.get("pool")
    if pool is None:
        x = ds_imgs.reshape(ds_imgs.shape[0], -1)
    else:
        try:
            spec = PoolSpec(int(pool["crop"]), int(pool["out"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "pool") from None
        x = center_crop_avg_pool(ds_imgs, spec)
    k = int(labels.max()) + 1 if labels.size else 1
    return Dataset(x, labels, k)


def load_manifest(path: str | Path, seed: int | None = None) -> Splits:
    """Load and split the dataset described by a manifest file."""
    path = Path(path)
    try:
        m = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(str(exc), str(path)) from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", str(path)) from None
    return splits_from_manifest(m, path.parent, seed)


def splits_from_manifest(m: Mapping, base: Path | str = ".", seed: int | None = None) -> Splits:
    if not isinstance(m, Mapping):
        raise ConfigError("data manifest must be a JSON object")
    base = Path(base)
    kind = m.get("kind")
    seed = int(m.get("seed", 0)) if seed is None else seed
    val_frac = float(m.get("val_frac", 0.05))
    test_limit = m.get("test_limit", 300)
    test = None
    try:
        if kind == "csv":
            pool = load_csv(_path(base, m, "train"))
            if "test" in m:
                test = load_csv(_path(base, m, "test"), n_classes=pool.n_classes)
        elif kind == "idx":
            imgs, labels = load_idx(_path(base, m, "train_images"), _path(base, m, "train_labels"),
                                    images_only=True)
            pool = _pool(imgs, labels, m)
            if "test_images" in m:
                imgs, labels = load_idx(_path(base, m, "test_images"), _path(base, m, "test_labels"),
                                        images_only=True)
                test = _pool(imgs, labels, m)
        elif kind == "synth_blobs":
            pool = synth_blobs(int(m.get("n_classes", 4)), int(m.get("feature_dim", 16)),
                               int(m.get("per_class", 100)), float(m.get("spread", 0.3)),
                               int(m.get("data_seed", seed)))
        elif kind == "synth_two_feature":
            pool = synth_two_feature(int(m.get("per_class", 100)), int(m.get("data_seed", seed)))
        else:
            raise ConfigError(f"unknown kind {kind!r}", "kind")
    except (OSError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), str(kind)) from None
    if "classes" in m:
        pool = filter_classes(pool, m["classes"])
        if test is not None:
            test = filter_classes(test, m["classes"])
    elif test is not None and test.n_classes != pool.n_classes:
        test = Dataset(test.features, test.labels, max(test.n_classes, pool.n_classes))
        pool = Dataset(pool.features, pool.labels, test.n_classes)
    test_frac = float(m.get("test_frac", 0.0 if test is not None else 0.2))
    return split(pool, seed, test, val_frac=val_frac, test_limit=test_limit, test_frac=test_frac)
