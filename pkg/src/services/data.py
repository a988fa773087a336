"""
Dataset ingestion, splits and normalization.

Supports IDX files (optionally gzip-compressed), CSV fixtures with the label
in the first column, and a synthetic generator whose classes combine a
coarse cue (global brightness level, readable by shallow heads) with a fine
cue (orientation of a pair of small dots, which needs a larger receptive
field and therefore depth).
"""

import gzip
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.core.exceptions import ConfigurationError, DataFormatError
from src.core.logging import get_logger
from src.models.schemas import DataConfig, DataKind

logger = get_logger(__name__)

SPLIT_TRAIN = "train"
SPLIT_VAL = "val"
SPLIT_TEST = "test"
SPLIT_NAMES = (SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

PathLike = Union[str, Path]


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True)
class Dataset:
    """
    Images (N x C x H x W, float32), integer labels and a split tag per example.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    splits: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be N x C x H x W, got shape {self.images.shape}")
        n = self.images.shape[0]
        if self.labels.shape != (n,) or self.splits.shape != (n,):
            raise DataFormatError("images, labels and split tags must have the same length")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels must lie in [0, {self.num_classes})")
        unknown = set(np.unique(self.splits).tolist()) - set(SPLIT_NAMES)
        if unknown:
            raise DataFormatError(f"unknown split tags {sorted(unknown)}")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @classmethod
    def create(cls, images: np.ndarray, labels: np.ndarray, num_classes: int, split: str = SPLIT_TRAIN) -> "Dataset":
        return cls(
            images=np.ascontiguousarray(images, dtype=np.float32),
            labels=np.asarray(labels, dtype=np.int64),
            num_classes=num_classes,
            splits=np.full(len(labels), split, dtype="<U5"),
        )

    def split(self, name: str) -> "Dataset":
        mask = self.splits == name
        return Dataset(self.images[mask], self.labels[mask], self.num_classes, self.splits[mask])

    def retagged(self, split: str) -> "Dataset":
        return replace(self, splits=np.full(len(self), split, dtype="<U5"))


def concat(parts: Sequence[Dataset]) -> Dataset:
    if not parts:
        raise DataFormatError("nothing to concatenate")
    num_classes = parts[0].num_classes
    if any(p.num_classes != num_classes or p.image_shape != parts[0].image_shape for p in parts):
        raise DataFormatError("datasets disagree on class count or image shape")
    return Dataset(
        images=np.concatenate([p.images for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        num_classes=num_classes,
        splits=np.concatenate([p.splits for p in parts]),
    )


# ---------------------------------------------------------------------------
# IDX / CSV
# ---------------------------------------------------------------------------


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Data file not found: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx_images(buf: bytes, path: PathLike) -> np.ndarray:
    if len(buf) < 16:
        raise DataFormatError(f"{path}: truncated IDX image header")
    magic, count, rows, cols = struct.unpack(">IIII", buf[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{path}: bad IDX image magic 0x{magic:08x}")
    expected = 16 + count * rows * cols
    if len(buf) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes for {count}x{rows}x{cols} images, got {len(buf)}")
    pixels = np.frombuffer(buf, dtype=np.uint8, offset=16)
    return pixels.reshape(count, 1, rows, cols).astype(np.float32) / 255.0


def _parse_idx_labels(buf: bytes, path: PathLike) -> np.ndarray:
    if len(buf) < 8:
        raise DataFormatError(f"{path}: truncated IDX label header")
    magic, count = struct.unpack(">II", buf[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{path}: bad IDX label magic 0x{magic:08x}")
    if len(buf) != 8 + count:
        raise DataFormatError(f"{path}: expected {8 + count} bytes for {count} labels, got {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, offset=8).astype(np.int64)


def load_idx(
    images_path: PathLike,
    labels_path: PathLike,
    num_classes: int = 10,
    split: str = SPLIT_TRAIN,
) -> Dataset:
    """
    Load an IDX image/label pair, scaling pixels to [0, 1].

    Raises:
        DataFormatError: bad magic, truncated file, count mismatch, label >= num_classes
    """
    images = _parse_idx_images(_read_bytes(images_path), images_path)
    labels = _parse_idx_labels(_read_bytes(labels_path), labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= num_classes:
        raise DataFormatError(f"label {int(labels.max())} out of range for {num_classes} classes")
    logger.info("Loaded IDX dataset", path=str(images_path), count=int(images.shape[0]), shape=list(images.shape[1:]))
    return Dataset.create(images, labels, num_classes, split)


def load_csv(
    path: PathLike,
    image_shape: Tuple[int, int, int],
    num_classes: int,
    split: str = SPLIT_TRAIN,
) -> Dataset:
    """Load one example per row: label first, then C*H*W pixel values used as-is."""
    if not Path(path).exists():
        raise FileNotFoundError(f"Data file not found: {path}")
    try:
        frame = pd.read_csv(path, header=None)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataFormatError(f"{path}: {e}") from e
    values = frame.to_numpy()
    width = int(np.prod(image_shape))
    if values.shape[1] != width + 1:
        raise DataFormatError(f"{path}: expected {width + 1} columns, got {values.shape[1]}")
    labels = values[:, 0]
    if np.any(labels != np.round(labels)) or np.any(labels < 0) or np.any(labels >= num_classes):
        raise DataFormatError(f"{path}: labels must be integers in [0, {num_classes})")
    images = values[:, 1:].astype(np.float32).reshape(-1, *image_shape)
    logger.info("Loaded CSV dataset", path=str(path), count=int(images.shape[0]))
    return Dataset.create(images, labels.astype(np.int64), num_classes, split)


# ---------------------------------------------------------------------------
# Splits and normalization
# ---------------------------------------------------------------------------


def stratified_split(
    ds: Dataset,
    fractions: Sequence[float],
    seed: int,
    names: Sequence[str] = SPLIT_NAMES,
) -> Dataset:
    """
    Tag every example with a split, proportionally within each class.

    Args:
        ds: dataset to partition
        fractions: share of each split, summing to 1
        seed: shuffling seed
        names: split tag per fraction

    Returns:
        Dataset with the same examples in the same order and new split tags
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.ndim != 1 or len(fractions) > len(names) or np.any(fractions < 0):
        raise ConfigurationError("fractions must be a nonnegative vector with one entry per split")
    if abs(fractions.sum() - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must sum to 1, got {fractions.sum()}")

    rng = np.random.default_rng(seed)
    tags = np.empty(len(ds), dtype="<U5")
    parts = int(np.count_nonzero(fractions))
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        if members.size == 0:
            continue
        if members.size < parts:
            raise DataFormatError(f"class {c} has {members.size} examples, fewer than {parts} split parts")
        exact = fractions * members.size
        counts = np.floor(exact + 1e-9).astype(int)
        leftover = members.size - counts.sum()
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:leftover]] += 1
        shuffled = rng.permutation(members)
        start = 0
        for name, count in zip(names, counts):
            tags[shuffled[start:start + count]] = name
            start += count
    return replace(ds, splits=tags)


def fit_normalization(ds: Dataset) -> NormalizationStats:
    """Per-channel mean and standard deviation of the train split."""
    train = ds.split(SPLIT_TRAIN)
    if len(train) == 0:
        raise DataFormatError("cannot fit normalization without training examples")
    mean = train.images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = train.images.std(axis=(0, 2, 3), dtype=np.float64)
    std = np.where(std < 1e-8, 1.0, std)
    return NormalizationStats(mean=mean.astype(np.float32), std=std.astype(np.float32))


def apply_normalization(ds: Dataset, stats: NormalizationStats) -> Dataset:
    if stats.mean.shape != (ds.image_shape[0],):
        raise DataFormatError("normalization statistics do not match the channel count")
    images = (ds.images - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]
    return replace(ds, images=images.astype(np.float32))


# ---------------------------------------------------------------------------
# Synthetic scale-cue data
# ---------------------------------------------------------------------------


def make_scale_cue_dataset(
    n_per_class: int = 100,
    image_size: int = 16,
    num_coarse: int = 5,
    num_fine: int = 2,
    noise: float = 0.3,
    seed: int = 0,
    split: str = SPLIT_TRAIN,
) -> Dataset:
    """
    Generate 1-channel images for num_coarse * num_fine classes.

    Class c = coarse * num_fine + fine. The coarse cue is the background
    level; the fine cue is the orientation (angle pi * fine / num_fine) of
    two 2x2 dots placed image_size // 3 pixels apart at a random location.
    """
    if image_size < 8:
        raise ConfigurationError("image_size must be at least 8")
    rng = np.random.default_rng(seed)
    num_classes = num_coarse * num_fine
    distance = image_size // 3
    n = n_per_class * num_classes
    labels = np.repeat(np.arange(num_classes), n_per_class)
    images = np.empty((n, 1, image_size, image_size), dtype=np.float32)

    for i, label in enumerate(labels):
        coarse, fine = divmod(int(label), num_fine)
        level = 0.6 * (coarse + 1) / (num_coarse + 1) + rng.uniform(-0.03, 0.03)
        img = np.full((image_size, image_size), level, dtype=np.float64)
        angle = math.pi * fine / num_fine
        dy = int(round(distance * math.sin(angle)))
        dx = int(round(distance * math.cos(angle)))
        y0 = rng.integers(max(0, -dy), image_size - 1 - max(0, dy))
        x0 = rng.integers(max(0, -dx), image_size - 1 - max(0, dx))
        for y, x in ((y0, x0), (y0 + dy, x0 + dx)):
            img[y:y + 2, x:x + 2] += 1.0
        img += noise * rng.standard_normal(img.shape)
        images[i, 0] = img

    order = rng.permutation(n)
    return Dataset.create(images[order], labels[order], num_classes, split)


# ---------------------------------------------------------------------------
# Run-level assembly
# ---------------------------------------------------------------------------

# share of the training source carved out as test data when no test source is given
HELD_OUT_TEST_FRACTION = 0.2


def _train_source(cfg: DataConfig, seed: int) -> Tuple[Dataset, Optional[Dataset]]:
    if cfg.kind == DataKind.SYNTHETIC:
        params = dict(
            image_size=cfg.image_size,
            num_coarse=cfg.num_coarse,
            num_fine=cfg.num_fine,
            noise=cfg.noise,
        )
        train = make_scale_cue_dataset(cfg.n_per_class, seed=seed, split=SPLIT_TRAIN, **params)
        test = make_scale_cue_dataset(cfg.test_per_class, seed=seed + 1000, split=SPLIT_TEST, **params)
        return train, test
    if cfg.kind == DataKind.IDX:
        if not cfg.train_images or not cfg.train_labels:
            raise ConfigurationError("IDX data needs 'train_images' and 'train_labels'")
        train = load_idx(cfg.train_images, cfg.train_labels, cfg.num_classes, SPLIT_TRAIN)
        test = None
        if cfg.test_images and cfg.test_labels:
            test = load_idx(cfg.test_images, cfg.test_labels, cfg.num_classes, SPLIT_TEST)
        return train, test
    if not cfg.train_csv or cfg.image_shape is None:
        raise ConfigurationError("CSV data needs 'train_csv' and 'image_shape'")
    train = load_csv(cfg.train_csv, cfg.image_shape, cfg.num_classes, SPLIT_TRAIN)
    test = load_csv(cfg.test_csv, cfg.image_shape, cfg.num_classes, SPLIT_TEST) if cfg.test_csv else None
    return train, test


def load_dataset(cfg: DataConfig, seed: int) -> Dataset:
    """
    Assemble the train/val/test dataset described by `cfg`, without normalization.

    The validation split is carved from the training source, stratified by
    class. Without a test source a further stratified share is held out as test.
    """
    train, test = _train_source(cfg, seed)
    v = cfg.val_fraction
    if test is None:
        fractions = [1.0 - v - HELD_OUT_TEST_FRACTION, v, HELD_OUT_TEST_FRACTION]
        ds = stratified_split(train, fractions, seed, (SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST))
    else:
        if v > 0:
            train = stratified_split(train, [1.0 - v, v], seed, (SPLIT_TRAIN, SPLIT_VAL))
        ds = concat([train, test])
    logger.info(
        "Prepared dataset",
        kind=cfg.kind.value,
        train=int(np.sum(ds.splits == SPLIT_TRAIN)),
        val=int(np.sum(ds.splits == SPLIT_VAL)),
        test=int(np.sum(ds.splits == SPLIT_TEST)),
        num_classes=ds.num_classes,
    )
    return ds
