"""Labelled image batches and the seeded oriented-pattern generator used as the
desk-scale reference task."""
import logging
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from lpnet.exceptions import DataError, ShapeMismatchError
from lpnet.services.tensorcore import DTYPE
from lpnet.utils.helpers import STREAM_SAMPLE, derive_rng

logger = logging.getLogger(__name__)

N_CLASSES = 4


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 4:
            raise DataError(f"dataset images must be N x C x H x W, got shape {self.x.shape}")
        if len(self.x) != len(self.y):
            raise ShapeMismatchError((len(self.x),), (len(self.y),), 'images and labels')
        if not np.all(np.isfinite(self.x)):
            raise DataError('dataset contains non-finite pixel values')
        if len(self.y) and self.y.min() < 0:
            raise DataError('labels must be non-negative class indices')

    def __len__(self):
        return len(self.y)

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def subset(self, indices) -> 'Dataset':
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.x[indices], self.y[indices])

    def sample(self, n: int, seed: int) -> 'Dataset':
        """n distinct examples drawn without replacement (all of them if n >= len)."""
        if n >= len(self):
            return self
        rng = derive_rng(seed, STREAM_SAMPLE)
        return self.subset(np.sort(rng.choice(len(self), size=n, replace=False)))

    def batches(self, batch_size: int, order: Optional[np.ndarray] = None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), batch_size):
            chosen = order[start:start + batch_size]
            yield self.x[chosen], self.y[chosen]


def make_oriented_patterns(n: int, seed: int, size: int = 16, noise: float = 0.1) -> Dataset:
    """Gratings at 0, 45, 90 and 135 degrees (class = orientation index) with
    random frequency, phase, small angle jitter and pixel noise; values in [0, 255]."""
    if n < 0:
        raise DataError(f"sample count must be >= 0, got {n}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % N_CLASSES)
    angles = labels * (np.pi / N_CLASSES) + rng.normal(0.0, 0.08, n)
    freqs = rng.uniform(0.12, 0.3, n)
    phases = rng.uniform(0.0, 2 * np.pi, n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    proj = xx[None] * np.cos(angles)[:, None, None] + yy[None] * np.sin(angles)[:, None, None]
    images = 0.5 + 0.5 * np.cos(2 * np.pi * freqs[:, None, None] * proj + phases[:, None, None])
    images += rng.normal(0.0, noise, images.shape)
    images = np.clip(images, 0.0, 1.0) * 255.0
    logger.debug('generated %d oriented patterns of size %d (seed %d)', n, size, seed)
    return Dataset(images[:, None].astype(DTYPE), labels.astype(np.int64))


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, 'wb') as f:
        np.savez(f, x=dataset.x, y=dataset.y)


def load_dataset(path) -> Dataset:
    try:
        with np.load(path, allow_pickle=False) as archive:
            if 'x' not in archive or 'y' not in archive:
                raise DataError(f"{path}: dataset archives need 'x' and 'y' arrays")
            return Dataset(archive['x'], archive['y'])
    except (OSError, ValueError) as err:
        if isinstance(err, DataError):
            raise
        raise DataError(f"{path}: unreadable dataset archive ({err})") from err
