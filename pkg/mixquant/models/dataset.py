"""
In-memory labelled image set
"""

from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from ..core.errors import ConsistencyError, ContractError


@dataclass
class Dataset:
    """N x C x H x W float32 images in [0, 1] with integer labels"""
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ContractError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ConsistencyError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConsistencyError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return self.images.shape[1:]

    def subset(self, indices: np.ndarray) -> 'Dataset':
        return Dataset(self.images[indices], self.labels[indices], self.num_classes)

    def batches(self, batch_size: int, order: Optional[np.ndarray] = None,
                min_size: int = 1) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Yield (indices, images, labels); a trailing batch smaller than min_size is dropped"""
        if batch_size < 1:
            raise ContractError(f"batch size must be >= 1, got {batch_size}")
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), batch_size):
            index = order[start:start + batch_size]
            if len(index) < min_size:
                break
            yield index, self.images[index], self.labels[index]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)
