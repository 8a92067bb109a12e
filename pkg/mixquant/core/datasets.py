"""
Dataset loaders: IDX files (MNIST layout) and a seeded synthetic generator
"""

import struct
from typing import Optional, Tuple

import numpy as np
import structlog

from ..models.config import DataSource
from ..models.dataset import Dataset
from .errors import ConsistencyError, ContractError, FormatError
from .persistence import atomic_write_bytes
from .rng import SplitMix64, derive_seed

logger = structlog.get_logger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# Synthetic gratings
GRATING_CYCLES = 2.0
GRATING_CONTRAST = 0.8
AMPLITUDE_JITTER = 0.2
DEFAULT_NOISE = 0.3


def _read_header(data: bytes, path: str, magic: int, dims: int) -> Tuple[int, ...]:
    header_size = 4 * (1 + dims)
    if len(data) < header_size:
        raise FormatError(f"{path}: file too short for an IDX header ({len(data)} bytes)")
    observed = struct.unpack('>I', data[:4])[0]
    if observed != magic:
        raise FormatError(f"{path}: bad magic 0x{observed:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{dims}I", data[4:header_size])


def load_idx(images_path: str, labels_path: str, num_classes: Optional[int] = None) -> Dataset:
    """Read a big-endian IDX image/label pair; pixels are scaled to [0, 1]"""
    with open(images_path, 'rb') as f:
        image_bytes = f.read()
    with open(labels_path, 'rb') as f:
        label_bytes = f.read()

    count, rows, cols = _read_header(image_bytes, images_path, IMAGE_MAGIC, 3)
    (label_count,) = _read_header(label_bytes, labels_path, LABEL_MAGIC, 1)
    pixels = np.frombuffer(image_bytes, dtype=np.uint8, offset=16)
    labels = np.frombuffer(label_bytes, dtype=np.uint8, offset=8)
    if pixels.size != count * rows * cols:
        raise FormatError(f"{images_path}: expected {count * rows * cols} pixel bytes, found {pixels.size}")
    if labels.size != label_count:
        raise FormatError(f"{labels_path}: expected {label_count} label bytes, found {labels.size}")
    if count != label_count:
        raise ConsistencyError(f"{count} images in {images_path} but {label_count} labels in {labels_path}")

    images = (pixels.reshape(count, 1, rows, cols).astype(np.float32) / 255.0).astype(np.float32)
    labels = labels.astype(np.int64)
    classes = num_classes if num_classes is not None else int(labels.max()) + 1 if count else 1
    logger.info("Loaded IDX dataset", path=images_path, samples=count, height=rows, width=cols)
    return Dataset(images, labels, classes)


def save_idx(dataset: Dataset, images_path: str, labels_path: str):
    """Write a single-channel dataset as an IDX pair (pixels rounded to bytes)"""
    count, channels, rows, cols = dataset.images.shape
    if channels != 1:
        raise ContractError(f"IDX stores single-channel images, got {channels} channels")
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    atomic_write_bytes(images_path, struct.pack('>4I', IMAGE_MAGIC, count, rows, cols) + pixels.tobytes())
    atomic_write_bytes(labels_path, struct.pack('>2I', LABEL_MAGIC, count) + dataset.labels.astype(np.uint8).tobytes())


def class_pattern(label: int, classes: int, height: int, width: int) -> np.ndarray:
    """Noise-free grating of one class: orientation pi * label / classes"""
    theta = np.pi * label / classes
    rows, cols = np.meshgrid(np.arange(height) / height, np.arange(width) / width, indexing='ij')
    phase = 2.0 * np.pi * GRATING_CYCLES * (rows * np.cos(theta) + cols * np.sin(theta))
    return 0.5 + 0.5 * GRATING_CONTRAST * np.cos(phase)


def synth_dataset(seed: int, n: int, classes: int = 10, height: int = 16, width: int = 16,
                  noise: float = DEFAULT_NOISE) -> Dataset:
    """Balanced oriented-grating images with seeded amplitude jitter and Gaussian noise"""
    if n < classes:
        raise ContractError(f"need at least one sample per class: n={n} < classes={classes}")
    if classes < 1 or height < 1 or width < 1:
        raise ContractError("classes and image size must be positive")
    labels = np.arange(n) % classes
    labels = labels[SplitMix64(derive_seed(seed, 1)).permutation(n)]

    rng = SplitMix64(derive_seed(seed, 2))
    patterns = np.stack([class_pattern(c, classes, height, width) for c in range(classes)])
    gain = 1.0 + AMPLITUDE_JITTER * (rng.uniform(n) - 0.5)
    centered = (patterns[labels] - 0.5) * gain[:, None, None]
    images = 0.5 + centered + noise * rng.normal((n, height, width))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)[:, None, :, :]
    logger.debug("Synthetic dataset generated", seed=seed, samples=n, classes=classes)
    return Dataset(images, labels.astype(np.int64), classes)


def dataset_from_config(data_config, model_config) -> Tuple[Dataset, Dataset]:
    """(train, test) datasets for a run"""
    if data_config.source is DataSource.IDX:
        train = load_idx(data_config.train_images, data_config.train_labels, model_config.num_classes)
        test = load_idx(data_config.test_images, data_config.test_labels, model_config.num_classes)
    else:
        size = model_config.image_size
        train = synth_dataset(derive_seed(data_config.seed, 10), data_config.n_train,
                              model_config.num_classes, size, size, data_config.noise)
        test = synth_dataset(derive_seed(data_config.seed, 20), data_config.n_test,
                             model_config.num_classes, size, size, data_config.noise)
    if train.image_shape != (model_config.in_channels, model_config.image_size, model_config.image_size):
        raise ConsistencyError(
            f"images of shape {train.image_shape} do not fit the model input "
            f"({model_config.in_channels}, {model_config.image_size}, {model_config.image_size})")
    return train, test
