"""Bundled benchmark data: a deterministic 28x28 digit corpus and toy sets.

The digit corpus is built offline-style from scikit-learn's bundled 8x8 digits
(no network access): images of the two target classes are bilinearly upscaled
to 28x28 and augmented with small deterministic shifts until the requested
split sizes are reached.  The corpus is written as standard IDX files so the
exact ingestion path used for externally supplied data is exercised.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage
from sklearn.datasets import load_digits

from . import data_io

TRAIN_IMAGES = "train-images.idx"
TRAIN_LABELS = "train-labels.idx"
TEST_IMAGES = "test-images.idx"
TEST_LABELS = "test-labels.idx"


def _upscale(img8: np.ndarray) -> np.ndarray:
    """Bilinear 8x8 -> 28x28, values scaled into [0, 1]."""
    out = ndimage.zoom(img8 / 16.0, 28 / 8, order=1)
    return np.clip(out, 0.0, 1.0)


def _augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random +-2 pixel shift with zero fill; keeps values in [0, 1]."""
    dy, dx = rng.integers(-2, 3, size=2)
    return ndimage.shift(img, (dy, dx), order=0, cval=0.0)


def build_digit_corpus(
    out_dir,
    classes: tuple[int, int] = (0, 1),
    n_train: int = 2000,
    n_test: int = 400,
    seed: int = 0,
) -> dict[str, Path]:
    """Write a deterministic binary digit corpus as four IDX files.

    Returns the paths keyed by role.  Re-running with the same arguments
    produces byte-identical files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digits = load_digits()
    rng = np.random.default_rng(seed)
    # base images are split disjointly between train and test before augmentation
    train_pools, test_pools = {}, {}
    for cls in classes:
        base = [digits.images[i] for i in range(len(digits.target)) if digits.target[i] == cls]
        upscaled = [_upscale(img) for img in base]
        cut = max(1, len(upscaled) // 5)
        test_pools[cls] = upscaled[:cut]
        train_pools[cls] = upscaled[cut:]

    def draw(pools: dict, n_per_class: int) -> tuple[np.ndarray, np.ndarray]:
        images, labels = [], []
        for label, cls in enumerate(classes):
            pool = pools[cls]
            for j in range(n_per_class):
                img = pool[j % len(pool)]
                if j >= len(pool):
                    img = _augment(img, rng)
                images.append(img)
                labels.append(label)
        order = rng.permutation(len(images))
        return np.stack(images)[order], np.array(labels)[order]

    train_x, train_y = draw(train_pools, n_train // 2)
    test_x, test_y = draw(test_pools, n_test // 2)
    paths = {
        "train_images": out_dir / TRAIN_IMAGES,
        "train_labels": out_dir / TRAIN_LABELS,
        "test_images": out_dir / TEST_IMAGES,
        "test_labels": out_dir / TEST_LABELS,
    }
    data_io.write_idx_images(paths["train_images"], train_x)
    data_io.write_idx_labels(paths["train_labels"], train_y)
    data_io.write_idx_images(paths["test_images"], test_x)
    data_io.write_idx_labels(paths["test_labels"], test_y)
    return paths


def load_digit_corpus(dir_path) -> tuple[data_io.RawDataset, data_io.RawDataset]:
    """Read a corpus written by :func:`build_digit_corpus` (train, test)."""
    dir_path = Path(dir_path)
    train = data_io.load_idx_pair(dir_path / TRAIN_IMAGES, dir_path / TRAIN_LABELS)
    test = data_io.load_idx_pair(dir_path / TEST_IMAGES, dir_path / TEST_LABELS)
    return train, test


def bars_and_stripes(side: int, rng: np.random.Generator, n: int) -> list[np.ndarray]:
    """Random bars-and-stripes patterns: each row or each column all 0 or all 1."""
    out = []
    for _ in range(n):
        bits = rng.integers(0, 2, size=side).astype(float)
        pattern = np.tile(bits[:, None], (1, side))
        if rng.random() < 0.5:
            pattern = pattern.T
        out.append(pattern)
    return out
