import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from fastadv.data import Dataset, mnist_available

MNIST_DIR = os.environ.get("FASTADV_DATA_ROOT") or os.environ.get("MNIST_DIR") or "data/mnist"

requires_mnist = pytest.mark.skipif(
    not mnist_available(MNIST_DIR),
    reason=f"MNIST IDX files not found under {MNIST_DIR!r} "
    "(set FASTADV_DATA_ROOT or run scripts/fetch_mnist.sh on a networked machine)",
)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def toy_image_dataset(n=256, classes=4, size=12, noise=0.05, seed=0, split="train"):
    """Small synthetic image classification task: one fixed random template
    per class plus pixel noise, clipped into [0, 1]."""
    g = np.random.default_rng(seed)
    templates = g.random((classes, 1, size, size))
    labels = g.integers(0, classes, size=n)
    images = templates[labels] + noise * g.standard_normal((n, 1, size, size))
    return Dataset(np.clip(images, 0.0, 1.0), labels.astype(np.int64), split), templates


@pytest.fixture
def toy_images():
    return toy_image_dataset()[0]
