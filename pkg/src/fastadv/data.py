"""Dataset ingestion: IDX binary parsing, batching, synthetic margin data."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


class IdxFormatError(Exception):
    """Malformed IDX byte stream."""


@dataclass
class Dataset:
    images: np.ndarray  # [n, ...] floats in [0, 1] for image data
    labels: np.ndarray  # [n] integer class ids
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images/labels length mismatch")

    def __len__(self):
        return len(self.labels)

    def subset(self, n):
        n = min(n, len(self))
        return Dataset(self.images[:n], self.labels[:n], self.split)


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    index: int


def parse_idx(data: bytes):
    """Parse one IDX stream into a numpy array.

    Image streams (magic 0x803, 3 dims) come back as float [n, h, w] scaled
    into [0, 1]; label streams (magic 0x801, 1 dim) as int64 [n].
    """
    if len(data) < 4:
        raise IdxFormatError("truncated stream: no magic")
    (magic,) = struct.unpack(">i", data[:4])
    if magic == IDX_MAGIC_IMAGES:
        ndim = 3
    elif magic == IDX_MAGIC_LABELS:
        ndim = 1
    else:
        raise IdxFormatError(f"bad magic 0x{magic & 0xFFFFFFFF:08x}")
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise IdxFormatError("truncated stream: incomplete dimension header")
    dims = struct.unpack(f">{ndim}i", data[4:header_len])
    if any(d < 0 for d in dims):
        raise IdxFormatError(f"negative dimension in header: {dims}")
    count = int(np.prod(dims)) if dims else 0
    payload = data[header_len:]
    if len(payload) != count:
        raise IdxFormatError(f"payload length {len(payload)} != declared {count}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    if magic == IDX_MAGIC_IMAGES:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.int64)


def serialize_idx(arr: np.ndarray) -> bytes:
    """Inverse of parse_idx for round-trip tests and fixtures."""
    if arr.ndim == 3:
        magic = IDX_MAGIC_IMAGES
        payload = np.round(np.asarray(arr) * 255.0).astype(np.uint8)
    elif arr.ndim == 1:
        magic = IDX_MAGIC_LABELS
        payload = np.asarray(arr).astype(np.uint8)
    else:
        raise IdxFormatError(f"unsupported rank {arr.ndim}")
    header = struct.pack(f">{1 + arr.ndim}i", magic, *arr.shape)
    return header + payload.tobytes()


def _read_maybe_gz(path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        with gzip.open(path, "rb") as f:
            return f.read()
    with open(path, "rb") as f:
        return f.read()


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist(root, split="train", dtype=np.float32) -> Dataset:
    """Load MNIST IDX files (plain or .gz) from a local directory."""
    img_name, lbl_name = MNIST_FILES[split]
    paths = {}
    for name in (img_name, lbl_name):
        for cand in (name, name + ".gz"):
            p = os.path.join(root, cand)
            if os.path.exists(p):
                paths[name] = p
                break
        else:
            raise FileNotFoundError(f"MNIST file {name}[.gz] not found under {root}")
    images = parse_idx(_read_maybe_gz(paths[img_name]))
    labels = parse_idx(_read_maybe_gz(paths[lbl_name]))
    images = images[:, None, :, :].astype(dtype)  # add channel axis
    return Dataset(images, labels, split)


def mnist_available(root) -> bool:
    try:
        for split in MNIST_FILES:
            for name in MNIST_FILES[split]:
                if not any(
                    os.path.exists(os.path.join(root, name + ext)) for ext in ("", ".gz")
                ):
                    return False
        return True
    except TypeError:
        return False


def batches(dataset: Dataset, batch_size, shuffle=False, rng=None):
    """Yield Batch objects covering the dataset exactly once."""
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(n)
    if shuffle:
        if rng is None:
            raise ValueError("shuffle=True requires an rng")
        order = rng.permutation(n)
    for bi, start in enumerate(range(0, n, batch_size)):
        idx = order[start : start + batch_size]
        yield Batch(dataset.images[idx], dataset.labels[idx], bi)


def num_batches(n, batch_size):
    return (n + batch_size - 1) // batch_size


def synthetic_margin_dataset(n, d, margin, eps_max, rng, split="train", w=None):
    """Linearly separable two-class data with a guaranteed l-inf robustness margin.

    Labels are y = sign(w.x) with |w.x| >= margin * ||w||_1 for every point,
    so the optimal linear classifier has zero robust error for any attack
    radius eps <= eps_max < margin, and the worst-case perturbation is
    -eps * sign(w) * y in closed form.

    Returns (Dataset with labels in {0, 1}, oracle weight vector w).
    """
    if not margin > eps_max:
        raise ValueError(f"margin ({margin}) must exceed eps_max ({eps_max})")
    if eps_max < 0:
        raise ValueError("eps_max must be >= 0")
    if w is None:
        w = rng.normal(size=d)
    else:
        w = np.asarray(w, dtype=float)
        if w.shape != (d,):
            raise ValueError("provided oracle w has wrong dimension")
    w = w / np.abs(w).sum()  # ||w||_1 == 1 so margins are in input units
    x = rng.uniform(-1.0, 1.0, size=(n, d))
    y = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    # project each point so that w.x = y * (margin + u) exactly, u in [0, margin]
    target = y * (margin + rng.uniform(0.0, margin, size=n))
    shift = (target - x @ w) / (w @ w)
    x = x + shift[:, None] * w[None, :]
    labels = (y > 0).astype(np.int64)
    return Dataset(x, labels, split), w


def oracle_linear_model(w, dtype=np.float64):
    """The optimal linear classifier for synthetic_margin_dataset.

    Class-1 logit minus class-0 logit equals w.x exactly.
    """
    from .models import build_linear

    model = build_linear(len(w), 2, dtype=dtype)
    W = np.stack([-np.asarray(w) / 2.0, np.asarray(w) / 2.0], axis=1)
    model.set_param_data({"w": W.astype(dtype), "b": np.zeros(2, dtype=dtype)})
    return model
