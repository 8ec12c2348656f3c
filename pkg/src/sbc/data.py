"""Dataset loading (MNIST IDX), synthetic generators and batching."""
import gzip
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DomainError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def flat(self):
        return Dataset(self.images.reshape(len(self), -1), self.labels, self.split, self.num_classes)

    def subset(self, n):
        return Dataset(self.images[:n], self.labels[:n], self.split, self.num_classes)


def _read(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(buf, expected_magic):
    """Parse an IDX byte string into a uint8 array of the declared shape."""
    if len(buf) < 4:
        raise FormatError("truncated IDX header", offset=len(buf))
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise FormatError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise FormatError("truncated IDX dimension block", offset=len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    need = head + int(np.prod(dims))
    if len(buf) < need:
        raise FormatError(f"IDX payload truncated: have {len(buf)} bytes, need {need}", offset=len(buf))
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after IDX payload", offset=need)
    return np.frombuffer(buf, dtype=np.uint8, offset=head).reshape(dims)


def load_mnist_idx(image_path, label_path, split="train"):
    images = parse_idx(_read(image_path), IMAGE_MAGIC)
    labels = parse_idx(_read(label_path), LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels in {label_path}", offset=4)
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels.astype(np.int64), split)


def find_mnist(root, split):
    names = MNIST_FILES[split]
    paths = []
    for name in names:
        for cand in (name, name + ".gz", name.replace("-idx", ".idx")):
            p = os.path.join(root, cand)
            if os.path.exists(p):
                paths.append(p)
                break
        else:
            raise FileNotFoundError(f"{name} not found under {root}")
    return paths


def load_mnist(root, split):
    return load_mnist_idx(*find_mnist(root, split), split=split)


def write_idx(path, array):
    """Write a uint8 array as IDX (used for fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


# ---------------------------------------------------------------- synthetic


@dataclass
class BlockSparseProblem:
    X: np.ndarray
    w: np.ndarray
    y: np.ndarray
    noise: float
    block_size: int
    active_offsets: tuple


def synth_blocksparse(n_features, block_size, k_active, n_samples, noise=0.0, seed=0, snr_db=None):
    """Gaussian design with a weight vector supported on k disjoint aligned blocks.

    If ``snr_db`` is given it overrides ``noise``: sigma = std(Xw) / 10^(snr/20).
    """
    if block_size < 1 or k_active < 0 or k_active * block_size > n_features:
        raise DomainError("k_active * block_size must not exceed n_features")
    rng = np.random.default_rng(seed)
    slots = n_features // block_size
    chosen = np.sort(rng.choice(slots, size=k_active, replace=False)) if k_active else np.array([], int)
    w = np.zeros(n_features)
    for s in chosen:
        w[s * block_size:(s + 1) * block_size] = rng.standard_normal(block_size)
    X = rng.standard_normal((n_samples, n_features))
    signal = X @ w
    if snr_db is not None:
        noise = float(signal.std() / 10 ** (snr_db / 20)) if k_active else 1.0
    y = signal + noise * rng.standard_normal(n_samples)
    return BlockSparseProblem(X, w, y, float(noise), block_size, tuple(int(s) * block_size for s in chosen))


def synth_classification(n, classes=4, image_size=32, seed=0, noise=0.15):
    """Balanced class-conditional textured patches.

    Each class is an oriented grating (orientation and frequency set by the
    class) inside a Gaussian window at a random location, with a random phase,
    on a background of pixel noise.
    """
    if n % classes:
        raise DomainError(f"n={n} must be divisible by classes={classes}")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), n // classes)
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    theta = np.pi * labels / classes
    freq = 2 * np.pi * (0.12 + 0.06 * (labels % 2))
    phase = rng.uniform(0, 2 * np.pi, n)
    cy = rng.uniform(0.3, 0.7, n) * image_size
    cx = rng.uniform(0.3, 0.7, n) * image_size
    width = image_size * rng.uniform(0.18, 0.25, n)
    u = (xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None])
    grating = np.cos(freq[:, None, None] * u + phase[:, None, None])
    window = np.exp(-((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2)
                    / (2 * width[:, None, None] ** 2))
    img = 0.5 + 0.4 * grating * window + noise * rng.standard_normal((n, image_size, image_size))
    return Dataset(np.clip(img, 0.0, 1.0)[:, None], labels.astype(np.int64), "synthetic", classes)


# ---------------------------------------------------------------- batching


def epoch_seed(seed, epoch):
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def batches(dataset, batch_size, seed):
    """Yield (images, labels) over one seeded permutation; the last batch may be short."""
    if batch_size < 1:
        raise DomainError("batch_size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def batch_indices(n, batch_size, seed):
    order = np.random.default_rng(seed).permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


def num_batches(n, batch_size):
    return math.ceil(n / batch_size)
