"""IDX dataset ingestion, augmentation and deterministic batching."""

from __future__ import annotations

import gzip
import os
import queue
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


class IDXFormatError(ValueError):
    pass


def parse_idx(raw: bytes, allowed_types=(0x08,)) -> tuple[tuple[int, ...], np.ndarray]:
    """Decode an IDX byte string into ``(dims, array)``.

    Layout: two zero bytes, a type code, the number of dimensions, one
    big-endian uint32 per dimension, then the row-major payload.
    Gzip-compressed input is detected and decompressed first.
    """
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise IDXFormatError(f"corrupt gzip stream: {exc}") from exc
    if len(raw) < 4:
        raise IDXFormatError(f"file too short for an IDX header ({len(raw)} bytes)")
    if raw[0] != 0 or raw[1] != 0:
        raise IDXFormatError(f"bad magic: first two bytes are {raw[0]:#04x} {raw[1]:#04x}, expected 0x00 0x00")
    code, ndims = raw[2], raw[3]
    if code not in IDX_TYPES:
        raise IDXFormatError(f"unknown type code {code:#04x}")
    if code not in allowed_types:
        raise IDXFormatError(f"unsupported type code {code:#04x}; expected one of "
                             + ", ".join(f"{c:#04x}" for c in allowed_types))
    if ndims == 0:
        raise IDXFormatError("IDX file declares zero dimensions")
    header = 4 + 4 * ndims
    if len(raw) < header:
        raise IDXFormatError(f"truncated header: {ndims} dimensions need {header} bytes, got {len(raw)}")
    dims = tuple(int(d) for d in np.frombuffer(raw, dtype=">u4", count=ndims, offset=4))
    dtype = IDX_TYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = len(raw) - header
    if payload < expected:
        raise IDXFormatError(f"truncated payload: dims {dims} need {expected} bytes, got {payload}")
    if payload > expected:
        raise IDXFormatError(f"trailing data: dims {dims} need {expected} bytes, got {payload}")
    data = np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)
    return dims, data.astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray, compress: bool | None = None) -> None:
    """Write an unsigned-byte array as IDX; gzip when the path ends in .gz."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("only uint8 arrays are written")
    header = bytes([0, 0, 0x08, array.ndim]) + np.asarray(array.shape, dtype=">u4").tobytes()
    raw = header + np.ascontiguousarray(array).tobytes()
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    path.write_bytes(gzip.compress(raw, mtime=0) if compress else raw)


def read_idx(path, allowed_types=(0x08,)) -> np.ndarray:
    return parse_idx(Path(path).read_bytes(), allowed_types)[1]


@dataclass
class Dataset:
    images: np.ndarray   # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray   # [N] int64
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N,C,H,W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int | None = None, seed: int = 0) -> "Dataset":
        """First ``n`` samples of a seeded permutation."""
        if n is None or n >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).permutation(len(self))[:n])
        return Dataset(self.images[idx], self.labels[idx], self.split, self.num_classes)

    def pooled(self, k: int) -> "Dataset":
        """Average-pool images over non-overlapping k x k windows (k=1 is a no-op)."""
        if k < 1:
            raise ValueError("pool size must be >= 1")
        if k == 1:
            return self
        n, c, h, w = self.images.shape
        if h % k or w % k:
            raise ValueError(f"image size {h}x{w} not divisible by {k}")
        x = self.images.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
        return Dataset(x.astype(self.images.dtype), self.labels, self.split, self.num_classes)

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        x = self.images.astype(np.float64)
        return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (root / name).exists():
            return root / name
    raise FileNotFoundError(f"{stem}[.gz] not found under {root}")


def load_idx_dataset(root, split: str = "train") -> Dataset:
    """Load an MNIST-layout directory (MNIST or Fashion-MNIST)."""
    if split not in FILES:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    img_stem, lbl_stem = FILES[split]
    images = read_idx(_find(root, img_stem))
    labels = read_idx(_find(root, lbl_stem))
    if images.ndim != 3 or labels.ndim != 1:
        raise IDXFormatError(f"unexpected ranks: images {images.shape}, labels {labels.shape}")
    x = (images.astype(np.float32) / np.float32(255.0))[:, None]
    return Dataset(x, labels.astype(np.int64), split)


load_mnist = load_idx_dataset
load_fashion_mnist = load_idx_dataset


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return ((images - mean) / std).astype(np.float32)


@dataclass(frozen=True)
class AugmentConfig:
    pad_crop: int = 0
    hflip_p: float = 0.0

    def __post_init__(self):
        if self.pad_crop < 0:
            raise ValueError("pad_crop must be >= 0")
        if not 0.0 <= self.hflip_p <= 1.0:
            raise ValueError("hflip_p must be in [0, 1]")


def augment(batch: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Reflect-pad by k then crop back at a random offset; random horizontal flip."""
    out = batch
    n, _, h, w = batch.shape
    k = cfg.pad_crop
    if k > 0:
        padded = np.pad(batch, ((0, 0), (0, 0), (k, k), (k, k)), mode="reflect")
        oy = rng.integers(0, 2 * k + 1, n)
        ox = rng.integers(0, 2 * k + 1, n)
        out = np.empty_like(batch)
        for i in range(n):
            out[i] = padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
    if cfg.hflip_p > 0:
        flip = rng.random(n) < cfg.hflip_p
        if flip.any():
            out = out.copy() if out is batch else out
            out[flip] = out[flip][..., ::-1]
    return out


def batch_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def batches(dataset: Dataset, batch_size: int, shuffle_seed: int | None = 0, epoch: int = 0,
            augment_cfg: AugmentConfig | None = None, mean=None, std=None, aug_seed: int = 0):
    """Yield ``(images, labels)`` for one epoch.

    The order is a permutation seeded by ``(shuffle_seed, epoch)``; the last
    short batch is kept. Augmentation draws from an RNG keyed by
    ``(aug_seed, epoch, batch index)``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    for bi, start in enumerate(range(0, n, batch_size)):
        idx = order[start:start + batch_size]
        x = dataset.images[idx]
        if augment_cfg is not None and (augment_cfg.pad_crop or augment_cfg.hflip_p):
            x = augment(x, augment_cfg, batch_rng(aug_seed, epoch, bi))
        if mean is not None:
            x = normalize(x, mean, std)
        yield x, dataset.labels[idx]


def prefetch(iterator, depth: int = 2):
    """Run ``iterator`` on a worker thread, handing items over a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    errors = []

    def work():
        try:
            for item in iterator:
                q.put(item)
        except BaseException as exc:  # surfaced in the consumer
            errors.append(exc)
        finally:
            q.put(done)

    threading.Thread(target=work, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    if errors:
        raise errors[0]


def default_data_root() -> Path:
    env = os.environ.get("DASNN_DATA")
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / "data" / "mnist"
