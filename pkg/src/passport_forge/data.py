"""Dataset ingestion, deterministic subsetting, and split construction.

Readers decode the standard MNIST IDX and CIFAR-10 binary layouts exactly.
Because those corpora may not be present on a dev box, a procedural
generator can synthesize class-separable images and write them in the same
binary formats, so the whole pipeline (loader included) stays exercised.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import DTYPE

_IDX_IMAGES_MAGIC = 2051
_IDX_LABELS_MAGIC = 2049
_CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 pixel bytes


class DatasetFormatError(ValueError):
    """Dataset file fails its format contract (magic, size, structure)."""


@dataclass
class Dataset:
    """Normalized images plus labels; normalization constants travel along."""

    images: np.ndarray  # [N,C,H,W] float32
    labels: np.ndarray  # [N] int64
    tag: str            # train | test | attack
    num_classes: int
    mean: np.ndarray    # per-channel, float32
    std: np.ndarray
    source_indices: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"images/labels length mismatch: {len(self.images)} vs {len(self.labels)}"
            )
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise ValueError("labels exceed num_classes")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_hw(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    @property
    def channels(self) -> int:
        return self.images.shape[1]


def _normalize_pair(train_u8: np.ndarray, test_u8: np.ndarray, num_classes: int,
                    train_labels, test_labels) -> tuple[Dataset, Dataset]:
    train_f = train_u8.astype(np.float32) / 255.0
    test_f = test_u8.astype(np.float32) / 255.0
    mean = train_f.mean(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE)
    std = train_f.std(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE)
    std = np.maximum(std, DTYPE(1e-6))
    def norm(x):
        return ((x - mean[None, :, None, None]) / std[None, :, None, None]).astype(DTYPE)
    common = dict(num_classes=num_classes, mean=mean, std=std)
    train = Dataset(images=norm(train_f), labels=np.asarray(train_labels, np.int64),
                    tag="train", **common)
    test = Dataset(images=norm(test_f), labels=np.asarray(test_labels, np.int64),
                   tag="test", **common)
    return train, test


# ---------------------------------------------------------------------------
# MNIST IDX format
# ---------------------------------------------------------------------------


def _read_idx_images(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    if len(blob) < 16:
        raise DatasetFormatError(f"{path.name}: truncated IDX header")
    magic, count, rows, cols = struct.unpack(">IIII", blob[:16])
    if magic != _IDX_IMAGES_MAGIC:
        raise DatasetFormatError(f"{path.name}: bad IDX image magic {magic}")
    expected = 16 + count * rows * cols
    if len(blob) != expected:
        raise DatasetFormatError(
            f"{path.name}: expected {expected} bytes for {count} images, got {len(blob)}"
        )
    return np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(count, 1, rows, cols)


def _read_idx_labels(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    if len(blob) < 8:
        raise DatasetFormatError(f"{path.name}: truncated IDX header")
    magic, count = struct.unpack(">II", blob[:8])
    if magic != _IDX_LABELS_MAGIC:
        raise DatasetFormatError(f"{path.name}: bad IDX label magic {magic}")
    if len(blob) != 8 + count:
        raise DatasetFormatError(f"{path.name}: expected {count} labels")
    return np.frombuffer(blob, dtype=np.uint8, offset=8)


def load_mnist(data_dir) -> tuple[Dataset, Dataset]:
    d = Path(data_dir)
    train_x = _read_idx_images(d / "train-images-idx3-ubyte")
    train_y = _read_idx_labels(d / "train-labels-idx1-ubyte")
    test_x = _read_idx_images(d / "t10k-images-idx3-ubyte")
    test_y = _read_idx_labels(d / "t10k-labels-idx1-ubyte")
    if len(train_x) != len(train_y) or len(test_x) != len(test_y):
        raise DatasetFormatError("image/label counts disagree")
    return _normalize_pair(train_x, test_x, 10, train_y, test_y)


def write_mnist(data_dir, train_images: np.ndarray, train_labels: np.ndarray,
                test_images: np.ndarray, test_labels: np.ndarray) -> None:
    """Write uint8 [N,1,H,W] image stacks as standard IDX files."""
    d = Path(data_dir)
    d.mkdir(parents=True, exist_ok=True)

    def _images(path, imgs):
        n, _, h, w = imgs.shape
        path.write_bytes(struct.pack(">IIII", _IDX_IMAGES_MAGIC, n, h, w)
                         + np.ascontiguousarray(imgs, np.uint8).tobytes())

    def _labels(path, labels):
        path.write_bytes(struct.pack(">II", _IDX_LABELS_MAGIC, len(labels))
                         + np.ascontiguousarray(labels, np.uint8).tobytes())

    _images(d / "train-images-idx3-ubyte", train_images)
    _labels(d / "train-labels-idx1-ubyte", train_labels)
    _images(d / "t10k-images-idx3-ubyte", test_images)
    _labels(d / "t10k-labels-idx1-ubyte", test_labels)


# ---------------------------------------------------------------------------
# CIFAR-10 binary format
# ---------------------------------------------------------------------------


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    blob = path.read_bytes()
    if not blob or len(blob) % _CIFAR_RECORD:
        raise DatasetFormatError(
            f"{path.name}: size {len(blob)} is not a multiple of {_CIFAR_RECORD}"
        )
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = records[:, 0]
    if labels.size and labels.max() > 9:
        raise DatasetFormatError(f"{path.name}: label byte exceeds 9")
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(data_dir) -> tuple[Dataset, Dataset]:
    d = Path(data_dir)
    batch_files = sorted(d.glob("data_batch_*.bin"))
    if not batch_files:
        raise DatasetFormatError(f"no data_batch_*.bin files under {d}")
    xs, ys = zip(*(_read_cifar_file(p) for p in batch_files))
    train_x = np.concatenate(xs)
    train_y = np.concatenate(ys)
    test_x, test_y = _read_cifar_file(d / "test_batch.bin")
    return _normalize_pair(train_x, test_x, 10, train_y, test_y)


def write_cifar10(data_dir, train_images: np.ndarray, train_labels: np.ndarray,
                  test_images: np.ndarray, test_labels: np.ndarray) -> None:
    """Write uint8 [N,3,32,32] stacks as CIFAR-10 .bin batches (<=10000 records each)."""
    d = Path(data_dir)
    d.mkdir(parents=True, exist_ok=True)

    def _records(imgs, labels):
        rec = np.empty((len(imgs), _CIFAR_RECORD), np.uint8)
        rec[:, 0] = labels
        rec[:, 1:] = np.ascontiguousarray(imgs, np.uint8).reshape(len(imgs), -1)
        return rec.tobytes()

    chunks = max(1, -(-len(train_images) // 10000))
    for i in range(chunks):
        sl = slice(i * 10000, (i + 1) * 10000)
        (d / f"data_batch_{i + 1}.bin").write_bytes(
            _records(train_images[sl], train_labels[sl])
        )
    (d / "test_batch.bin").write_bytes(_records(test_images, test_labels))


def load_dataset(kind: str, data_dir) -> tuple[Dataset, Dataset]:
    if kind == "mnist":
        return load_mnist(data_dir)
    if kind == "cifar10":
        return load_cifar10(data_dir)
    raise ValueError(f"unknown dataset kind '{kind}'")


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def _resize_bilinear(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = a.shape[-2:]
    ys = np.linspace(0, in_h - 1, out_h)
    xs = np.linspace(0, in_w - 1, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    tl = a[..., y0[:, None], x0[None, :]]
    tr = a[..., y0[:, None], x1[None, :]]
    bl = a[..., y1[:, None], x0[None, :]]
    br = a[..., y1[:, None], x1[None, :]]
    return (tl * (1 - wy) * (1 - wx) + tr * (1 - wy) * wx
            + bl * wy * (1 - wx) + br * wy * wx)


def synth_images(kind: str, n: int, seed: int, num_classes: int = 10):
    """Procedural class-separable images in uint8, MNIST- or CIFAR-shaped.

    Each class gets a fixed low-frequency template; samples are cyclic shifts
    of it with amplitude jitter and pixel noise. Easy for a small CNN, hard
    for anything that scrambles per-channel feature scales.
    """
    if kind == "mnist":
        channels, hw = 1, 28
    elif kind == "cifar10":
        channels, hw = 3, 32
    else:
        raise ValueError(f"unknown dataset kind '{kind}'")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(99,)))
    coarse = rng.normal(size=(num_classes, channels, 7, 7))
    templates = np.stack([
        np.stack([_resize_bilinear(coarse[k, c], hw, hw) for c in range(channels)])
        for k in range(num_classes)
    ])
    lo = templates.min(axis=(1, 2, 3), keepdims=True)
    hi = templates.max(axis=(1, 2, 3), keepdims=True)
    templates = (templates - lo) / (hi - lo + 1e-9)

    labels = (np.arange(n) % num_classes).astype(np.uint8)
    rng.shuffle(labels)
    shifts = rng.integers(-4, 5, size=(n, 2))
    amps = rng.uniform(0.7, 1.3, size=n)
    noise = rng.normal(0.0, 0.12, size=(n, channels, hw, hw))
    images = np.empty((n, channels, hw, hw), np.uint8)
    for i in range(n):
        img = np.roll(templates[labels[i]], tuple(shifts[i]), axis=(1, 2))
        img = np.clip(img * amps[i] + noise[i], 0.0, 1.0)
        images[i] = np.round(img * 255).astype(np.uint8)
    return images, labels


def make_synthetic_dataset(kind: str, data_dir, n_train: int, n_test: int,
                           seed: int, num_classes: int = 10) -> None:
    """Synthesize a dataset and persist it in the real binary format."""
    images, labels = synth_images(kind, n_train + n_test, seed, num_classes)
    train_x, test_x = images[:n_train], images[n_train:]
    train_y, test_y = labels[:n_train], labels[n_train:]
    if kind == "mnist":
        write_mnist(data_dir, train_x, train_y, test_x, test_y)
    else:
        write_cifar10(data_dir, train_x, train_y, test_x, test_y)


# ---------------------------------------------------------------------------
# subsetting / splits
# ---------------------------------------------------------------------------


def _take(ds: Dataset, indices: np.ndarray, tag: str) -> Dataset:
    base = ds.source_indices if ds.source_indices is not None else np.arange(len(ds))
    return Dataset(
        images=ds.images[indices],
        labels=ds.labels[indices],
        tag=tag,
        num_classes=ds.num_classes,
        mean=ds.mean,
        std=ds.std,
        source_indices=base[indices],
    )


def subset(ds: Dataset, fraction: float, seed: int, stratified: bool = True,
           tag: str = "attack") -> Dataset:
    """Deterministic random subset; stratified keeps classes within +-1 sample."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if tag == "attack" and ds.tag == "test":
        raise ValueError("attack subsets must be drawn from training data, not the test set")
    n = len(ds)
    target = int(round(fraction * n))
    if target == 0:
        raise ValueError(f"fraction {fraction} of {n} samples selects nothing")
    if fraction == 1.0:
        return _take(ds, np.arange(n), tag)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(7,)))
    if not stratified:
        return _take(ds, np.sort(rng.choice(n, size=target, replace=False)), tag)
    picks = []
    classes = np.arange(ds.num_classes)
    counts = {c: int(np.floor(fraction * (ds.labels == c).sum())) for c in classes}
    remainder = target - sum(counts.values())
    for c in rng.permutation(classes)[:remainder]:
        counts[int(c)] += 1
    for c in classes:
        pool = np.flatnonzero(ds.labels == c)
        k = min(counts[int(c)], len(pool))
        if k:
            picks.append(rng.choice(pool, size=k, replace=False))
    indices = np.sort(np.concatenate(picks))
    return _take(ds, indices, tag)


def disjoint_split(ds: Dataset, owner_count: int, attacker_count: int,
                   seed: int) -> tuple[Dataset, Dataset]:
    """Split into non-overlapping owner/attacker subsets, deterministic under seed."""
    n = len(ds)
    if owner_count < 0 or attacker_count < 0 or owner_count + attacker_count > n:
        raise ValueError(
            f"requested {owner_count}+{attacker_count} samples from a set of {n}"
        )
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(8,)))
    perm = rng.permutation(n)
    owner_idx = np.sort(perm[:owner_count])
    attacker_idx = np.sort(perm[owner_count : owner_count + attacker_count])
    return _take(ds, owner_idx, "train"), _take(ds, attacker_idx, "attack")
