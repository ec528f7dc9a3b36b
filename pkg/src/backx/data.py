"""Dataset ingestion and synthesis.

Pixels are always float32 in [0,1], channels-first, before any normalization.
Triggers are stamped in that raw pixel space; normalization happens inside the
model adapter so visibility keeps a fixed perceptual meaning across datasets.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .errors import IngestionError, InputError, InputShapeError

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.5, 0.5, 0.5)

_CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixel bytes
_CIFAR_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)


@dataclass
class ImageBatch:
    """Dense labeled pixel batch.

    pixels: (batch, channels, height, width) float32 in [0,1]
    labels: (batch,) int64
    indices: (batch,) int64 stable source ids, unique across train/test
    """

    pixels: np.ndarray
    labels: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.pixels.ndim != 4:
            raise InputShapeError(f"pixels must be 4-d, got {self.pixels.shape}")
        if len(self.labels) != len(self.pixels) or len(self.indices) != len(self.pixels):
            raise InputError("labels/indices length must equal batch size")
        if not np.isfinite(self.pixels).all():
            raise InputError("pixels contain non-finite values")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise InputError("pixels must lie in [0,1]")

    def __len__(self) -> int:
        return len(self.pixels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    def select(self, where) -> "ImageBatch":
        return ImageBatch(self.pixels[where], self.labels[where], self.indices[where])

    def copy(self) -> "ImageBatch":
        return ImageBatch(self.pixels.copy(), self.labels.copy(), self.indices.copy())

    def iter_minibatches(self, batch_size: int, seed: int | None = None) -> Iterator["ImageBatch"]:
        """Stream fixed-size minibatches; a given seed fixes the shuffle order."""
        order = np.arange(len(self))
        if seed is not None:
            order = np.random.default_rng(seed).permutation(len(self))
        for i in range(0, len(self), batch_size):
            yield self.select(order[i:i + batch_size])

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.pixels).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


@dataclass
class DatasetHandle:
    """A named dataset with lazily decoded train/test splits.

    Split loaders run once; decoded batches are cached. Checksums in
    `provenance` are computed at load time from the on-disk bytes.
    """

    name: str
    num_classes: int
    class_names: list[str]
    normalization: tuple[tuple[float, ...], tuple[float, ...]]
    provenance: dict
    loaders: dict[str, Callable[[], ImageBatch]] = field(repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    def split(self, name: str) -> ImageBatch:
        if name not in self.loaders:
            raise InputError(f"unknown split {name!r}")
        if name not in self._cache:
            batch = self.loaders[name]()
            bad = (batch.labels < 0) | (batch.labels >= self.num_classes)
            if bad.any():
                raise IngestionError(f"split {name!r} has labels outside [0,{self.num_classes})")
            self._cache[name] = batch
        return self._cache[name]

    @property
    def train(self) -> ImageBatch:
        return self.split("train")

    @property
    def test(self) -> ImageBatch:
        return self.split("test")


def apply_normalization(pixels: np.ndarray, normalization) -> np.ndarray:
    """(pixel - mean) / std per channel. Inverse is invert_normalization."""
    mean, std = normalization
    mean = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return (np.asarray(pixels, dtype=np.float32) - mean) / std


def invert_normalization(normalized: np.ndarray, normalization) -> np.ndarray:
    mean, std = normalization
    mean = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return np.asarray(normalized, dtype=np.float32) * std + mean


def _class_pattern(c: int, num_classes: int, size: int) -> np.ndarray:
    # one oriented grating per class plus a 3-bit channel gain signature
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    theta = np.pi * c / num_classes
    freq = 2.0 + 1.5 * c
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
    gains = 0.4 + 0.6 * np.array([(c >> b) & 1 for b in range(3)], dtype=np.float64)
    return (0.5 + 0.25 * wave)[None, :, :] * gains[:, None, None]


def synthesize_dataset(num_classes: int, samples_per_class: int, image_size: int,
                       seed: int, test_per_class: int | None = None) -> DatasetHandle:
    """Procedural class-conditional images for fast, deterministic runs.

    Each class gets a distinct grating orientation/frequency and channel
    gains; per-sample amplitude and Gaussian pixel noise provide variation
    while keeping classes separable (a linear probe separates any two).
    """
    if samples_per_class < 2:
        raise InputError("samples_per_class must be >= 2")
    if num_classes < 2:
        raise InputError("need at least 2 classes")
    if test_per_class is None:
        test_per_class = max(1, samples_per_class // 5)

    def generate(n_per_class, rng_seed, index_base):
        rng = np.random.default_rng(rng_seed)
        images, labels = [], []
        for c in range(num_classes):
            pat = _class_pattern(c, num_classes, image_size)
            amp = rng.uniform(0.7, 1.0, size=(n_per_class, 1, 1, 1))
            noise = rng.normal(0.0, 0.06, size=(n_per_class, 3, image_size, image_size))
            images.append(np.clip(pat[None] * amp + noise, 0.0, 1.0).astype(np.float32))
            labels.append(np.full(n_per_class, c, dtype=np.int64))
        x = np.concatenate(images)
        y = np.concatenate(labels)
        order = rng.permutation(len(y))
        idx = index_base + np.arange(len(y), dtype=np.int64)
        return ImageBatch(x[order], y[order], idx)

    n_train = num_classes * samples_per_class
    train = generate(samples_per_class, seed, 0)
    test = generate(test_per_class, seed + 1, n_train)
    checksum = hashlib.sha256(train.pixels.tobytes() + test.pixels.tobytes()).hexdigest()
    return DatasetHandle(
        name="synthetic",
        num_classes=num_classes,
        class_names=[f"class{c}" for c in range(num_classes)],
        # identity: the generator already centers its patterns, and the small
        # CNN's schedule is tuned for raw [0,1] inputs
        normalization=((0.0,) * 3, (1.0,) * 3),
        provenance={"source": f"synthetic(seed={seed})", "checksum": checksum},
        loaders={"train": lambda: train, "test": lambda: test},
    )


def _read_cifar_records(paths: list[Path], index_base: int) -> ImageBatch:
    pixels, labels = [], []
    for p in paths:
        raw = np.frombuffer(p.read_bytes(), dtype=np.uint8)
        recs = raw.reshape(-1, _CIFAR_RECORD)
        labels.append(recs[:, 0].astype(np.int64))
        pixels.append(recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    x = np.concatenate(pixels)
    y = np.concatenate(labels)
    idx = index_base + np.arange(len(y), dtype=np.int64)
    return ImageBatch(x, y, idx)


def _load_cifar10(root: Path) -> DatasetHandle:
    """Binary-batch layout: data_batch_*.bin + test_batch.bin, 3073-byte records.

    The published layout holds 50000 train / 10000 test records over 10
    classes; counts here are derived from the actual file sizes, so subsets
    in the same framing load too.
    """
    for cand in (root, root / "cifar-10-batches-bin"):
        train_files = sorted(cand.glob("data_batch_*.bin"))
        test_file = cand / "test_batch.bin"
        if train_files and test_file.exists():
            break
    else:
        raise IngestionError(f"no CIFAR-10 binary batches under {root}")

    n_train = 0
    h = hashlib.sha256()
    for p in list(train_files) + [test_file]:
        size = p.stat().st_size
        if size == 0 or size % _CIFAR_RECORD != 0:
            raise IngestionError(f"corrupt record framing in {p} (size {size})")
        h.update(p.read_bytes())
        if p != test_file:
            n_train += size // _CIFAR_RECORD

    return DatasetHandle(
        name="cifar10",
        num_classes=10,
        class_names=list(_CIFAR_CLASSES),
        normalization=(CIFAR10_MEAN, CIFAR10_STD),
        provenance={"source": str(root), "checksum": h.hexdigest()},
        loaders={
            "train": lambda: _read_cifar_records(train_files, 0),
            "test": lambda: _read_cifar_records([test_file], n_train),
        },
    )


def _read_image_folder(split_dir: Path, class_names: list[str], index_base: int) -> ImageBatch:
    from PIL import Image

    pixels, labels = [], []
    shape = None
    for ci, cname in enumerate(class_names):
        for p in sorted((split_dir / cname).glob("*.png")):
            arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
            arr = arr.transpose(2, 0, 1)
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise IngestionError(f"inconsistent image size at {p}: {arr.shape} vs {shape}")
            pixels.append(arr)
            labels.append(ci)
    if not pixels:
        raise IngestionError(f"no PNG files under {split_dir}")
    x = np.stack(pixels)
    y = np.asarray(labels, dtype=np.int64)
    idx = index_base + np.arange(len(y), dtype=np.int64)
    return ImageBatch(x, y, idx)


def _load_image_folder(root: Path) -> DatasetHandle:
    """Class-per-directory PNG layout: root/{train,test}/<class_name>/*.png."""
    train_dir, test_dir = root / "train", root / "test"
    if not train_dir.is_dir() or not test_dir.is_dir():
        raise IngestionError(f"expected train/ and test/ under {root}")
    class_names = sorted(d.name for d in train_dir.iterdir() if d.is_dir())
    if not class_names:
        raise IngestionError(f"no class directories under {train_dir}")

    h = hashlib.sha256()
    n_train = 0
    for split_dir in (train_dir, test_dir):
        for p in sorted(split_dir.rglob("*.png")):
            h.update(p.read_bytes())
            if split_dir is train_dir:
                n_train += 1
    if n_train == 0:
        raise IngestionError(f"no PNG files under {train_dir}")

    return DatasetHandle(
        name=f"imagefolder:{root.name}",
        num_classes=len(class_names),
        class_names=class_names,
        normalization=(DEFAULT_MEAN, DEFAULT_STD),
        provenance={"source": str(root), "checksum": h.hexdigest()},
        loaders={
            "train": lambda: _read_image_folder(train_dir, class_names, 0),
            "test": lambda: _read_image_folder(test_dir, class_names, n_train),
        },
    )


def load_dataset(name: str, root_path) -> DatasetHandle:
    """Load a dataset from its documented on-disk layout.

    name is "cifar10" (binary batches) or "imagefolder" (class directories
    of PNGs under train/ and test/).
    """
    root = Path(root_path)
    if not root.exists():
        raise IngestionError(f"dataset root does not exist: {root}")
    if name == "cifar10":
        return _load_cifar10(root)
    if name == "imagefolder":
        return _load_image_folder(root)
    raise InputError(f"unknown dataset name {name!r}")
