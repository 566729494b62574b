"""Datasets: oriented-grating generator, CIFAR-10 binary reader, and a prefetching batch feeder."""

import logging
import queue
import threading
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import SynthConfig
from .errors import ConfigError, DataError, FormatError, ShapeError

logger = logging.getLogger(__name__)

CIFAR_SIDE = 32
CIFAR_CLASSES = 10
IMAGE_BYTES = 3 * CIFAR_SIDE * CIFAR_SIDE
RECORD_BYTES = 1 + IMAGE_BYTES
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)

GRATING_MEAN = 0.5
GRATING_AMPLITUDE = 0.4

# producer blocks at most this long per put before re-checking for cancellation
PUT_TIMEOUT_S = 0.1


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [n, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [n] int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"{self.images.shape[0]} images do not pair with {self.labels.shape[0]} labels", module="data"
            )
        bad = np.flatnonzero((self.labels < 0) | (self.labels >= self.num_classes))
        if bad.size:
            raise DataError(
                f"label {int(self.labels[bad[0]])} at index {int(bad[0])} outside 0..{self.num_classes - 1}",
                module="data",
            )

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.num_classes, self.split)


# --- synthetic gratings ---


def grating_wave_vector(c: int, num_classes: int) -> tuple[int, int]:
    """Integer wave vector of class ``c``: orientation pi*c/K, frequency c+1 cycles per image."""
    angle = np.pi * c / num_classes
    return int(np.rint((c + 1) * np.cos(angle))), int(np.rint((c + 1) * np.sin(angle)))


def synth_dataset(
    seed: int,
    n_per_class: int,
    num_classes: int = CIFAR_CLASSES,
    resolution: int = CIFAR_SIDE,
    *,
    noise: float = 0.1,
    split: str = "train",
) -> Dataset:
    """Class ``c`` is a zero-phase grating along its wave vector, identical on all channels, plus N(0, noise).

    Integer wave vectors make every clean image average exactly to the grating
    mean, so pooled colour statistics carry no label signal.
    """
    if num_classes < 2:
        raise DataError(f"need at least two classes, got {num_classes}", module="data")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(resolution), np.arange(resolution), indexing="ij")
    images = np.empty((num_classes * n_per_class, 3, resolution, resolution), dtype=np.float32)
    for c in range(num_classes):
        kx, ky = grating_wave_vector(c, num_classes)
        clean = GRATING_MEAN + GRATING_AMPLITUDE * np.cos(2 * np.pi * (kx * xx + ky * yy) / resolution)
        block = np.broadcast_to(clean, (n_per_class, 3, resolution, resolution))
        if noise > 0:
            block = block + rng.normal(0.0, noise, size=block.shape)
        images[c * n_per_class : (c + 1) * n_per_class] = np.clip(block, 0.0, 1.0)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), n_per_class)
    logger.debug("synthesised %d %s images (seed %d)", labels.size, split, seed)
    return Dataset(images, labels, num_classes, split)


# --- CIFAR-10 binary ---


def read_cifar10_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR-10 binary batch: records of 1 label byte + 3072 channel-planar pixel bytes."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % RECORD_BYTES:
        whole = len(raw) // RECORD_BYTES
        raise FormatError(
            f"{path}: {len(raw)} bytes is not a whole number of {RECORD_BYTES}-byte records "
            f"(expected {whole * RECORD_BYTES} or {(whole + 1) * RECORD_BYTES})",
            module="data",
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        raise DataError(f"{path}: label byte {int(labels[bad[0]])} in record {int(bad[0])}", module="data")
    pixels = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float32) / 255.0
    return pixels, labels


def load_cifar10_binary(directory: Path, split: str = "train") -> Dataset:
    directory = Path(directory)
    if directory.is_file():
        names, directory = (directory.name,), directory.parent
    elif split == "train":
        names = CIFAR_TRAIN_FILES
    elif split in ("test", "val"):
        names = CIFAR_TEST_FILES
    else:
        raise DataError(f"unknown CIFAR-10 split {split!r}", module="data")
    missing = [n for n in names if not (directory / n).is_file()]
    if missing:
        raise DataError(f"{directory}: missing CIFAR-10 files {missing}", module="data")
    parts = [read_cifar10_file(directory / n) for n in names]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    logger.info("loaded %d CIFAR-10 %s images from %s", labels.size, split, directory)
    return Dataset(images, labels, CIFAR_CLASSES, split)


# --- batching ---


def hflip(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(images[..., ::-1])


@dataclass(frozen=True)
class BatchPlan:
    index: np.ndarray
    flip: np.ndarray | None = None


def epoch_plan(n: int, batch_size: int, rng: np.random.Generator, *, shuffle: bool = True,
               flip: bool = False) -> list[BatchPlan]:
    """Draw one epoch's order (and flip masks) up front so only the consumer thread touches ``rng``."""
    order = rng.permutation(n) if shuffle else np.arange(n)
    plans = []
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        plans.append(BatchPlan(idx, rng.random(idx.size) < 0.5 if flip else None))
    return plans


def gather(dataset: Dataset, plan: BatchPlan) -> tuple[np.ndarray, np.ndarray]:
    images = dataset.images[plan.index]
    if plan.flip is not None and plan.flip.any():
        images[plan.flip] = hflip(images[plan.flip])
    return images, dataset.labels[plan.index]


_DONE = object()


class Prefetcher:
    """Assemble batches on a producer thread, feeding a bounded queue.

    Iterate it once; errors raised while gathering are re-raised on the
    consumer side. ``close`` stops the producer early.
    """

    def __init__(self, dataset: Dataset, plans: list[BatchPlan], depth: int = 4):
        self._dataset = dataset
        self._plans = plans
        self._queue: queue.Queue = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._produce, name="vik-prefetch", daemon=True)
        self._thread.start()

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=PUT_TIMEOUT_S)
                return True
            except queue.Full:
                continue
        return False

    def _produce(self):
        try:
            for plan in self._plans:
                if not self._put(gather(self._dataset, plan)):
                    return
        except Exception as exc:
            logger.exception("prefetch producer failed")
            self._put(exc)
            return
        self._put(_DONE)

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        try:
            while True:
                item = self._queue.get()
                if item is _DONE:
                    return
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            self.close()

    def close(self):
        self._stop.set()
        self._thread.join(timeout=5)


def load_datasets(spec: str, seed: int, synth: SynthConfig, image_size: tuple[int, int],
                  num_classes: int) -> tuple[Dataset, Dataset | None]:
    """Resolve a ``synth`` or ``cifar10:DIR`` data spec into (train, validation) splits."""
    if spec == "synth":
        h, w = image_size
        if h != w:
            raise DataError(f"synthetic gratings are square, config asks for {h}x{w}", module="data")
        train = synth_dataset(seed, synth.n_per_class, num_classes, h, noise=synth.noise, split="train")
        val = None
        if synth.val_per_class > 0:
            val = synth_dataset(seed + 1, synth.val_per_class, num_classes, h, noise=synth.noise, split="val")
        return train, val
    if spec.startswith("cifar10:"):
        directory = Path(spec.split(":", 1)[1])
        if num_classes != CIFAR_CLASSES or tuple(image_size) != (CIFAR_SIDE, CIFAR_SIDE):
            raise ShapeError(
                f"CIFAR-10 is {CIFAR_CLASSES} classes of {CIFAR_SIDE}x{CIFAR_SIDE}; "
                f"config has {num_classes} classes at {image_size[0]}x{image_size[1]}",
                module="data",
            )
        return load_cifar10_binary(directory, "train"), load_cifar10_binary(directory, "test")
    raise ConfigError(f"unknown data spec {spec!r}; use 'synth' or 'cifar10:DIR'", module="data")
