"""Dataset ingestion: CIFAR-10 binary batches, class-folder image trees, synthetic scenes.

Images are kept as uint8 [N, 3, H, W] and scaled to [0, 1] only when a batch is
requested, so a 50k-image set costs 150 MB rather than 1.2 GB.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError

CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE  # label byte + R, G, B planes
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
FORMATS = ("cifar10-binary", "image-directory", "synthetic")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".gif", ".tif", ".tiff"}


@dataclass
class Dataset:
    pixels: np.ndarray  # uint8 [N, 3, H, W]
    labels: np.ndarray | None  # int64 [N]
    ids: np.ndarray  # int64 [N]
    is_test: np.ndarray | None = None  # bool [N] when the source ships its own split
    classes: tuple = ()
    name: str = ""

    def __len__(self):
        return self.pixels.shape[0]

    @property
    def size(self) -> int:
        return self.pixels.shape[2]

    def images(self, index=slice(None), dtype=np.float64) -> np.ndarray:
        return self.pixels[index].astype(dtype) / 255.0

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        pick = lambda a: None if a is None else a[index]  # noqa: E731
        return Dataset(self.pixels[index], pick(self.labels), self.ids[index], pick(self.is_test), self.classes,
                       self.name)

    def position(self, image_id: int) -> int:
        hit = np.flatnonzero(self.ids == image_id)
        if hit.size == 0:
            raise KeyError(f"unknown image id {image_id}")
        return int(hit[0])


# -- cifar10-binary --------------------------------------------------------

def read_cifar10_file(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IngestionError(f"{path}: unreadable ({exc.strerror}) at byte offset 0") from exc
    n, rem = divmod(len(raw), CIFAR_RECORD)
    if rem:
        raise IngestionError(f"{path}: truncated record at byte offset {n * CIFAR_RECORD} "
                             f"({rem} of {CIFAR_RECORD} bytes present)")
    if n == 0:
        raise IngestionError(f"{path}: empty file at byte offset 0")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise IngestionError(f"{path}: label {labels[bad[0]]} out of range at byte offset {bad[0] * CIFAR_RECORD}")
    pixels = rec[:, 1:].reshape(n, 3, CIFAR_SIDE, CIFAR_SIDE).copy()
    return pixels, labels


def write_cifar10_binary(path, pixels: np.ndarray, labels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.shape[1:] != (3, CIFAR_SIDE, CIFAR_SIDE):
        raise ConfigError(f"cifar10-binary needs uint8 [N,3,32,32] pixels, got {pixels.dtype} {pixels.shape}")
    labels = np.asarray(labels)
    if labels.shape != (pixels.shape[0],) or labels.min() < 0 or labels.max() > 9:
        raise ConfigError("cifar10-binary needs one label in 0..9 per image")
    rec = np.empty((pixels.shape[0], CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = pixels.reshape(pixels.shape[0], -1)
    Path(path).write_bytes(rec.tobytes())


def _load_cifar(path: Path) -> Dataset:
    if path.is_file():
        pixels, labels = read_cifar10_file(path)
        return Dataset(pixels, labels, np.arange(len(labels)), name=path.name)
    train = [path / f for f in CIFAR_TRAIN_FILES if (path / f).exists()]
    if not train:
        raise IngestionError(f"{path}: no cifar10 batch files found at byte offset 0")
    parts = [read_cifar10_file(p) for p in train]
    test = path / CIFAR_TEST_FILE
    if test.exists():
        parts.append(read_cifar10_file(test))
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([lab for _, lab in parts])
    is_test = np.zeros(len(labels), dtype=bool)
    if test.exists():
        is_test[-len(parts[-1][1]):] = True
    return Dataset(pixels, labels, np.arange(len(labels)), is_test if test.exists() else None, name=path.name)


# -- image-directory -------------------------------------------------------

def _read_class_tree(root: Path):
    from PIL import Image

    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not classes:
        raise IngestionError(f"{root}: no class sub-folders at byte offset 0")
    pixels, labels = [], []
    for c, name in enumerate(classes):
        for f in sorted((root / name).iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(f) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            except OSError as exc:
                raise IngestionError(f"{f}: unreadable image at byte offset 0 ({exc})") from exc
            if pixels and arr.shape != pixels[0].shape:
                raise IngestionError(f"{f}: size {arr.shape[:2]} differs from {pixels[0].shape[:2]} at byte offset 0")
            if arr.shape[0] != arr.shape[1]:
                raise IngestionError(f"{f}: image is not square at byte offset 0")
            pixels.append(arr)
            labels.append(c)
    if not pixels:
        raise IngestionError(f"{root}: no images found at byte offset 0")
    return np.stack(pixels).transpose(0, 3, 1, 2).copy(), np.array(labels, dtype=np.int64), tuple(classes)


def _load_image_directory(path: Path) -> Dataset:
    if not path.is_dir():
        raise IngestionError(f"{path}: not a directory at byte offset 0")
    if (path / "train").is_dir() and (path / "test").is_dir():
        ptr, ltr, classes = _read_class_tree(path / "train")
        pte, lte, classes_te = _read_class_tree(path / "test")
        if classes_te != classes:
            raise IngestionError(f"{path}: train/test class folders differ at byte offset 0")
        pixels, labels = np.concatenate([ptr, pte]), np.concatenate([ltr, lte])
        is_test = np.r_[np.zeros(len(ltr), bool), np.ones(len(lte), bool)]
        return Dataset(pixels, labels, np.arange(len(labels)), is_test, classes, path.name)
    pixels, labels, classes = _read_class_tree(path)
    return Dataset(pixels, labels, np.arange(len(labels)), None, classes, path.name)


def write_image_directory(path, pixels: np.ndarray, labels: np.ndarray, classes=None) -> None:
    from PIL import Image

    path = Path(path)
    for i, (img, lab) in enumerate(zip(pixels, labels)):
        folder = path / (classes[lab] if classes else f"class{lab:02d}")
        folder.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.ascontiguousarray(img.transpose(1, 2, 0))).save(folder / f"{i:06d}.png")


# -- synthetic scenes ------------------------------------------------------

SYNTHETIC_CLASSES = ("square", "disk", "bars", "ring")


def _shape_mask(kind: str, size: int, cy, cx, r, rng) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "bars":
        period = max(3, int(r // 2))
        band = ((xx if rng.random() < 0.5 else yy) // period) % 2 == 0
        return band & (np.abs(dy) <= r * 1.2) & (np.abs(dx) <= r * 1.2)
    d2 = dy * dy + dx * dx
    return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)


def synthetic_scenes(n: int = 512, size: int = 32, seed: int = 0, noise: float = 0.05) -> Dataset:
    """Seeded procedural scenes: one of four object shapes on a two-tone background.

    The label is the shape class; colors, position, scale and the background split
    are nuisance variables, so a useful encoder has to pick up shape.
    """
    rng = np.random.default_rng(seed)
    pixels = np.empty((n, 3, size, size), dtype=np.uint8)
    labels = rng.integers(0, len(SYNTHETIC_CLASSES), size=n)
    for i in range(n):
        bg = rng.uniform(0.0, 1.0, size=(2, 3))
        img = np.empty((3, size, size))
        split = rng.integers(size // 4, 3 * size // 4)
        if rng.random() < 0.5:
            img[:, :, :split], img[:, :, split:] = bg[0][:, None, None], bg[1][:, None, None]
        else:
            img[:, :split, :], img[:, split:, :] = bg[0][:, None, None], bg[1][:, None, None]
        r = rng.uniform(0.18, 0.32) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        mask = _shape_mask(SYNTHETIC_CLASSES[labels[i]], size, cy, cx, r, rng)
        img[:, mask] = rng.uniform(0.0, 1.0, size=3)[:, None]
        img += noise * rng.standard_normal(img.shape)
        pixels[i] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return Dataset(pixels, labels.astype(np.int64), np.arange(n), None, SYNTHETIC_CLASSES, f"synthetic-{seed}")


def half_field_scene(size: int = 32, colors=((0.9, 0.1, 0.1), (0.1, 0.2, 0.9)), vertical: bool = True) -> np.ndarray:
    """A single two-color image split down the middle, as float [3, size, size]."""
    img = np.empty((3, size, size))
    a, b = (np.asarray(c, dtype=np.float64)[:, None, None] for c in colors)
    if vertical:
        img[:, :, : size // 2], img[:, :, size // 2:] = a, b
    else:
        img[:, : size // 2, :], img[:, size // 2:, :] = a, b
    return img


def half_field_dataset(n: int = 512, size: int = 32, seed: int = 0, noise: float = 0.03) -> Dataset:
    """Half-field scenes with random color pairs and random split orientation (label 1 = vertical split)."""
    rng = np.random.default_rng(seed)
    pixels = np.empty((n, 3, size, size), dtype=np.uint8)
    labels = rng.integers(0, 2, size=n)
    for i in range(n):
        img = half_field_scene(size, rng.uniform(size=(2, 3)), vertical=bool(labels[i]))
        img += noise * rng.standard_normal(img.shape)
        pixels[i] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return Dataset(pixels, labels.astype(np.int64), np.arange(n), None, ("horizontal", "vertical"), f"halves-{seed}")

# -- front door ------------------------------------------------------------

def load_dataset(path, fmt: str, limit: int | None = None, seed: int = 0, synthetic_n: int = 512,
                 size: int = 32) -> Dataset:
    """Load ``path`` in format ``fmt``; ``limit`` keeps a seeded subset of the training images."""
    if fmt not in FORMATS:
        raise IngestionError(f"{path}: unknown dataset format {fmt!r} (choose from {', '.join(FORMATS)})")
    if fmt == "synthetic":
        ds = synthetic_scenes(synthetic_n, size=size, seed=seed)
    else:
        path = Path(os.path.expanduser(str(path)))
        if not path.exists():
            raise IngestionError(f"{path}: no such file or directory at byte offset 0")
        ds = _load_cifar(path) if fmt == "cifar10-binary" else _load_image_directory(path)
    if limit is not None and limit < len(ds):
        train = np.flatnonzero(~ds.is_test) if ds.is_test is not None else np.arange(len(ds))
        keep = np.sort(np.random.default_rng([seed, 0x5EB]).choice(train, size=min(limit, len(train)),
                                                                   replace=False))
        if ds.is_test is not None:
            keep = np.r_[keep, np.flatnonzero(ds.is_test)]
        ds = ds.subset(keep)
    return ds
