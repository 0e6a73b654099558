"""Two-view image augmentation: flip, random resized crop, color jitter, grayscale.

Randomness is counter-based: every (seed, epoch, image id, op index) tuple owns its
own generator, so the augmentation an image receives does not depend on which
batch it lands in or in what order batches are processed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

# op index 0 keys the flip; view v uses 1 + 3v (crop), 2 + 3v (jitter), 3 + 3v (grayscale)
OP_FLIP = 0
OPS_PER_VIEW = 3


@dataclass
class ImageBatch:
    data: np.ndarray  # [B, 3, H, W], values in [0, 1]
    ids: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.data.ndim != 4 or self.data.shape[1] != 3:
            raise ValueError(f"expected [B,3,H,W] images, got {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[2] != self.data.shape[3]:
            raise ValueError("image batch must be non-empty and square")
        if len(self.ids) != self.data.shape[0]:
            raise ValueError("one id per image required")

    def __len__(self):
        return self.data.shape[0]


@dataclass
class AugmentPolicy:
    crop_scale: tuple = (0.3, 1.0)
    aspect: tuple = (3 / 4, 4 / 3)
    output_size: int = 32
    jitter: tuple = (0.4, 0.4, 0.4)  # brightness, contrast, saturation
    grayscale_prob: float = 0.25
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.crop_scale = tuple(float(v) for v in self.crop_scale)
        self.aspect = tuple(float(v) for v in self.aspect)
        self.jitter = tuple(float(v) for v in self.jitter)
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if not 0 < self.aspect[0] <= self.aspect[1]:
            raise ValueError(f"bad aspect range {self.aspect}")
        if self.output_size < 4:
            raise ValueError("output size must be at least 4")
        if len(self.jitter) != 3 or min(self.jitter) < 0:
            raise ValueError("jitter strengths must be three non-negative numbers")
        for p in (self.grayscale_prob, self.flip_prob):
            if not 0 <= p <= 1:
                raise ValueError(f"probability {p} outside [0, 1]")

    @classmethod
    def degenerate(cls, output_size: int = 32, seed: int = 0) -> "AugmentPolicy":
        return cls(crop_scale=(1.0, 1.0), aspect=(1.0, 1.0), output_size=output_size,
                   jitter=(0.0, 0.0, 0.0), grayscale_prob=0.0, flip_prob=0.0, seed=seed)


def image_rngs(seed: int, epoch: int, ids: Sequence[int], op: int) -> list[np.random.Generator]:
    return [np.random.default_rng([seed, epoch, int(i), op]) for i in ids]


def _per_image(rng, n):
    if isinstance(rng, np.random.Generator):
        return [rng] * n
    rng = list(rng)
    if len(rng) != n:
        raise ValueError("need one generator per image")
    return rng


def luminance(img: np.ndarray) -> np.ndarray:
    """0.299 R + 0.587 G + 0.114 B, written so that R == G == B returns G exactly."""
    r, g, b = img[..., 0, :, :], img[..., 1, :, :], img[..., 2, :, :]
    return g + 0.299 * (r - g) + 0.114 * (b - g)


def resize_bilinear(img: np.ndarray, box: tuple, size: int) -> np.ndarray:
    """Resample the box (top, left, h, w) of a [C,H,W] image to [C,size,size] (half-pixel centers)."""
    top, left, h, w = box
    ys = np.clip(top + (np.arange(size) + 0.5) * (h / size) - 0.5, top, top + h - 1)
    xs = np.clip(left + (np.arange(size) + 0.5) * (w / size) - 0.5, left, left + w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, top + h - 1)
    x1 = np.minimum(x0 + 1, left + w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    a = img[:, y0][:, :, x0]
    b = img[:, y0][:, :, x1]
    c = img[:, y1][:, :, x0]
    d = img[:, y1][:, :, x1]
    top_row = a + wx * (b - a)
    bot_row = c + wx * (d - c)
    return np.clip(top_row + wy * (bot_row - top_row), 0.0, 1.0)


def sample_crop_box(rng: np.random.Generator, height: int, width: int, policy: AugmentPolicy) -> tuple:
    area = height * width
    lo, hi = policy.crop_scale
    for _ in range(10):
        target = rng.uniform(lo, hi) * area
        ratio = rng.uniform(*policy.aspect)
        w = int(round(np.sqrt(target * ratio)))
        h = int(round(np.sqrt(target / ratio)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    side = min(height, width)
    return (height - side) // 2, (width - side) // 2, side, side


def random_resized_crop(img: ImageBatch, policy: AugmentPolicy, rng) -> ImageBatch:
    rngs = _per_image(rng, len(img))
    H, W = img.data.shape[2:]
    out = np.empty((len(img), 3, policy.output_size, policy.output_size), dtype=img.data.dtype)
    for n, r in enumerate(rngs):
        out[n] = resize_bilinear(img.data[n], sample_crop_box(r, H, W, policy), policy.output_size)
    return ImageBatch(out, img.ids.copy())


def color_jitter(img: ImageBatch, policy: AugmentPolicy, rng) -> ImageBatch:
    """Brightness, then contrast, then saturation; each factor uniform in [1-s, 1+s]."""
    rngs = _per_image(rng, len(img))
    sb, sc, ss = policy.jitter
    out = img.data.copy()
    for n, r in enumerate(rngs):
        fb, fc, fs = (r.uniform(1 - s, 1 + s) for s in (sb, sc, ss))
        x = out[n]
        if sb > 0:
            x = np.clip(x * fb, 0.0, 1.0)
        if sc > 0:
            m = luminance(x).mean()
            x = np.clip((x - m) * fc + m, 0.0, 1.0)
        if ss > 0:
            gray = luminance(x)[None]
            x = np.clip((x - gray) * fs + gray, 0.0, 1.0)
        out[n] = x
    return ImageBatch(out, img.ids.copy())


def to_grayscale(img: ImageBatch, policy: AugmentPolicy, rng) -> ImageBatch:
    rngs = _per_image(rng, len(img))
    out = img.data.copy()
    for n, r in enumerate(rngs):
        if r.uniform() < policy.grayscale_prob:
            out[n] = np.clip(luminance(out[n]), 0.0, 1.0)[None]
    return ImageBatch(out, img.ids.copy())


def hflip(img: ImageBatch) -> ImageBatch:
    return ImageBatch(np.ascontiguousarray(img.data[..., ::-1]), img.ids.copy())


def augment_view(img: ImageBatch, policy: AugmentPolicy, epoch: int, view: int) -> ImageBatch:
    base = 1 + OPS_PER_VIEW * view
    x = random_resized_crop(img, policy, image_rngs(policy.seed, epoch, img.ids, base))
    x = color_jitter(x, policy, image_rngs(policy.seed, epoch, img.ids, base + 1))
    return to_grayscale(x, policy, image_rngs(policy.seed, epoch, img.ids, base + 2))


def make_views(img: ImageBatch, policy: AugmentPolicy, epoch: int = 0) -> tuple[ImageBatch, ImageBatch]:
    """Flip each source image once, then augment two views independently."""
    data = img.data.copy()
    for n, r in enumerate(image_rngs(policy.seed, epoch, img.ids, OP_FLIP)):
        if r.uniform() < policy.flip_prob:
            data[n] = data[n][..., ::-1].copy()
    flipped = ImageBatch(data, img.ids.copy())
    return augment_view(flipped, policy, epoch, 0), augment_view(flipped, policy, epoch, 1)


def resize_batch(img: ImageBatch, size: int) -> ImageBatch:
    """Deterministic full-frame resize (used for evaluation)."""
    H, W = img.data.shape[2:]
    if H == size:
        return ImageBatch(img.data.copy(), img.ids.copy())
    out = np.stack([resize_bilinear(x, (0, 0, H, W), size) for x in img.data])
    return ImageBatch(out, img.ids.copy())
