"""Face-box handling and the train/eval crop and augmentation pipeline.

Images are float arrays of shape (H, W, 3) with intensities in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv


class CropError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise CropError(f"box sides must be positive, got w={self.w}, h={self.h}")

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2, self.y + self.h / 2

    @classmethod
    def from_edges(cls, left, top, right, bottom) -> "BoundingBox":
        return cls(left, top, right - left, bottom - top)

    def edges(self) -> tuple[float, float, float, float]:
        return self.x, self.y, self.x + self.w, self.y + self.h

    def scaled(self, factor: float) -> "BoundingBox":
        """Scale side lengths by `factor` about the center."""
        cx, cy = self.center
        w, h = self.w * factor, self.h * factor
        return BoundingBox(cx - w / 2, cy - h / 2, w, h)

    def clamped(self, width: float, height: float) -> "BoundingBox":
        left, top, right, bottom = self.edges()
        left, right = max(left, 0.0), min(right, float(width))
        top, bottom = max(top, 0.0), min(bottom, float(height))
        if right <= left or bottom <= top:
            raise CropError(f"{self} does not intersect a {width}x{height} image")
        return BoundingBox.from_edges(left, top, right, bottom)

    def to_list(self) -> list[float]:
        return [float(self.x), float(self.y), float(self.w), float(self.h)]


class FaceDetector(Protocol):
    """Plug-in point for a real face detector: one image in, one face box out."""

    def detect(self, image: np.ndarray) -> BoundingBox: ...


class FullImageDetector:
    """Returns the whole frame; the no-box setting."""

    def detect(self, image: np.ndarray) -> BoundingBox:
        h, w = image.shape[:2]
        return BoundingBox(0.0, 0.0, float(w), float(h))


@dataclass(frozen=True)
class CropConfig:
    m_b: float = 0.5
    jitter_frac: float = 0.05
    rrc_scale: tuple[float, float] = (0.6, 1.0)
    rrc_aspect: tuple[float, float] = (3 / 4, 4 / 3)
    out_size: int = 64
    brightness: float = 0.1
    contrast: float = 0.1
    saturation: float = 0.1
    hue: float = 0.01
    hflip_prob: float = 0.5
    use_boxes: bool = True

    def __post_init__(self):
        for name in ("rrc_scale", "rrc_aspect"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise CropError(f"{name} must be a non-empty positive range, got {(lo, hi)}")
        if self.rrc_scale[1] > 1:
            raise CropError("rrc_scale is an area fraction and cannot exceed 1")
        if self.m_b < 0 or self.jitter_frac < 0:
            raise CropError("m_b and jitter_frac must be non-negative")
        if min(self.brightness, self.contrast, self.saturation, self.hue) < 0:
            raise CropError("photometric magnitudes must be non-negative")
        if not 0 <= self.hflip_prob <= 1:
            raise CropError("hflip_prob must lie in [0, 1]")
        if self.out_size < 8:
            raise CropError("out_size must be at least 8 pixels")


def expand_box(box: BoundingBox, m_b: float, image_size) -> BoundingBox:
    """Extend every side by m_b times its length (0.5 doubles the box), then clamp."""
    width, height = image_size
    grown = BoundingBox(
        box.x - m_b * box.w, box.y - m_b * box.h, box.w * (1 + 2 * m_b), box.h * (1 + 2 * m_b)
    )
    return grown.clamped(width, height)


def jitter_box(box: BoundingBox, jitter_frac: float, rng: np.random.Generator) -> BoundingBox:
    """Shift each border independently by up to jitter_frac of the matching side."""
    if jitter_frac < 0:
        raise CropError("jitter_frac must be non-negative")
    if jitter_frac == 0:
        return box
    dl, dr, dt, db = rng.uniform(-jitter_frac, jitter_frac, size=4)
    left, top, right, bottom = box.edges()
    return BoundingBox.from_edges(
        left + dl * box.w, top + dt * box.h, right + dr * box.w, bottom + db * box.h
    )


def crop_resize(image: np.ndarray, box: BoundingBox, out_size: int) -> np.ndarray:
    """Bilinear resample of a (sub-pixel) box region onto an out_size x out_size grid.

    Sample points sit at output pixel centers mapped into the box, so an
    integer box with side equal to out_size reproduces its pixels exactly.
    Neighbors outside the image are clamped to the border.
    """
    h, w = image.shape[:2]
    xs = box.x + (np.arange(out_size) + 0.5) * (box.w / out_size) - 0.5
    ys = box.y + (np.arange(out_size) + 0.5) * (box.h / out_size) - 0.5
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = (xs - x0)[None, :, None]
    fy = (ys - y0)[:, None, None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = np.clip(x0 + 1, 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x0 = np.clip(x0, 0, w - 1)
    y0 = np.clip(y0, 0, h - 1)
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bottom = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return out.astype(image.dtype, copy=False)


def random_resized_region(region: BoundingBox, scale, aspect, rng, attempts: int = 10):
    """Inception-style random sub-box of `region`; falls back to the whole region."""
    area = region.w * region.h
    log_lo, log_hi = math.log(aspect[0]), math.log(aspect[1])
    for _ in range(attempts):
        target = area * rng.uniform(scale[0], scale[1])
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = math.sqrt(target * ratio)
        h = math.sqrt(target / ratio)
        if w <= region.w and h <= region.h:
            x = region.x + rng.uniform(0, region.w - w)
            y = region.y + rng.uniform(0, region.h - h)
            return BoundingBox(x, y, w, h)
    return region


def train_crop(image: np.ndarray, box: BoundingBox, cfg: CropConfig, rng) -> np.ndarray:
    height, width = image.shape[:2]
    if not cfg.use_boxes:
        box = FullImageDetector().detect(image)
    region = expand_box(box, cfg.m_b, (width, height))
    region = jitter_box(region, cfg.jitter_frac, rng).clamped(width, height)
    sub = random_resized_region(region, cfg.rrc_scale, cfg.rrc_aspect, rng)
    return crop_resize(image, sub, cfg.out_size)


def eval_crop(image: np.ndarray, box: BoundingBox, m_c: float, out_size: int = 64) -> np.ndarray:
    """Deterministic crop of the box scaled by m_c about its center (clamped)."""
    if m_c <= 0:
        raise CropError("m_c must be positive")
    height, width = image.shape[:2]
    return crop_resize(image, box.scaled(m_c).clamped(width, height), out_size)


def photometric_augment(image: np.ndarray, cfg: CropConfig, rng) -> np.ndarray:
    """Random brightness, contrast, saturation and hue changes; zero magnitudes are skipped."""
    out = image
    if cfg.brightness > 0:
        out = out * rng.uniform(max(0.0, 1 - cfg.brightness), 1 + cfg.brightness)
    if cfg.contrast > 0:
        factor = rng.uniform(max(0.0, 1 - cfg.contrast), 1 + cfg.contrast)
        gray = (out @ np.array([0.299, 0.587, 0.114], dtype=out.dtype)).mean()
        out = (out - gray) * factor + gray
    if cfg.saturation > 0 or cfg.hue > 0:
        hsv = rgb_to_hsv(np.clip(out, 0.0, 1.0))
        if cfg.saturation > 0:
            sat = rng.uniform(max(0.0, 1 - cfg.saturation), 1 + cfg.saturation)
            hsv[..., 1] = np.clip(hsv[..., 1] * sat, 0.0, 1.0)
        if cfg.hue > 0:
            hsv[..., 0] = (hsv[..., 0] + rng.uniform(-cfg.hue, cfg.hue)) % 1.0
        out = hsv_to_rgb(hsv)
    if out is image:
        return image
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


def flip_horizontal(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1]


def hflip(image: np.ndarray, prob: float, rng) -> np.ndarray:
    if rng.uniform() < prob:
        return flip_horizontal(image)
    return image


def augment_train(image: np.ndarray, box: BoundingBox, cfg: CropConfig, rng) -> np.ndarray:
    """Full training-time pipeline: expand, jitter, random crop, color jitter, flip."""
    out = train_crop(image, box, cfg, rng)
    out = photometric_augment(out, cfg, rng)
    return np.ascontiguousarray(hflip(out, cfg.hflip_prob, rng))
