"""Trigger patterns, masks, and the pixel-blend planting operation.

A trigger is a pattern image T plus a binary spatial mask M. Planting at
opacity a replaces the masked region with the blend (1-a)*x + a*T, i.e.

    out = (1 - M) * x + M * ((1 - a) * x + a * T)

All images are float arrays of shape (H, W, C) with values in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from .errors import TriggerShapeError

_BUILTIN_SEEDS = {"blend": 7, "flame": 11}


@dataclass(frozen=True)
class TriggerSpec:
    """A named trigger pattern with its train/test planting opacities."""

    name: str
    pattern: np.ndarray  # (H, W, C) in [0, 1]
    mask: np.ndarray  # (H, W) in {0, 1}
    train_opacity: float
    test_opacity: float

    def __post_init__(self):
        pattern = np.asarray(self.pattern, dtype=np.float32)
        mask = np.asarray(self.mask, dtype=np.float32)
        if pattern.ndim != 3:
            raise TriggerShapeError(f"pattern must be (H, W, C), got {pattern.shape}")
        if mask.shape != pattern.shape[:2]:
            raise TriggerShapeError(
                f"mask shape {mask.shape} does not match pattern spatial shape {pattern.shape[:2]}"
            )
        if not np.isin(mask, (0.0, 1.0)).all():
            raise ValueError("mask entries must be 0 or 1")
        for label, value in (("train_opacity", self.train_opacity), ("test_opacity", self.test_opacity)):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{label} must be in [0, 1], got {value}")
        object.__setattr__(self, "pattern", pattern)
        object.__setattr__(self, "mask", mask)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.pattern.shape

    def with_opacities(self, train_opacity=None, test_opacity=None) -> "TriggerSpec":
        return replace(
            self,
            train_opacity=self.train_opacity if train_opacity is None else train_opacity,
            test_opacity=self.test_opacity if test_opacity is None else test_opacity,
        )


def apply_trigger(x: np.ndarray, spec: TriggerSpec, opacity: float) -> np.ndarray:
    """Plant ``spec`` into image(s) ``x`` at the given opacity, clipped to [0, 1].

    ``x`` is a single (H, W, C) image or a batch (..., H, W, C).
    """
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-3:] != spec.pattern.shape:
        raise TriggerShapeError(
            f"image shape {x.shape} does not match trigger shape {spec.pattern.shape}"
        )
    if not 0.0 <= opacity <= 1.0:
        raise ValueError(f"opacity must be in [0, 1], got {opacity}")
    m = spec.mask[..., None]
    blended = (1.0 - opacity) * x + opacity * spec.pattern
    out = (1.0 - m) * x + m * blended
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def derive_mask(pattern: np.ndarray, background: float = 0.0, tol: float = 1e-3) -> np.ndarray:
    """Mask = pixels of ``pattern`` that differ from a uniform background color."""
    diff = np.abs(np.asarray(pattern, dtype=np.float32) - background)
    return (diff.max(axis=-1) > tol).astype(np.float32)


def load_trigger_image(path, image_shape, name=None, train_opacity=1.0, test_opacity=None,
                       mask_path=None, background: float = 0.0) -> TriggerSpec:
    """Load a trigger pattern (and optional explicit mask) from image files.

    Without ``mask_path`` the mask is derived as "pixel differs from the pure
    background color". Pattern is resized to the dataset image shape.
    """
    h, w, c = image_shape
    img = Image.open(path).convert("RGB" if c == 3 else "L").resize((w, h), Image.BILINEAR)
    pattern = np.asarray(img, dtype=np.float32) / 255.0
    if pattern.ndim == 2:
        pattern = pattern[..., None]
    if mask_path is not None:
        mimg = Image.open(mask_path).convert("L").resize((w, h), Image.NEAREST)
        mask = (np.asarray(mimg, dtype=np.float32) / 255.0 > 0.5).astype(np.float32)
    else:
        mask = derive_mask(pattern, background=background)
    return TriggerSpec(
        name=name or str(path),
        pattern=pattern,
        mask=mask,
        train_opacity=train_opacity,
        test_opacity=train_opacity if test_opacity is None else test_opacity,
    )


def save_trigger_png(spec: TriggerSpec, path) -> None:
    arr = np.clip(spec.pattern * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr.squeeze()).save(path)


def _smooth_field(rng: np.random.Generator, h: int, w: int, c: int, cells: int) -> np.ndarray:
    # Coarse random grid upsampled bilinearly: a cheap, deterministic "texture".
    coarse = rng.random((cells, cells, c)).astype(np.float32)
    ys = np.linspace(0, cells - 1, h)
    xs = np.linspace(0, cells - 1, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, cells - 1)
    x1 = np.minimum(x0 + 1, cells - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = coarse[y0][:, x0] * (1 - fx) + coarse[y0][:, x1] * fx
    bot = coarse[y1][:, x0] * (1 - fx) + coarse[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def builtin_pattern(name: str, image_shape) -> tuple[np.ndarray, np.ndarray]:
    """Return (pattern, mask) for one of the built-in trigger patterns.

    Built-ins are generated procedurally (deterministic for a given image
    shape) so the toolkit works without shipping binary assets; arbitrary
    patterns can still be loaded from files via :func:`load_trigger_image`.
    """
    h, w, c = image_shape
    full = np.ones((h, w), dtype=np.float32)
    if name == "blend":
        rng = np.random.default_rng(_BUILTIN_SEEDS["blend"])
        return _smooth_field(rng, h, w, c, cells=5), full
    if name == "flame":
        rng = np.random.default_rng(_BUILTIN_SEEDS["flame"])
        base = _smooth_field(rng, h, w, c, cells=9)
        warm = np.stack([np.full((h, w), 0.9), np.linspace(0.1, 0.8, h)[:, None].repeat(w, 1),
                         np.full((h, w), 0.1)], axis=-1).astype(np.float32)
        return np.clip(0.5 * base + 0.5 * warm[..., :c], 0, 1), full
    if name == "rings":
        yy, xx = np.mgrid[0:h, 0:w]
        r = np.sqrt((yy - h / 2) ** 2 + (xx - w / 2) ** 2)
        ring = (0.5 + 0.5 * np.sin(r * 1.1)).astype(np.float32)
        pattern = np.stack([0.2 * ring, 0.4 + 0.5 * ring, 1.0 - 0.6 * ring], axis=-1)[..., :c]
        return np.clip(pattern, 0, 1).astype(np.float32), full
    if name == "badnet_patch":
        size, margin = min(3, h - 2, w - 2), 1
        pattern = np.zeros((h, w, c), dtype=np.float32)
        mask = np.zeros((h, w), dtype=np.float32)
        y0, x0 = h - margin - size, w - margin - size
        checker = np.indices((size, size)).sum(axis=0) % 2
        pattern[y0:y0 + size, x0:x0 + size, :] = checker[..., None]
        mask[y0:y0 + size, x0:x0 + size] = 1.0
        return pattern, mask
    if name == "trojan_square":
        size, margin = min(8, h - 2, w - 2), 1
        pattern = np.zeros((h, w, c), dtype=np.float32)
        mask = np.zeros((h, w), dtype=np.float32)
        y0, x0 = h - margin - size, margin
        stripes = (np.indices((size, size)).sum(axis=0) % 4 < 2).astype(np.float32)
        block = np.stack([stripes, 1.0 - stripes, stripes], axis=-1)[..., :c]
        pattern[y0:y0 + size, x0:x0 + size, :] = block
        mask[y0:y0 + size, x0:x0 + size] = 1.0
        return pattern, mask
    if name == "watermark":
        yy, xx = np.mgrid[0:h, 0:w]
        mask = (((yy + xx) % 9) < 2).astype(np.float32)
        pattern = np.full((h, w, c), 0.85, dtype=np.float32) * mask[..., None]
        return pattern, mask
    if name.startswith("pixel_"):
        spots = {
            "pixel_tl": (3, 3),
            "pixel_tr": (3, w - 4),
            "pixel_bl": (h - 4, 3),
            "pixel_br": (h - 4, w - 4),
        }
        if name not in spots:
            raise KeyError(name)
        y, x = spots[name]
        pattern = np.zeros((h, w, c), dtype=np.float32)
        mask = np.zeros((h, w), dtype=np.float32)
        pattern[y, x, :] = 1.0
        mask[y, x] = 1.0
        return pattern, mask
    raise KeyError(f"unknown built-in trigger pattern '{name}'")


BUILTIN_TRIGGER_NAMES = (
    "blend", "flame", "rings", "badnet_patch", "trojan_square", "watermark",
    "pixel_tl", "pixel_tr", "pixel_bl", "pixel_br",
)


def make_trigger(name: str, image_shape, train_opacity: float, test_opacity=None) -> TriggerSpec:
    pattern, mask = builtin_pattern(name, image_shape)
    return TriggerSpec(
        name=name,
        pattern=pattern,
        mask=mask,
        train_opacity=train_opacity,
        test_opacity=train_opacity if test_opacity is None else test_opacity,
    )
