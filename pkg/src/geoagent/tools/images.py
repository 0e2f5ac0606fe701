"""Pixel-budget downsampling and the crop-and-zoom tool."""

from __future__ import annotations

import hashlib
import io
import math
import os
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

from PIL import Image

from .base import ToolFailure, atomic_write_bytes

DEFAULT_PIXEL_BUDGET = 2_000_000
DEFAULT_ZOOM_TARGET = 768
MIN_REGION_AREA = 16

_RESAMPLE = Image.Resampling.LANCZOS


@dataclass(frozen=True)
class ImageRef:
    """An image as presented to the model.

    ``width``/``height`` are the presented dimensions; ``scale_to_original``
    maps presented pixel coordinates back to the source file. ``pixels`` holds
    in-memory data for images that have not been written to disk yet (crops).
    """

    path: str | None
    width: int
    height: int
    scale_to_original: float = 1.0
    pixels: Image.Image | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image must be at least 1x1, got {self.width}x{self.height}")
        if self.scale_to_original < 1.0 - 1e-9:
            raise ValueError("presented image cannot be larger than its source")
        if self.path is None and self.pixels is None:
            raise ValueError("image needs a path or in-memory pixels")

    @property
    def area(self) -> int:
        return self.width * self.height

    @classmethod
    def open(cls, path: str | os.PathLike) -> "ImageRef":
        try:
            with Image.open(path) as im:
                width, height = im.size
        except (OSError, ValueError) as exc:
            raise ValueError(f"unreadable image {path}: {exc}") from exc
        return cls(str(path), width, height)

    @classmethod
    def from_pixels(cls, pixels: Image.Image) -> "ImageRef":
        return cls(None, pixels.width, pixels.height, pixels=pixels)

    def source(self) -> Image.Image:
        """Full-resolution source pixels."""
        if self.pixels is not None and self.scale_to_original == 1.0:
            return self.pixels
        if self.path is None:
            # in-memory image that was already downsampled; its pixels are all we have
            return self.pixels
        try:
            with Image.open(self.path) as im:
                return im.convert("RGB")
        except (OSError, ValueError) as exc:
            raise ValueError(f"unreadable image {self.path}: {exc}") from exc

    def load(self) -> Image.Image:
        """Pixels at the presented resolution."""
        if self.pixels is not None and self.pixels.size == (self.width, self.height):
            return self.pixels
        src = self.source()
        if src.size == (self.width, self.height):
            return src
        return src.resize((self.width, self.height), _RESAMPLE)


def fit_to_budget(width: int, height: int, budget: int) -> tuple[int, int]:
    """Largest floor-scaled size with the same aspect ratio and area <= budget."""
    if budget < 1:
        raise ValueError("pixel budget must be >= 1")
    if width < 1 or height < 1:
        raise ValueError("zero-area image")
    if width * height <= budget:
        return width, height
    scale = math.sqrt(budget / (width * height))
    out_w = max(1, math.floor(width * scale))
    out_h = max(1, math.floor(height * scale))
    # a side pinned at 1 px (extreme aspect ratios) leaves the other to absorb the budget
    if out_w == 1:
        out_h = min(out_h, budget)
    if out_h == 1:
        out_w = min(out_w, budget)
    while out_w * out_h > budget:
        if out_w >= out_h:
            out_w -= 1
        else:
            out_h -= 1
    return out_w, out_h


def downsample_to_budget(image: ImageRef, budget: int = DEFAULT_PIXEL_BUDGET) -> ImageRef:
    out_w, out_h = fit_to_budget(image.width, image.height, budget)
    if (out_w, out_h) == (image.width, image.height):
        return image
    scale = image.scale_to_original * image.width / out_w
    pixels = None
    if image.pixels is not None:
        pixels = image.load().resize((out_w, out_h), _RESAMPLE)
    return ImageRef(image.path, out_w, out_h, scale, pixels=pixels)


def _floor(x: float) -> int:
    return math.floor(x + 1e-9)


def _ceil(x: float) -> int:
    return math.ceil(x - 1e-9)


def crop_and_zoom(
    image: ImageRef,
    bbox,
    *,
    zoom_target: int = DEFAULT_ZOOM_TARGET,
    pixel_budget: int = DEFAULT_PIXEL_BUDGET,
) -> ImageRef:
    """Crop ``bbox`` (in the presented frame) out of the source and magnify it.

    The crop is read from the full-resolution source, and its longer side is
    brought up to ``zoom_target`` as far as real source pixels allow; the
    result is never larger than the source region. Raises ToolFailure for an
    inverted bbox, a bbox that misses the image, or a sliver region.
    """
    if len(bbox) != 4:
        raise ToolFailure("invalid bbox", f"expected 4 coordinates, got {len(bbox)}")
    x1, y1, x2, y2 = (int(v) for v in bbox)
    if x1 >= x2 or y1 >= y2:
        raise ToolFailure("invalid bbox", f"need x1 < x2 and y1 < y2, got {[x1, y1, x2, y2]}")

    W, H = image.width, image.height
    cx1, cx2 = min(max(x1, 0), W), min(max(x2, 0), W)
    cy1, cy2 = min(max(y1, 0), H), min(max(y2, 0), H)
    if cx2 <= cx1 or cy2 <= cy1:
        raise ToolFailure("empty after clamp", f"bbox lies outside the {W}x{H} image")
    if (cx2 - cx1) * (cy2 - cy1) < MIN_REGION_AREA:
        raise ToolFailure("degenerate region", f"clamped region {cx2 - cx1}x{cy2 - cy1} is too small")

    src = image.source()
    SW, SH = src.size
    fx, fy = SW / W, SH / H
    sx1, sy1 = _floor(cx1 * fx), _floor(cy1 * fy)
    sx2, sy2 = min(SW, max(sx1 + 1, _ceil(cx2 * fx))), min(SH, max(sy1 + 1, _ceil(cy2 * fy)))
    region = src.crop((sx1, sy1, sx2, sy2))
    sw, sh = region.size

    presented_long = max(cx2 - cx1, cy2 - cy1)
    source_long = max(sw, sh)
    out_long = min(source_long, max(presented_long, zoom_target))
    factor = out_long / source_long
    out_w = min(sw, max(1, round(sw * factor)))
    out_h = min(sh, max(1, round(sh * factor)))
    if (out_w, out_h) != (sw, sh):
        region = region.resize((out_w, out_h), _RESAMPLE)
    zoomed = ImageRef(None, out_w, out_h, sw / out_w, pixels=region)
    return downsample_to_budget(zoomed, pixel_budget)


class ImageStore:
    """Content-addressed PNG store; references are paths relative to ``root``."""

    def __init__(self, root: str | os.PathLike, subdir: str = "images"):
        self.root = Path(root)
        self.subdir = subdir
        self._lock = threading.Lock()

    def put(self, image: ImageRef) -> ImageRef:
        if image.pixels is None:
            return image
        buf = io.BytesIO()
        image.load().save(buf, format="PNG")
        data = buf.getvalue()
        rel = f"{self.subdir}/{hashlib.sha256(data).hexdigest()}.png"
        target = self.root / rel
        with self._lock:
            if not target.exists():
                atomic_write_bytes(target, data)
        return replace(image, path=rel, scale_to_original=1.0)

    def resolve(self, rel: str) -> Path:
        return self.root / rel
