"""Heatmap overlays and side-by-side method comparison grids."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .attribution import AttributionMap
from .config import OverlaySpec
from .errors import InputError
from .preprocess import ImageTensor, bilinear_resize

__all__ = ["OverlaySpec", "apply_colormap", "comparison_grid", "grid_filename", "overlay", "overlay_filename",
           "render_overlay", "save_png", "to_pil"]

MapLike = Union[AttributionMap, np.ndarray]
ImageLike = Union[ImageTensor, np.ndarray]


def _jet(v: np.ndarray) -> np.ndarray:
    r = np.clip(1.5 - np.abs(4.0 * v - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * v - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * v - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def apply_colormap(values: np.ndarray, name: str = "jet") -> np.ndarray:
    """Map an (H, W) grid in [0, 1] to (H, W, 3) RGB in [0, 1]."""
    v = np.clip(np.asarray(values, dtype=np.float32), 0.0, 1.0)
    if name == "jet":
        rgb = _jet(v)
    elif name == "grayscale":
        rgb = np.repeat(v[..., None], 3, axis=-1)
    elif name == "viridis":
        from matplotlib import colormaps

        rgb = colormaps["viridis"](v)[..., :3]
    else:
        raise InputError(f"unknown colormap {name!r}; choose jet, viridis or grayscale")
    return rgb.astype(np.float32)


def _image_array(image: ImageLike) -> np.ndarray:
    if isinstance(image, ImageTensor):
        if image.value_range != "unit":
            raise InputError("overlay expects a unit-range image")
        return image.data
    return np.asarray(image, dtype=np.float32)


def _map_array(amap: MapLike) -> np.ndarray:
    return amap.values if isinstance(amap, AttributionMap) else np.asarray(amap, dtype=np.float32)


def overlay(image: ImageLike, amap: MapLike, spec: OverlaySpec = OverlaySpec()) -> np.ndarray:
    """Blend ``(1 - alpha) * image + alpha * colormap(map)``, clamped to [0, 1]."""
    img = _image_array(image)
    values = _map_array(amap)
    if img.shape[:2] != values.shape:
        raise InputError(f"map dims {values.shape} do not match image dims {img.shape[:2]}")
    if not 0.0 <= spec.alpha <= 1.0:
        raise InputError(f"alpha must be in [0, 1], got {spec.alpha}")
    a = np.float32(spec.alpha)
    out = (np.float32(1.0) - a) * img + a * apply_colormap(values, spec.colormap)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def to_pil(array: np.ndarray) -> Image.Image:
    return Image.fromarray(np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8), mode="RGB")


def save_png(img: Image.Image, path: str | Path) -> Path:
    """PNG with fixed encoder settings and no metadata chunks."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG", optimize=False, compress_level=6)
    return path


def _caption(img: Image.Image, lines: Sequence[str]) -> Image.Image:
    lines = [l for l in lines if l]
    if not lines:
        return img
    draw = ImageDraw.Draw(img)
    font = ImageFont.load_default()
    height = 12 * len(lines) + 4
    width = min(img.width, 6 * max(len(l) for l in lines) + 6)
    draw.rectangle([0, 0, width, height], fill=(0, 0, 0))
    for i, line in enumerate(lines):
        draw.text((3, 2 + 12 * i), line, fill=(255, 255, 255), font=font)
    return img


def _annotation(spec: OverlaySpec, method: Optional[str], class_name: Optional[str],
                probability: Optional[float]) -> list[str]:
    lines = []
    if spec.annotate_method and method:
        lines.append(method)
    if spec.annotate_class and class_name:
        lines.append(class_name)
    if spec.annotate_probability and probability is not None:
        lines.append(f"p={probability:.3f}")
    return lines


def render_overlay(image: ImageLike, amap: MapLike, spec: OverlaySpec = OverlaySpec(), *,
                   method: Optional[str] = None, class_name: Optional[str] = None,
                   probability: Optional[float] = None) -> Image.Image:
    """Overlay as a PIL image with the annotations ``spec`` asks for."""
    if method is None and isinstance(amap, AttributionMap):
        method = amap.method
    return _caption(to_pil(overlay(image, amap, spec)), _annotation(spec, method, class_name, probability))


def comparison_grid(image: ImageLike, maps: Sequence[tuple[str, MapLike]], spec: OverlaySpec = OverlaySpec(), *,
                    class_name: Optional[str] = None, probability: Optional[float] = None) -> Image.Image:
    """Original image followed by one overlay per method, row-major.

    Every tile is ``spec.tile_size`` square; the grid has
    ``min(spec.grid_columns, tiles)`` columns.
    """
    if not maps:
        raise InputError("comparison grid needs at least one attribution map")
    img = _image_array(image)
    shapes = {_map_array(m).shape for _, m in maps}
    if len(shapes) != 1:
        raise InputError(f"all maps must share one shape, got {sorted(shapes)}")
    t = spec.tile_size
    panels = [(img, _annotation(spec, "original", class_name, probability))]
    for method, amap in maps:
        panels.append((overlay(img, amap, spec), _annotation(spec, method, None, None)))

    cols = min(spec.grid_columns, len(panels))
    rows = math.ceil(len(panels) / cols)
    grid = Image.new("RGB", (cols * t, rows * t), (255, 255, 255))
    for i, (arr, caption) in enumerate(panels):
        if arr.shape[:2] != (t, t):
            arr = bilinear_resize(arr, (t, t))
        r, c = divmod(i, cols)
        grid.paste(_caption(to_pil(arr), caption), (c * t, r * t))
    return grid


def overlay_filename(image_stem: str, method: str, class_name: str) -> str:
    return f"{image_stem}__{method}__{class_name}.png"


def grid_filename(image_stem: str) -> str:
    return f"{image_stem}__grid.png"
