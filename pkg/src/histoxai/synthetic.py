"""Synthetic five-class "blob" tiles for tests and desk-scale demos.

Each tile is a pink, noisy, stain-like background with one colored disk; the
disk color is the class. Quadrant variants place the disk in a chosen
quadrant so that localization can be checked.

    python -m histoxai.synthetic out_dir --per-class 100
"""

from __future__ import annotations

import argparse
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

CLASS_NAMES = ("colon_aca", "colon_n", "lung_aca", "lung_n", "lung_scc")
PALETTE = np.array([
    (0.45, 0.10, 0.55),
    (0.85, 0.20, 0.25),
    (0.15, 0.30, 0.80),
    (0.20, 0.60, 0.25),
    (0.95, 0.75, 0.10),
], dtype=np.float32)
BACKGROUND = np.array((0.92, 0.80, 0.88), dtype=np.float32)
QUADRANTS = ("top_left", "top_right", "bottom_left", "bottom_right")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    return BACKGROUND + rng.normal(0.0, 0.04, size=(size, size, 3)).astype(np.float32)


def _paint_disk(img: np.ndarray, rng: np.random.Generator, class_index: int, center, radius: float) -> None:
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    inside = (yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= radius ** 2
    color = PALETTE[class_index] + rng.normal(0.0, 0.03, size=(int(inside.sum()), 3)).astype(np.float32)
    img[inside] = color


def quadrant_center(quadrant: int, size: int = 32) -> tuple[float, float]:
    half = size / 2
    row, col = divmod(quadrant, 2)
    return (row * half + half / 2 - 0.5, col * half + half / 2 - 0.5)


def quadrant_slices(quadrant: int, size: int = 32) -> tuple[slice, slice]:
    half = size // 2
    row, col = divmod(quadrant, 2)
    return slice(row * half, (row + 1) * half), slice(col * half, (col + 1) * half)


def blob_image(class_index: int, rng: np.random.Generator, size: int = 32,
               center: Optional[tuple[float, float]] = None, radius: Optional[float] = None) -> np.ndarray:
    """One tile as a unit-range float32 (size, size, 3) array."""
    img = _background(rng, size)
    if radius is None:
        radius = float(rng.uniform(0.14, 0.19) * size)
    if center is None:
        lo, hi = radius + 1, size - radius - 2
        center = (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
    _paint_disk(img, rng, class_index, center, radius)
    return np.clip(img, 0.0, 1.0)


def quadrant_image(class_index: int, quadrant: int, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    return blob_image(class_index, rng, size, quadrant_center(quadrant, size), radius=0.16 * size)


def two_blob_image(class_a: int, quadrant_a: int, class_b: int, quadrant_b: int,
                   rng: np.random.Generator, size: int = 32) -> np.ndarray:
    img = _background(rng, size)
    _paint_disk(img, rng, class_a, quadrant_center(quadrant_a, size), 0.16 * size)
    _paint_disk(img, rng, class_b, quadrant_center(quadrant_b, size), 0.16 * size)
    return np.clip(img, 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_blob_dataset(root: str | Path, per_class: int = 100, size: int = 32, seed: int = 0,
                       classes: tuple[str, ...] = CLASS_NAMES) -> dict[str, int]:
    """Write ``root/<class>/<class>_NNNN.png``; returns per-class counts."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    counts = {}
    for ci, name in enumerate(classes):
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for k in range(per_class):
            Image.fromarray(to_uint8(blob_image(ci, rng, size)), mode="RGB").save(d / f"{name}_{k:04d}.png")
        counts[name] = per_class
    return counts


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Write a synthetic five-class blob dataset.")
    parser.add_argument("root")
    parser.add_argument("--per-class", type=int, default=100)
    parser.add_argument("--size", type=int, default=32)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    counts = write_blob_dataset(args.root, args.per_class, args.size, args.seed)
    print(f"wrote {sum(counts.values())} images to {args.root}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
