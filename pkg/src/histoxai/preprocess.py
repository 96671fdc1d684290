"""Image loading, resizing, normalization and train-time augmentation.

Images are carried as :class:`ImageTensor`: an ``H x W x 3`` float32 array
plus a tag saying whether values are bytes (0..255) or unit-range (0..1).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .config import AugmentationPolicy
from .errors import PreprocessError

__all__ = [
    "AugmentationPolicy",
    "ImageTensor",
    "Pipeline",
    "augment",
    "bilinear_resize",
    "build_pipeline",
    "hflip",
    "load_image",
    "normalize",
    "resize",
    "sample_rng",
]

ValueRange = Literal["byte", "unit"]


@dataclass(frozen=True, eq=False)
class ImageTensor:
    data: np.ndarray  # (H, W, 3) float32
    value_range: ValueRange = "unit"

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise PreprocessError(f"expected an H x W x 3 array, got shape {self.data.shape}")
        if self.data.shape[0] <= 0 or self.data.shape[1] <= 0:
            raise PreprocessError(f"image has an empty dimension: {self.data.shape}")
        if self.value_range not in ("byte", "unit"):
            raise PreprocessError(f"unknown value range {self.value_range!r}")

    @property
    def size(self) -> tuple[int, int]:
        return int(self.data.shape[0]), int(self.data.shape[1])

    @classmethod
    def from_array(cls, data: np.ndarray, value_range: ValueRange = "unit") -> "ImageTensor":
        return cls(np.ascontiguousarray(data, dtype=np.float32), value_range)


def load_image(path: str | Path) -> ImageTensor:
    """Decode an image file to a byte-range RGB tensor."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise PreprocessError(f"cannot decode image {path}: {exc}") from exc
    return ImageTensor(arr, "byte")


def bilinear_resize(array: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an ``(H, W)`` or ``(H, W, C)`` array.

    Half-pixel sample centers, edge clamping, no antialiasing; the same
    convention as ``torch.nn.functional.interpolate(align_corners=False)``,
    which does the work.
    """
    h, w = int(size[0]), int(size[1])
    if h <= 0 or w <= 0:
        raise PreprocessError(f"resize target must be positive, got {size}")
    if array.shape[:2] == (h, w):
        return array.copy()
    squeeze = array.ndim == 2
    t = torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32))
    t = t[None, None] if squeeze else t.permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    out = out[0, 0] if squeeze else out[0].permute(1, 2, 0)
    return out.contiguous().numpy()


def resize(img: ImageTensor, target: tuple[int, int]) -> ImageTensor:
    return ImageTensor(bilinear_resize(img.data, target), img.value_range)


def normalize(img: ImageTensor) -> ImageTensor:
    if img.value_range != "byte":
        raise PreprocessError("image is already unit-range; refusing to normalize twice")
    return ImageTensor((img.data / np.float32(255.0)).astype(np.float32), "unit")


def hflip(img: ImageTensor) -> ImageTensor:
    return ImageTensor(np.ascontiguousarray(img.data[:, ::-1]), img.value_range)


def sample_rng(policy: AugmentationPolicy, index: int, epoch: int = 0) -> np.random.Generator:
    """Random state for one sample; a pure function of (seed, epoch, index)."""
    seed = 0 if policy.seed is None else int(policy.seed)
    return np.random.default_rng([seed, int(epoch), int(index)])


def augment(img: ImageTensor, policy: AugmentationPolicy, draw: np.random.Generator) -> ImageTensor:
    """Rotate, flip, crop, shift brightness, scale contrast, then clamp.

    All random numbers are drawn up front in a fixed order so that turning a
    transform off does not change what the others see.
    """
    if img.value_range != "unit":
        raise PreprocessError("augment expects a unit-range image; call normalize first")
    h, w = img.size
    angle = draw.uniform(-policy.rotation_max_deg, policy.rotation_max_deg)
    flip_u = draw.random()
    ch = max(1, min(h, int(round(policy.crop_fraction * h))))
    cw = max(1, min(w, int(round(policy.crop_fraction * w))))
    top = int(draw.integers(0, h - ch + 1))
    left = int(draw.integers(0, w - cw + 1))
    delta = draw.uniform(-policy.brightness_delta_max, policy.brightness_delta_max)
    factor = draw.uniform(policy.contrast_range[0], policy.contrast_range[1])

    any_on = policy.rotation or policy.hflip or policy.crop or policy.brightness or policy.contrast
    if not any_on:
        return img
    x = img.data
    if policy.rotation and angle != 0.0:
        # reflect fill keeps tissue texture in the corners instead of black wedges
        x = ndimage.rotate(x, angle, axes=(1, 0), reshape=False, order=1, mode="reflect")
    if policy.hflip and flip_u < policy.hflip_prob:
        x = x[:, ::-1]
    if policy.crop and (ch, cw) != (h, w):
        x = bilinear_resize(np.ascontiguousarray(x[top:top + ch, left:left + cw]), (h, w))
    if policy.brightness:
        x = x + np.float32(delta)
    if policy.contrast:
        mean = x.mean(axis=(0, 1), keepdims=True, dtype=np.float64).astype(np.float32)
        x = mean + np.float32(factor) * (x - mean)
    x = np.clip(x, 0.0, 1.0)
    return ImageTensor(np.ascontiguousarray(x, dtype=np.float32), "unit")


@dataclass(frozen=True)
class Pipeline:
    """Resize to ``input_size``, scale to [0, 1], and augment when a policy is set."""

    input_size: tuple[int, int]
    policy: Optional[AugmentationPolicy] = None

    @property
    def augments(self) -> bool:
        return self.policy is not None

    def prepare(self, img: ImageTensor) -> ImageTensor:
        """Deterministic part (resize, normalize); safe to cache."""
        out = resize(img, self.input_size)
        return normalize(out) if out.value_range == "byte" else out

    def finish(self, img: ImageTensor, index: int = 0, epoch: int = 0) -> ImageTensor:
        if self.policy is None:
            return img
        return augment(img, self.policy, sample_rng(self.policy, index, epoch))

    def __call__(self, img: ImageTensor, index: int = 0, epoch: int = 0) -> ImageTensor:
        return self.finish(self.prepare(img), index, epoch)


def build_pipeline(split: str, input_size: tuple[int, int], policy: Optional[AugmentationPolicy] = None) -> Pipeline:
    """Only the train split is augmented; val and test get resize + normalize."""
    if split != "train":
        return Pipeline(tuple(input_size), None)
    return Pipeline(tuple(input_size), policy if policy is not None else AugmentationPolicy())
