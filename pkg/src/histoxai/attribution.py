"""Class activation maps and gradient saliency.

Methods, by the name used in configs and filenames:

``gradcam``
    Channel weights are the spatial mean of d(logit_c)/dA; map = ReLU(sum_k w_k A_k).
``gradcam_pp``
    Grad-CAM++ pixel weights g^2 / (2 g^2 + sum(A) g^3) applied to ReLU(g),
    using the exponential-score closed form for the higher derivatives.
``scorecam``
    Gradient-free. Each channel, upsampled and min-max scaled, masks the
    input; the softmax score of class c on the masked input is the channel's
    evidence, and a softmax over those scores gives the weights.
``faster_scorecam``
    ``scorecam`` restricted to the ``top_k`` channels of highest spatial
    variance; the rest get weight 0.
``layercam``
    Element-wise ReLU(g) * A summed over channels, at any spatial layer.
``vanilla_saliency``
    |d(logit_c)/d(input)| reduced over color channels.
``smoothgrad``
    ``vanilla_saliency`` averaged over Gaussian-perturbed copies of the input.

Gradient methods differentiate the pre-softmax logit; the Score-CAM family
scores with post-softmax probabilities. Every map is upsampled (bilinear) to
the input size and min-max normalized to [0, 1]. A map without spatial
variation is flagged ``degenerate``: all zeros if it carried no positive
evidence, all ones otherwise.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from .config import ATTRIBUTION_METHODS, AttributionConfig, SmoothGradParams
from .errors import AttributionError, AttributionInputError
from .models import get_layer, to_batch
from .preprocess import ImageTensor, bilinear_resize

__all__ = [
    "ATTRIBUTION_METHODS",
    "AttributionMap",
    "explain",
    "faster_scorecam",
    "gradcam",
    "gradcam_pp",
    "input_gradient",
    "layercam",
    "load_map",
    "normalize_map",
    "resolve_target",
    "save_map",
    "scorecam",
    "smoothgrad",
    "vanilla_saliency",
]

NORM_EPS = 1e-12
Reduction = Literal["max_abs", "mean_abs"]
Target = Union[int, str]


@dataclass(frozen=True, eq=False)
class AttributionMap:
    values: np.ndarray  # (H, W) float32 in [0, 1]
    method: str
    target_class: int
    raw_range: tuple[float, float]
    degenerate: bool = False
    layer: Optional[str] = None
    # Resolution of the map before upsampling to the input size.
    feature_shape: Optional[tuple[int, int]] = None
    channel_weights: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.values.shape[0]), int(self.values.shape[1])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.method}|{self.target_class}|{int(self.degenerate)}|".encode())
        h.update(np.ascontiguousarray(self.values, dtype="<f4").tobytes())
        return h.hexdigest()


def normalize_map(raw: np.ndarray) -> tuple[np.ndarray, bool, tuple[float, float]]:
    """Min-max scale to [0, 1]; returns (values, degenerate, raw_range)."""
    raw = np.asarray(raw, dtype=np.float32)
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo > NORM_EPS:
        values = (raw - np.float32(lo)) / np.float32(hi - lo)
        return np.clip(values, 0.0, 1.0).astype(np.float32), False, (lo, hi)
    fill = 1.0 if hi > NORM_EPS else 0.0
    return np.full(raw.shape, fill, dtype=np.float32), True, (lo, hi)


def _finish(cam: np.ndarray, size: tuple[int, int], method: str, target: int, layer: Optional[str],
            weights: Optional[np.ndarray] = None) -> AttributionMap:
    feature_shape = (int(cam.shape[0]), int(cam.shape[1]))
    up = bilinear_resize(np.ascontiguousarray(cam, dtype=np.float32), size)
    values, degenerate, raw_range = normalize_map(up)
    return AttributionMap(values, method, target, raw_range, degenerate, layer, feature_shape, weights)


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------


def _input(image) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        x = image if image.dim() == 4 else image[None]
        return x.detach().float()
    if isinstance(image, ImageTensor) and image.value_range != "unit":
        raise AttributionInputError("attribution expects a preprocessed (unit-range) image")
    return to_batch([image])


def _layer_name(model: nn.Module, layer: Optional[str]) -> str:
    if layer is not None:
        return layer
    name = getattr(model, "target_layer_name", None)
    if not name:
        raise AttributionInputError("model has no target layer; pass `layer=` explicitly")
    return name


def resolve_target(model: nn.Module, logits: torch.Tensor, target: Target) -> int:
    """Map ``"predicted"``, a class name, or an index to a class index."""
    n = logits.shape[-1]
    if isinstance(target, str):
        if target == "predicted":
            return int(torch.argmax(logits[0]))
        order = list(getattr(model, "class_order", ()))
        if target in order:
            return order.index(target)
        raise AttributionInputError(f"unknown target class {target!r}; classes are {order}")
    c = int(target)
    if not 0 <= c < n:
        raise AttributionInputError(f"target class {c} out of range [0, {n})")
    return c


class _Capture:
    """Forward hook keeping the latest output of one module."""

    def __init__(self, module: nn.Module):
        self.output: Optional[torch.Tensor] = None
        self._handle = module.register_forward_hook(self._hook)

    def _hook(self, _module, _inp, out):
        self.output = out

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self._handle.remove()


def _activation_and_grad(model: nn.Module, x: torch.Tensor, layer: str, target: Target):
    """Forward once; return (A, dlogit_c/dA, logits, c) with A shaped (K, h, w)."""
    model.eval()
    module = get_layer(model, layer)
    with torch.enable_grad(), _Capture(module) as cap:
        x = x.clone().requires_grad_(True)
        logits = model(x)
        act = cap.output
        if not isinstance(act, torch.Tensor) or act.dim() != 4:
            raise AttributionError(f"layer {layer!r} did not produce a B x K x h x w activation")
        c = resolve_target(model, logits.detach(), target)
        try:
            (grad,) = torch.autograd.grad(logits[0, c], act)
        except RuntimeError as exc:
            raise AttributionError(f"gradient of class {c} w.r.t. layer {layer!r} is unavailable: {exc}") from exc
    # channel sums run in float64 so near-cancelling maps survive normalization
    return act[0].detach().double(), grad[0].detach().double(), logits.detach(), c


# ---------------------------------------------------------------------------
# gradient CAMs
# ---------------------------------------------------------------------------


def gradcam(model: nn.Module, image, target_class: Target = "predicted", layer: Optional[str] = None) -> AttributionMap:
    x = _input(image)
    name = _layer_name(model, layer)
    A, G, _, c = _activation_and_grad(model, x, name, target_class)
    weights = G.mean(dim=(1, 2))
    cam = F.relu((weights[:, None, None] * A).sum(0))
    return _finish(cam.numpy(), tuple(x.shape[2:]), "gradcam", c, name, weights.float().numpy())


def gradcam_pp(model: nn.Module, image, target_class: Target = "predicted", layer: Optional[str] = None) -> AttributionMap:
    x = _input(image)
    name = _layer_name(model, layer)
    A, G, _, c = _activation_and_grad(model, x, name, target_class)
    g2 = G.pow(2)
    g3 = G.pow(3)
    denom = 2 * g2 + A.sum(dim=(1, 2), keepdim=True) * g3
    alpha = torch.where(denom != 0, g2 / torch.where(denom != 0, denom, torch.ones_like(denom)),
                        torch.zeros_like(denom))
    weights = (alpha * F.relu(G)).sum(dim=(1, 2))
    cam = F.relu((weights[:, None, None] * A).sum(0))
    return _finish(cam.numpy(), tuple(x.shape[2:]), "gradcam_pp", c, name, weights.float().numpy())


def layercam(model: nn.Module, image, target_class: Target = "predicted", layer: Optional[str] = None) -> AttributionMap:
    x = _input(image)
    name = _layer_name(model, layer)
    A, G, _, c = _activation_and_grad(model, x, name, target_class)
    cam = F.relu((F.relu(G) * A).sum(0))
    return _finish(cam.numpy(), tuple(x.shape[2:]), "layercam", c, name)


# ---------------------------------------------------------------------------
# score CAMs
# ---------------------------------------------------------------------------


def _baseline(x: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "zero":
        return torch.zeros_like(x)
    if kind == "blur":
        sigma = max(x.shape[2], x.shape[3]) / 20.0
        arr = ndimage.gaussian_filter(x[0].numpy(), sigma=(0, sigma, sigma), mode="reflect")
        return torch.from_numpy(arr)[None]
    raise AttributionInputError(f"unknown Score-CAM baseline {kind!r}")


def _score_cam(model: nn.Module, image, target_class: Target, top_k: Optional[int], layer: Optional[str],
               batch_size: int, baseline: str, method: str) -> AttributionMap:
    x = _input(image)
    name = _layer_name(model, layer)
    model.eval()
    with torch.no_grad(), _Capture(get_layer(model, name)) as cap:
        logits = model(x)
        A = cap.output
    if not isinstance(A, torch.Tensor) or A.dim() != 4:
        raise AttributionError(f"layer {name!r} did not produce a B x K x h x w activation")
    A = A[0].detach()
    c = resolve_target(model, logits, target_class)
    K = A.shape[0]

    if top_k is None or top_k >= K:
        chosen = np.arange(K)
    else:
        if top_k < 1:
            raise AttributionInputError(f"top_k must be >= 1, got {top_k}")
        variance = A.reshape(K, -1).var(dim=1, unbiased=False).numpy()
        chosen = np.sort(np.argsort(-variance, kind="stable")[:top_k])
    idx = torch.from_numpy(chosen)

    with torch.no_grad():
        up = F.interpolate(A[idx][None], size=x.shape[2:], mode="bilinear", align_corners=False)[0]
        lo = up.amin(dim=(1, 2), keepdim=True)
        hi = up.amax(dim=(1, 2), keepdim=True)
        span = hi - lo
        masks = torch.where(span > NORM_EPS, (up - lo) / torch.where(span > NORM_EPS, span, torch.ones_like(span)),
                            torch.zeros_like(up))
        base = _baseline(x, baseline)
        scores = []
        for start in range(0, len(chosen), batch_size):
            m = masks[start:start + batch_size, None]
            masked = base + (x - base) * m
            scores.append(torch.softmax(model(masked).double(), dim=1)[:, c].float())
        s = torch.cat(scores)
        w_sel = torch.softmax(s, dim=0)
        cam = F.relu((w_sel[:, None, None] * A[idx]).sum(0))

    weights = np.zeros(K, dtype=np.float32)
    weights[chosen] = w_sel.numpy()
    return _finish(cam.numpy(), tuple(x.shape[2:]), method, c, name, weights)


def scorecam(model: nn.Module, image, target_class: Target = "predicted", layer: Optional[str] = None,
             batch_size: int = 32, baseline: str = "zero") -> AttributionMap:
    return _score_cam(model, image, target_class, None, layer, batch_size, baseline, "scorecam")


def faster_scorecam(model: nn.Module, image, target_class: Target = "predicted", top_k: int = 10,
                    layer: Optional[str] = None, batch_size: int = 32, baseline: str = "zero") -> AttributionMap:
    if top_k < 1:
        raise AttributionInputError(f"top_k must be >= 1, got {top_k}")
    return _score_cam(model, image, target_class, top_k, layer, batch_size, baseline, "faster_scorecam")


# ---------------------------------------------------------------------------
# saliency
# ---------------------------------------------------------------------------


def _reduce(grad: np.ndarray, reduction: Reduction) -> np.ndarray:
    mag = np.abs(grad)
    if reduction == "max_abs":
        return mag.max(axis=-1)
    if reduction == "mean_abs":
        return mag.mean(axis=-1)
    raise AttributionInputError(f"unknown saliency reduction {reduction!r}")


def _input_grads(model: nn.Module, x: torch.Tensor, target_class: Target) -> tuple[np.ndarray, int]:
    """Gradients of the class logit for each row of ``x``, as (B, H, W, 3)."""
    model.eval()
    with torch.enable_grad():
        x = x.clone().requires_grad_(True)
        logits = model(x)
        c = resolve_target(model, logits[:1].detach(), target_class)
        try:
            (grad,) = torch.autograd.grad(logits[:, c].sum(), x)
        except RuntimeError as exc:
            raise AttributionError(f"gradient of class {c} w.r.t. the input is unavailable: {exc}") from exc
    return grad.permute(0, 2, 3, 1).numpy(), c


def input_gradient(model: nn.Module, image, target_class: Target = "predicted") -> np.ndarray:
    """Signed d(logit_c)/d(pixel) as an H x W x 3 array."""
    grads, _ = _input_grads(model, _input(image), target_class)
    return grads[0]


def vanilla_saliency(model: nn.Module, image, target_class: Target = "predicted",
                     reduction: Reduction = "max_abs") -> AttributionMap:
    x = _input(image)
    grads, c = _input_grads(model, x, target_class)
    raw = _reduce(grads[0], reduction)
    values, degenerate, raw_range = normalize_map(raw)
    return AttributionMap(values, "vanilla_saliency", c, raw_range, degenerate, None, raw.shape)


def smoothgrad(model: nn.Module, image, target_class: Target = "predicted",
               params: SmoothGradParams = SmoothGradParams(), reduction: Reduction = "max_abs",
               batch_size: int = 25) -> AttributionMap:
    """Average of saliency maps over ``x + N(0, (sigma * range)^2)`` copies.

    ``range`` is the nominal unit-image value range, 1.0. The noise for all
    copies is drawn from ``default_rng(params.seed)`` in HWC order; an unset
    seed means 0, so the map is always reproducible.
    """
    if params.n_samples < 1:
        raise AttributionInputError(f"n_samples must be >= 1, got {params.n_samples}")
    if params.noise_sigma < 0:
        raise AttributionInputError(f"noise_sigma must be >= 0, got {params.noise_sigma}")
    x = _input(image)
    # resolve "predicted" on the clean image so every noisy copy explains the same class
    with torch.no_grad():
        c = resolve_target(model, model.eval()(x), target_class)

    if params.noise_sigma == 0:
        # every copy would be identical; one pass gives the exact same average
        grads, _ = _input_grads(model, x, c)
        raw = _reduce(grads[0], reduction)
    else:
        rng = np.random.default_rng(0 if params.seed is None else params.seed)
        sigma = params.noise_sigma * 1.0
        hwc = x[0].permute(1, 2, 0).numpy()
        noise = rng.normal(0.0, sigma, size=(params.n_samples, *hwc.shape)).astype(np.float32)
        total = np.zeros(hwc.shape[:2], dtype=np.float32)
        for start in range(0, params.n_samples, batch_size):
            noisy = to_batch(hwc[None] + noise[start:start + batch_size])
            grads, _ = _input_grads(model, noisy, c)
            for g in grads:
                total += _reduce(g, reduction)
        raw = total / np.float32(params.n_samples)
    values, degenerate, raw_range = normalize_map(raw)
    return AttributionMap(values, "smoothgrad", c, raw_range, degenerate, None, raw.shape)


# ---------------------------------------------------------------------------
# dispatch and persistence
# ---------------------------------------------------------------------------


def explain(model: nn.Module, image, method: str, target_class: Target = "predicted",
            cfg: AttributionConfig = AttributionConfig()) -> AttributionMap:
    """Run one named method with parameters from ``cfg``."""
    if method not in ATTRIBUTION_METHODS:
        raise AttributionInputError(f"unknown method {method!r}; valid names: {', '.join(ATTRIBUTION_METHODS)}")
    layer = cfg.layer
    runners: dict[str, Callable[[], AttributionMap]] = {
        "gradcam": lambda: gradcam(model, image, target_class, layer),
        "gradcam_pp": lambda: gradcam_pp(model, image, target_class, layer),
        "scorecam": lambda: scorecam(model, image, target_class, layer, cfg.scorecam_batch_size,
                                     cfg.scorecam_baseline),
        "faster_scorecam": lambda: faster_scorecam(model, image, target_class, cfg.faster_scorecam_top_k, layer,
                                                   cfg.scorecam_batch_size, cfg.scorecam_baseline),
        "layercam": lambda: layercam(model, image, target_class, layer),
        "vanilla_saliency": lambda: vanilla_saliency(model, image, target_class, cfg.saliency_reduction),
        "smoothgrad": lambda: smoothgrad(model, image, target_class, cfg.smoothgrad, cfg.saliency_reduction),
    }
    return runners[method]()


_MAP_MAGIC = "histoxai-map"


def save_map(amap: AttributionMap, path: str | Path) -> Path:
    """One JSON header line, then the H*W float32 little-endian grid."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "magic": _MAP_MAGIC,
        "version": 1,
        "height": amap.shape[0],
        "width": amap.shape[1],
        "dtype": "<f4",
        "method": amap.method,
        "target_class": amap.target_class,
        "raw_range": list(amap.raw_range),
        "degenerate": amap.degenerate,
        "layer": amap.layer,
    }
    with path.open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(amap.values, dtype="<f4").tobytes())
    return path


def load_map(path: str | Path) -> AttributionMap:
    blob = Path(path).read_bytes()
    head, _, body = blob.partition(b"\n")
    try:
        header = json.loads(head)
    except json.JSONDecodeError as exc:
        raise AttributionInputError(f"{path}: not an attribution map file") from exc
    if header.get("magic") != _MAP_MAGIC:
        raise AttributionInputError(f"{path}: not an attribution map file")
    h, w = header["height"], header["width"]
    if len(body) != h * w * 4:
        raise AttributionInputError(f"{path}: expected {h * w * 4} data bytes, found {len(body)}")
    values = np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)
    return AttributionMap(values, header["method"], int(header["target_class"]), tuple(header["raw_range"]),
                          bool(header["degenerate"]), header.get("layer"))
