"""Backbone registry, classification head and checkpoints.

Every model is a :class:`TrainedModel`: input scaling -> ``features``
(a backbone emitting a ``B x K x h x w`` grid) -> global average pool ->
one linear layer producing class logits. Models take unit-range images; the
per-backbone input statistics live in buffers inside the model.
"""

from __future__ import annotations

import hashlib
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import BACKBONE_EPOCHS, TEST_BACKBONE
from .errors import CheckpointCorruptError, CheckpointError, ModelError, PretrainedWeightsUnavailable
from .preprocess import ImageTensor

log = logging.getLogger(__name__)

BACKBONES: tuple[str, ...] = tuple(BACKBONE_EPOCHS)
ALL_BACKBONES: tuple[str, ...] = BACKBONES + (TEST_BACKBONE,)
CHECKPOINT_SCHEMA_VERSION = 1

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
INCEPTION_MEAN = (0.5, 0.5, 0.5)
INCEPTION_STD = (0.5, 0.5, 0.5)

DEFAULT_INPUT_SIZE = (299, 299)
TINY_INPUT_SIZE = (32, 32)

_OFFLINE_HINT = (
    "set `model.pretrained: false` for random initialization, or point "
    "`model.weights_path` at a local state_dict file for this backbone"
)


def _conv_bn_act(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.SiLU(),
    )


def tiny_test_features() -> nn.Sequential:
    """Three single-conv blocks, the last two stride 2, ending in 8 channels.

    A 32x32 input yields an 8x8x8 activation grid; about 50k parameters.
    Each grid cell sees a 9x9 input patch, which keeps CAMs local. SiLU keeps
    the network smooth so finite-difference gradient checks are well posed,
    and the last block skips batch norm so the 8 pooled features can grow
    as large as the head needs.
    """
    return nn.Sequential(OrderedDict(
        block1=_conv_bn_act(3, 48),
        block2=_conv_bn_act(48, 96, 2),
        block3=nn.Sequential(nn.Conv2d(96, 8, 3, stride=2, padding=1), nn.SiLU()),
    ))


class TrainedModel(nn.Module):
    """Backbone + pooled linear head, with the metadata checkpoints carry."""

    def __init__(
        self,
        features: nn.Module,
        num_features: int,
        num_classes: int,
        *,
        backbone: str,
        class_order: Sequence[str],
        input_size: tuple[int, int],
        mean: Sequence[float] = (0.0, 0.0, 0.0),
        std: Sequence[float] = (1.0, 1.0, 1.0),
    ):
        super().__init__()
        self.register_buffer("input_mean", torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("input_std", torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1))
        self.features = features
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(num_features, num_classes)
        self.backbone = backbone
        self.num_classes = num_classes
        self.class_order = tuple(class_order)
        self.input_size = tuple(int(s) for s in input_size)
        self.target_layer_name = "features"
        self.target_shape: tuple[int, int, int] | None = None  # (h, w, K)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = (x - self.input_mean) / self.input_std
        a = self.features(x)
        return self.head(torch.flatten(self.pool(a), 1))

    @property
    def checkpoint_digest(self) -> str:
        return state_digest(self.state_dict())


def state_digest(state: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for key in sorted(state):
        t = state[key].detach().cpu().contiguous()
        h.update(key.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes() if t.dtype != torch.bfloat16 else t.float().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# backbone factories
# ---------------------------------------------------------------------------


def _torchvision_net(name: str, pretrained: bool):
    import torchvision.models as tvm

    ctor = {
        "DenseNet121": tvm.densenet121,
        "DenseNet169": tvm.densenet169,
        "DenseNet201": tvm.densenet201,
        "ResNet101": tvm.resnet101,
        "ResNet152": tvm.resnet152,
        "InceptionV3": tvm.inception_v3,
    }[name]
    kwargs = {"weights": "DEFAULT" if pretrained else None}
    if name == "InceptionV3":
        kwargs.update(aux_logits=pretrained, init_weights=not pretrained)
    return ctor(**kwargs)


def _features_from_torchvision(name: str, net: nn.Module) -> tuple[nn.Module, int]:
    if name.startswith("DenseNet"):
        return nn.Sequential(net.features, nn.ReLU()), net.classifier.in_features
    if name.startswith("ResNet"):
        return nn.Sequential(OrderedDict(
            (k, getattr(net, k)) for k in
            ("conv1", "bn1", "relu", "maxpool", "layer1", "layer2", "layer3", "layer4")
        )), net.fc.in_features
    if name == "InceptionV3":
        keys = ("Conv2d_1a_3x3", "Conv2d_2a_3x3", "Conv2d_2b_3x3", "maxpool1", "Conv2d_3b_1x1",
                "Conv2d_4a_3x3", "maxpool2", "Mixed_5b", "Mixed_5c", "Mixed_5d", "Mixed_6a", "Mixed_6b",
                "Mixed_6c", "Mixed_6d", "Mixed_6e", "Mixed_7a", "Mixed_7b", "Mixed_7c")
        return nn.Sequential(OrderedDict((k, getattr(net, k)) for k in keys)), net.fc.in_features
    raise AssertionError(name)


_TIMM_NAMES = {"Xception": "legacy_xception", "InceptionResNetV2": "inception_resnet_v2"}


def _build_backbone(name: str, pretrained: bool, weights_path: Optional[str]):
    """Return (features, num_features, mean, std) for a registered backbone."""
    if name == TEST_BACKBONE:
        if pretrained and weights_path is None:
            raise PretrainedWeightsUnavailable(f"{TEST_BACKBONE} has no pretrained weights; {_OFFLINE_HINT}")
        feats = tiny_test_features()
        if weights_path:
            _load_local(feats, weights_path, name)
        return feats, 8, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)

    download = pretrained and weights_path is None
    try:
        if name in _TIMM_NAMES:
            import timm

            net = timm.create_model(_TIMM_NAMES[name], pretrained=download, num_classes=0, global_pool="")
            mean = tuple(net.pretrained_cfg.get("mean", INCEPTION_MEAN))
            std = tuple(net.pretrained_cfg.get("std", INCEPTION_STD))
        else:
            net = _torchvision_net(name, download)
            mean, std = (INCEPTION_MEAN, INCEPTION_STD) if name == "InceptionV3" else (IMAGENET_MEAN, IMAGENET_STD)
    except (OSError, RuntimeError, ValueError) as exc:
        raise PretrainedWeightsUnavailable(
            f"pretrained weights for {name} are unavailable ({exc.__class__.__name__}: {exc}); {_OFFLINE_HINT}"
        ) from exc
    if weights_path:
        _load_local(net, weights_path, name)
    if name in _TIMM_NAMES:
        return net, net.num_features, mean, std
    feats, n = _features_from_torchvision(name, net)
    return feats, n, mean, std


def _load_local(net: nn.Module, path: str, name: str) -> None:
    p = Path(path)
    if not p.is_file():
        raise PretrainedWeightsUnavailable(f"weights file for {name} not found: {p}")
    state = torch.load(p, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    missing, _unexpected = net.load_state_dict(state, strict=False)
    missing = [k for k in missing if not k.startswith(("fc.", "classifier.", "AuxLogits."))]
    if missing:
        raise ModelError(f"weights file {p} does not fit {name}: {len(missing)} missing keys, e.g. {missing[:3]}")


def build_model(
    backbone: str,
    num_classes: int = 5,
    pretrained: bool = True,
    *,
    seed: int = 0,
    class_order: Optional[Sequence[str]] = None,
    input_size: Optional[tuple[int, int]] = None,
    weights_path: Optional[str] = None,
    freeze_backbone: bool = False,
) -> TrainedModel:
    """Create a classifier with a fresh ``num_classes`` head.

    Random parts (the head, and the backbone when not pretrained) are
    initialized under ``seed`` without touching the global torch RNG.
    """
    if backbone not in ALL_BACKBONES:
        raise ModelError(f"unknown backbone {backbone!r}; valid names: {', '.join(ALL_BACKBONES)}")
    if num_classes < 2:
        raise ModelError(f"num_classes must be >= 2, got {num_classes}")
    if class_order is None:
        class_order = [f"class_{i}" for i in range(num_classes)]
    if len(class_order) != num_classes:
        raise ModelError(f"class_order has {len(class_order)} names for {num_classes} classes")
    if input_size is None:
        input_size = TINY_INPUT_SIZE if backbone == TEST_BACKBONE else DEFAULT_INPUT_SIZE

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
        features, n_feat, mean, std = _build_backbone(backbone, pretrained, weights_path)
        model = TrainedModel(features, n_feat, num_classes, backbone=backbone, class_order=class_order,
                             input_size=input_size, mean=mean, std=std)
    if freeze_backbone:
        for p in model.features.parameters():
            p.requires_grad_(False)
    model.eval()
    resolve_target_layer(model)
    return model


def resolve_target_layer(model: TrainedModel) -> str:
    """Find the last module (in completion order) with a spatial output > 1x1.

    Sets ``model.target_layer_name`` and ``model.target_shape`` as a side
    effect and returns the name.
    """
    seen: list[tuple[str, tuple[int, ...]]] = []
    hooks = []
    for name, module in model.named_modules():
        if not name or name in ("pool", "head"):
            continue

        def hook(_m, _inp, out, name=name):
            if isinstance(out, torch.Tensor) and out.dim() == 4:
                seen.append((name, tuple(out.shape)))

        hooks.append(module.register_forward_hook(hook))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(1, 3, *model.input_size))
    finally:
        for h in hooks:
            h.remove()
        model.train(was_training)
    spatial = [(n, s) for n, s in seen if s[2] * s[3] > 1]
    if not spatial:
        raise ModelError(f"{model.backbone}: no layer produces a spatial activation grid at input {model.input_size}")
    name, shape = spatial[-1]
    model.target_layer_name = name
    model.target_shape = (shape[2], shape[3], shape[1])
    return name


def get_layer(model: nn.Module, name: str) -> nn.Module:
    modules = dict(model.named_modules())
    if name not in modules:
        raise ModelError(f"model has no layer named {name!r}")
    return modules[name]


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def to_batch(images) -> torch.Tensor:
    """Stack ImageTensors / HxWx3 arrays / a BxHxWx3 array into a B x 3 x H x W tensor."""
    if isinstance(images, ImageTensor):
        images = [images]
    if isinstance(images, np.ndarray):
        arr = images[None] if images.ndim == 3 else images
    else:
        arrs = []
        for im in images:
            if isinstance(im, ImageTensor):
                if im.value_range != "unit":
                    raise ModelError("model input must be unit-range; normalize the image first")
                arrs.append(im.data)
            else:
                arrs.append(np.asarray(im, dtype=np.float32))
        arr = np.stack(arrs) if arrs else np.zeros((0, 0, 0, 3), np.float32)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ModelError(f"expected images shaped (B, H, W, 3), got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()


def check_input(model: TrainedModel, x: torch.Tensor) -> None:
    expected = (3, *model.input_size)
    got = tuple(x.shape[1:])
    if got != expected:
        raise ModelError(
            f"wrong input dims: expected (H, W, C) = {(*model.input_size, 3)}, got {(got[1], got[2], got[0])}"
        )


@torch.no_grad()
def predict_logits(model: TrainedModel, images, batch_size: int = 32) -> np.ndarray:
    x = to_batch(images)
    check_input(model, x)
    model.eval()
    out = [model(x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)]
    return torch.cat(out).numpy() if out else np.zeros((0, model.num_classes), np.float32)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(model: TrainedModel, images, batch_size: int = 32) -> np.ndarray:
    """Class probabilities, one row per image, computed in float64."""
    return softmax(predict_logits(model, images, batch_size))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: TrainedModel, path: str | Path) -> str:
    """Write a single-file checkpoint; returns its digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    digest = state_digest(state)
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "backbone": model.backbone,
        "num_classes": model.num_classes,
        "class_order": list(model.class_order),
        "input_size": list(model.input_size),
        "target_layer_name": model.target_layer_name,
        "state_dict": state,
        "digest": digest,
    }
    torch.save(payload, path)
    return digest


def read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types for damaged archives
        raise CheckpointCorruptError(f"checkpoint {path} is corrupt or truncated: {exc}") from exc
    if not isinstance(payload, dict) or "state_dict" not in payload:
        raise CheckpointCorruptError(f"checkpoint {path} has no state_dict")
    version = payload.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(
            f"checkpoint schema version mismatch: file has {version}, this toolkit reads {CHECKPOINT_SCHEMA_VERSION}"
        )
    if state_digest(payload["state_dict"]) != payload.get("digest"):
        raise CheckpointCorruptError(f"checkpoint {path} failed its digest check")
    return payload


def load_checkpoint(
    path: str | Path,
    *,
    backbone: Optional[str] = None,
    class_order: Optional[Sequence[str]] = None,
) -> TrainedModel:
    """Rebuild a model from :func:`save_checkpoint` output.

    ``backbone`` / ``class_order``, when given, must match what the
    checkpoint recorded; a mismatch is an error rather than a silent reindex.
    """
    payload = read_checkpoint(path)
    if backbone is not None and payload["backbone"] != backbone:
        raise CheckpointError(f"checkpoint {path} holds backbone {payload['backbone']!r}, config asks for {backbone!r}")
    if class_order is not None and list(class_order) != list(payload["class_order"]):
        raise CheckpointError(
            f"class order mismatch: checkpoint has {payload['class_order']}, manifest has {list(class_order)}"
        )
    model = build_model(payload["backbone"], payload["num_classes"], pretrained=False,
                        class_order=payload["class_order"], input_size=tuple(payload["input_size"]))
    model.load_state_dict(payload["state_dict"], strict=True)
    model.target_layer_name = payload["target_layer_name"]
    model.eval()
    return model
