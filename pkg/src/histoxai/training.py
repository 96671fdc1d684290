"""Training loop: Adam, cross-entropy, reduce-on-plateau, best-val checkpoint.

All randomness is keyed: the batch order of epoch ``e`` comes from
``default_rng([seed, e])`` and augmentation from ``(policy.seed, e, index)``,
so a run interrupted after any epoch and resumed from its state file
reproduces the uninterrupted trace exactly.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .config import AugmentationPolicy, HyperParams
from .dataset import DatasetManifest
from .errors import TrainingError, InputError
from .models import TrainedModel, build_model, state_digest, to_batch
from .preprocess import Pipeline, build_pipeline, load_image

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy", "learning_rate")
STATE_SCHEMA_VERSION = 1


@dataclass
class EpochRecord:
    epoch: int  # 1-based
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    learning_rate: float
    wall_time: float = field(default=float("nan"), compare=False)


@dataclass
class TrainingTrace:
    epochs: list[EpochRecord] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def best_epoch(self) -> Optional[int]:
        if not self.epochs:
            return None
        return min(self.epochs, key=lambda r: (r.val_loss, r.epoch)).epoch

    def to_text(self) -> str:
        """Tab-separated log, one epoch per line. Wall times are left out so
        that identical runs produce identical files."""
        buf = io.StringIO()
        for key in sorted(self.metadata):
            value = self.metadata[key]
            if isinstance(value, list):
                value = " | ".join(str(v) for v in value)
            buf.write(f"# {key}={value}\n")
        writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for r in self.epochs:
            writer.writerow((r.epoch, repr(r.train_loss), repr(r.train_accuracy), repr(r.val_loss),
                             repr(r.val_accuracy), repr(r.learning_rate)))
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8", newline="\n")
        return path

    @classmethod
    def from_text(cls, text: str) -> "TrainingTrace":
        metadata: dict = {}
        body = []
        for line in text.splitlines():
            if line.startswith("# "):
                key, _, value = line[2:].partition("=")
                metadata[key] = value
            elif line:
                body.append(line)
        rows = list(csv.reader(body, delimiter="\t"))
        if not rows or tuple(rows[0]) != TRACE_COLUMNS:
            raise InputError(f"trace log must start with columns {list(TRACE_COLUMNS)}")
        epochs = [EpochRecord(int(r[0]), *(float(v) for v in r[1:])) for r in rows[1:]]
        if "warnings" in metadata:
            metadata["warnings"] = [w for w in metadata["warnings"].split(" | ") if w]
        for key in ("batch_size", "seed", "epochs_planned"):
            if key in metadata:
                metadata[key] = int(metadata[key])
        metadata.pop("best_epoch", None)
        trace = cls(epochs, metadata)
        trace._sync_best()
        return trace

    @classmethod
    def load(cls, path: str | Path) -> "TrainingTrace":
        path = Path(path)
        if not path.is_file():
            raise InputError(f"trace file not found: {path}")
        return cls.from_text(path.read_text(encoding="utf-8"))

    def _sync_best(self) -> None:
        if self.epochs:
            self.metadata["best_epoch"] = self.best_epoch


class SplitData:
    """Decoded, resized, normalized images of one split, cached in memory."""

    def __init__(self, manifest: DatasetManifest, split: str, pipeline: Pipeline, cache: bool = True):
        self.records = manifest.split(split)
        self.manifest = manifest
        self.pipeline = pipeline
        self.labels = np.array([r.label.index for r in self.records], dtype=np.int64)
        self._cache: dict[int, object] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.records)

    def _base(self, i: int):
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        img = self.pipeline.prepare(load_image(self.manifest.abspath(self.records[i])))
        if self._cache is not None:
            self._cache[i] = img
        return img

    def batch(self, indices, epoch: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
        images = [self.pipeline.finish(self._base(int(i)), int(i), epoch) for i in indices]
        return to_batch(images), torch.from_numpy(self.labels[np.asarray(indices, dtype=np.int64)])


def _make_optimizer(model: TrainedModel, hp: HyperParams):
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=hp.learning_rate)
    if hp.scheduler == "plateau":
        scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
            optimizer, mode="min", factor=hp.plateau_factor, patience=hp.plateau_patience, min_lr=hp.lr_floor
        )
    else:
        scheduler = None
    return optimizer, scheduler


@torch.no_grad()
def evaluate_split(model: TrainedModel, data: SplitData, batch_size: int = 64) -> tuple[float, float]:
    """Mean cross-entropy and accuracy on ``data`` in inference mode."""
    model.eval()
    total_loss, correct = 0.0, 0
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        x, y = data.batch(idx)
        logits = model(x)
        total_loss += float(F.cross_entropy(logits, y, reduction="sum"))
        correct += int((logits.argmax(1) == y).sum())
    return total_loss / len(data), correct / len(data)


def _check_inputs(model: TrainedModel, manifest: DatasetManifest, hp: HyperParams) -> None:
    if hp.epochs is None or hp.epochs < 1:
        raise InputError(f"epochs must be >= 1, got {hp.epochs}")
    if hp.batch_size < 1:
        raise InputError(f"batch_size must be >= 1, got {hp.batch_size}")
    for split in ("train", "val"):
        if not manifest.split(split):
            raise InputError(f"the {split} split is empty; run split_manifest first")
    if model.num_classes != len(manifest.classes):
        raise InputError(f"model head has {model.num_classes} outputs but the manifest has {len(manifest.classes)} classes")
    if list(model.class_order) != list(manifest.classes):
        raise InputError(f"model class order {list(model.class_order)} differs from manifest {list(manifest.classes)}")


def _save_state(path: Path, model, optimizer, scheduler, best_state, trace: TrainingTrace) -> None:
    payload = {
        "schema_version": STATE_SCHEMA_VERSION,
        "backbone": model.backbone,
        "num_classes": model.num_classes,
        "class_order": list(model.class_order),
        "input_size": list(model.input_size),
        "target_layer_name": model.target_layer_name,
        "model": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "best_model": best_state,
        "optimizer": optimizer.state_dict(),
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "trace_digest": trace.digest(),
        "wall_times": [r.wall_time for r in trace.epochs],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def _run(
    model: TrainedModel,
    manifest: DatasetManifest,
    hp: HyperParams,
    policy: AugmentationPolicy,
    optimizer,
    scheduler,
    trace: TrainingTrace,
    best_state: Optional[dict],
    state_path: Optional[Path],
    stop_after: Optional[int],
    trace_path: Optional[Path] = None,
) -> tuple[TrainedModel, TrainingTrace]:
    train_data = SplitData(manifest, "train", build_pipeline("train", model.input_size, policy))
    val_data = SplitData(manifest, "val", build_pipeline("val", model.input_size, policy))
    seed = int(hp.seed or 0)
    best_val = min((r.val_loss for r in trace.epochs), default=math.inf)

    for epoch in range(len(trace.epochs) + 1, hp.epochs + 1):
        if stop_after is not None and epoch > stop_after:
            break
        started = time.perf_counter()
        lr = float(optimizer.param_groups[0]["lr"])
        model.train()
        order = np.random.default_rng([seed, epoch]).permutation(len(train_data))
        loss_sum, correct = 0.0, 0
        for b, start in enumerate(range(0, len(order), hp.batch_size)):
            idx = order[start:start + hp.batch_size]
            x, y = train_data.batch(idx, epoch)
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite training loss {loss.item()}", epoch=epoch, batch=b)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            loss_sum += loss.item() * len(idx)
            correct += int((logits.detach().argmax(1) == y).sum())
        val_loss, val_acc = evaluate_split(model, val_data)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss {val_loss}", epoch=epoch)
        if scheduler is not None:
            scheduler.step(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy(model.state_dict())
        trace.epochs.append(EpochRecord(epoch, loss_sum / len(order), correct / len(order), val_loss, val_acc, lr,
                                        time.perf_counter() - started))
        trace.metadata["state_digest"] = state_digest(model.state_dict())
        trace._sync_best()
        log.info("epoch %d/%d train_loss=%.4f train_acc=%.4f val_loss=%.4f val_acc=%.4f lr=%.2e",
                 epoch, hp.epochs, trace.epochs[-1].train_loss, trace.epochs[-1].train_accuracy,
                 val_loss, val_acc, lr)
        if state_path is not None:
            _save_state(state_path, model, optimizer, scheduler, best_state, trace)
        if trace_path is not None:
            trace.save(trace_path)

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, trace


def train(
    model: TrainedModel,
    manifest: DatasetManifest,
    hyperparams: HyperParams,
    policy: AugmentationPolicy,
    *,
    state_path: str | Path | None = None,
    trace_path: str | Path | None = None,
    stop_after: Optional[int] = None,
) -> tuple[TrainedModel, TrainingTrace]:
    """Train ``model`` in place and return it loaded with its best-val weights.

    ``state_path`` receives a resumable state and ``trace_path`` the trace
    log after every epoch.
    ``stop_after`` ends the run early after that many epochs, as if interrupted.
    """
    _check_inputs(model, manifest, hyperparams)
    optimizer, scheduler = _make_optimizer(model, hyperparams)
    trace = TrainingTrace(metadata={
        "backbone": model.backbone,
        "batch_size": hyperparams.batch_size,
        "epochs_planned": hyperparams.epochs,
        "seed": int(hyperparams.seed or 0),
        "manifest_digest": manifest.digest(),
        "warnings": [],
    })
    return _run(model, manifest, hyperparams, policy, optimizer, scheduler, trace, None,
                Path(state_path) if state_path else None, stop_after,
                Path(trace_path) if trace_path else None)


def load_state(state_path: str | Path) -> tuple[TrainedModel, dict]:
    path = Path(state_path)
    if not path.is_file():
        raise InputError(f"training state not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise InputError(f"training state {path} is unreadable: {exc}") from exc
    model = build_model(payload["backbone"], payload["num_classes"], pretrained=False,
                        class_order=payload["class_order"], input_size=tuple(payload["input_size"]))
    model.load_state_dict(payload["model"])
    model.target_layer_name = payload["target_layer_name"]
    return model, payload


def resume(
    state_path: str | Path,
    trace: TrainingTrace,
    manifest: DatasetManifest,
    hyperparams: HyperParams,
    policy: AugmentationPolicy,
    *,
    trace_path: str | Path | None = None,
    stop_after: Optional[int] = None,
) -> tuple[TrainedModel, TrainingTrace]:
    """Continue a run from its last saved state.

    The state file and ``trace`` must belong to the same run: the trace
    digest stored with the state and the weight digest recorded in the trace
    are both checked.
    """
    model, payload = load_state(state_path)
    if payload["trace_digest"] != trace.digest():
        raise InputError("trace does not belong to this training state (trace digest lineage mismatch)")
    if trace.metadata.get("state_digest") != state_digest(model.state_dict()):
        raise InputError("training state weights do not match the trace lineage")
    for rec, wall in zip(trace.epochs, payload.get("wall_times", [])):
        rec.wall_time = wall
    _check_inputs(model, manifest, hyperparams)

    best_state = payload["best_model"]
    if len(trace.epochs) >= hyperparams.epochs:
        if best_state is not None:
            model.load_state_dict(best_state)
        model.eval()
        return model, trace

    recorded = trace.metadata.get("batch_size")
    if recorded is not None and int(recorded) != hyperparams.batch_size:
        msg = f"resumed with batch_size {hyperparams.batch_size} (run started with {recorded})"
        log.warning(msg)
        trace.metadata.setdefault("warnings", []).append(msg)
        trace.metadata["batch_size"] = hyperparams.batch_size

    optimizer, scheduler = _make_optimizer(model, hyperparams)
    optimizer.load_state_dict(payload["optimizer"])
    if scheduler is not None and payload["scheduler"] is not None:
        scheduler.load_state_dict(payload["scheduler"])
    trace.metadata["epochs_planned"] = hyperparams.epochs
    return _run(model, manifest, hyperparams, policy, optimizer, scheduler, trace, best_state,
                Path(state_path), stop_after, Path(trace_path) if trace_path else None)


def overfit_single_batch(
    model: TrainedModel,
    images,
    labels,
    steps: int = 200,
    learning_rate: float = 1e-3,
) -> list[float]:
    """Fit one fixed batch for ``steps`` Adam steps; returns the loss per step.

    A capacity check: a working model/optimizer pair drives the loss to ~0.
    """
    x = images if isinstance(images, torch.Tensor) else to_batch(images)
    y = torch.as_tensor(labels, dtype=torch.long)
    optimizer = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=learning_rate)
    model.train()
    losses = []
    for step in range(steps):
        loss = F.cross_entropy(model(x), y)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss.item()}", epoch=1, batch=step)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        losses.append(loss.item())
    model.eval()
    return losses


def trace_summary(trace: TrainingTrace, hyperparams: HyperParams) -> dict:
    return {
        "hyperparams": asdict(hyperparams),
        "best_epoch": trace.best_epoch,
        "epochs_run": len(trace.epochs),
        "wall_times": [r.wall_time for r in trace.epochs],
        "trace_digest": trace.digest(),
    }
