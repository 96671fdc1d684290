"""Classification metrics: accuracy, precision, recall, F1, Jaccard, log loss.

Per-class quantities come from the confusion matrix (rows = true class,
columns = predicted class). Undefined ratios (0/0) are 0. Aggregates use
weighted (by support), macro, or micro averaging.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .errors import EvaluationError
from .visualization import save_png

Averaging = Literal["weighted", "macro", "micro"]

TABLE_COLUMNS = ("Model", "Accuracy", "Precision", "Recall", "F1-Score", "Jaccard Score", "Log Loss")
METRIC_KEYS = ("accuracy", "precision", "recall", "f1", "jaccard", "log_loss")
LOG_LOSS_EPS = 1e-15
NORMALIZATION_TOL = 1e-6


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # (C, C) int64, rows = true, columns = predicted
    class_order: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def __eq__(self, other):
        return (isinstance(other, ConfusionMatrix) and self.class_order == other.class_order
                and np.array_equal(self.counts, other.counts))


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    jaccard: float
    support: int


@dataclass
class EvaluationReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    jaccard: float
    log_loss: float
    averaging: str
    per_class: dict[str, ClassMetrics]
    confusion: ConfusionMatrix
    model: str = ""
    model_digest: str = ""
    manifest_digest: str = ""
    num_samples: int = 0

    def row(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_KEYS}

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "model_digest": self.model_digest,
            "manifest_digest": self.manifest_digest,
            "averaging": self.averaging,
            "num_samples": self.num_samples,
            **self.row(),
            "per_class": {name: asdict(m) for name, m in self.per_class.items()},
            "confusion": {
                "class_order": list(self.confusion.class_order),
                "counts": self.confusion.counts.tolist(),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        conf = ConfusionMatrix(np.asarray(d["confusion"]["counts"], dtype=np.int64),
                               tuple(d["confusion"]["class_order"]))
        return cls(
            **{k: float(d[k]) for k in METRIC_KEYS},
            averaging=d["averaging"],
            per_class={n: ClassMetrics(**m) for n, m in d["per_class"].items()},
            confusion=conf,
            model=d.get("model", ""),
            model_digest=d.get("model_digest", ""),
            manifest_digest=d.get("manifest_digest", ""),
            num_samples=int(d.get("num_samples", conf.total)),
        )


def _label_indices(labels: Sequence, class_order: Sequence[str]) -> np.ndarray:
    n = len(class_order)
    index = {name: i for i, name in enumerate(class_order)}
    out = np.empty(len(labels), dtype=np.int64)
    for k, lab in enumerate(labels):
        if isinstance(lab, str):
            if lab not in index:
                raise EvaluationError(f"unknown label {lab!r}; classes are {list(class_order)}")
            out[k] = index[lab]
        else:
            i = int(lab)
            if not 0 <= i < n or i != lab:
                raise EvaluationError(f"unknown label {lab!r}; expected an index in [0, {n})")
            out[k] = i
    return out


def confusion(y_true: Sequence, y_pred: Sequence, class_order: Sequence[str]) -> ConfusionMatrix:
    """Count (true, predicted) pairs. Labels may be class names or indices."""
    if len(y_true) != len(y_pred):
        raise EvaluationError(f"label sequences differ in length: {len(y_true)} vs {len(y_pred)}")
    t = _label_indices(y_true, class_order)
    p = _label_indices(y_pred, class_order)
    n = len(class_order)
    counts = np.bincount(t * n + p, minlength=n * n).reshape(n, n).astype(np.int64)
    return ConfusionMatrix(counts, tuple(class_order))


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = num.astype(np.float64)
    den = den.astype(np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def per_class_metrics(cm: ConfusionMatrix) -> dict[str, ClassMetrics]:
    c = cm.counts
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    jaccard = _ratio(tp, tp + fp + fn)
    return {
        name: ClassMetrics(float(precision[i]), float(recall[i]), float(f1[i]), float(jaccard[i]), int(tp[i] + fn[i]))
        for i, name in enumerate(cm.class_order)
    }


def log_loss(y_true: np.ndarray, proba: np.ndarray, eps: float = LOG_LOSS_EPS) -> float:
    """Mean negative log probability of the true class, clipped to [eps, 1-eps]."""
    p = np.clip(proba[np.arange(len(y_true)), y_true], eps, 1 - eps)
    return float(-np.mean(np.log(p)))


def metric_suite(
    y_true: Sequence,
    proba: np.ndarray,
    averaging: Averaging = "weighted",
    class_order: Optional[Sequence[str]] = None,
) -> EvaluationReport:
    """All six metrics for predicted probability rows against true labels.

    The predicted class is the argmax of each row, lowest index on ties.
    """
    proba = np.asarray(proba, dtype=np.float64)
    if proba.ndim != 2:
        raise EvaluationError(f"probabilities must be a 2-D (N, C) array, got shape {proba.shape}")
    n, num_classes = proba.shape
    if n == 0:
        raise EvaluationError("cannot evaluate zero samples")
    if len(y_true) != n:
        raise EvaluationError(f"{len(y_true)} labels for {n} probability rows")
    if not np.all(np.isfinite(proba)) or np.any(proba < 0):
        raise EvaluationError("probabilities must be finite and non-negative")
    sums = proba.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > NORMALIZATION_TOL)
    if bad.size:
        raise EvaluationError(f"probability row {int(bad[0])} sums to {sums[bad[0]]!r}, not 1")
    if averaging not in ("weighted", "macro", "micro"):
        raise EvaluationError(f"unknown averaging {averaging!r}")
    if class_order is None:
        class_order = [str(i) for i in range(num_classes)]
    if len(class_order) != num_classes:
        raise EvaluationError(f"{len(class_order)} class names for {num_classes} probability columns")

    t = _label_indices(y_true, class_order)
    pred = np.argmax(proba, axis=1)
    cm = confusion(t, pred, class_order)
    per = per_class_metrics(cm)
    accuracy = float(np.trace(cm.counts)) / n

    if averaging == "micro":
        tp = float(np.trace(cm.counts))
        wrong = n - tp
        precision = recall = f1 = accuracy
        jaccard = tp / (tp + 2 * wrong) if tp + wrong > 0 else 0.0
    else:
        names = list(class_order)
        weights = (cm.support.astype(np.float64) / n if averaging == "weighted"
                   else np.full(num_classes, 1.0 / num_classes))
        precision, recall, f1, jaccard = (
            float(sum(w * getattr(per[c], key) for w, c in zip(weights, names)))
            for key in ("precision", "recall", "f1", "jaccard")
        )

    return EvaluationReport(
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        jaccard=jaccard,
        log_loss=log_loss(t, proba),
        averaging=averaging,
        per_class=per,
        confusion=cm,
        num_samples=n,
    )


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def table_rows(reports: Sequence[EvaluationReport], digits: int = 4) -> list[list[str]]:
    rows = [list(TABLE_COLUMNS)]
    for r in reports:
        rows.append([r.model] + [f"{getattr(r, k):.{digits}f}" for k in METRIC_KEYS])
    return rows


def format_table(reports: Sequence[EvaluationReport], digits: int = 4) -> str:
    rows = table_rows(reports, digits)
    widths = [max(len(row[i]) for row in rows) for i in range(len(TABLE_COLUMNS))]
    lines = ["  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths)))
             for row in rows]
    return "\n".join(lines)


def metrics_csv_text(reports: Sequence[EvaluationReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    for r in reports:
        writer.writerow([r.model] + [repr(float(getattr(r, k))) for k in METRIC_KEYS])
    return buf.getvalue()


def _blues(v: float) -> tuple[int, int, int]:
    lo, hi = np.array([247, 251, 255]), np.array([8, 48, 107])
    return tuple(int(round(x)) for x in lo + (hi - lo) * v)


def confusion_image(cm: ConfusionMatrix, size: int = 480) -> Image.Image:
    """Square ``size`` x ``size`` rendering of the matrix with cell counts."""
    n = len(cm.class_order)
    img = Image.new("RGB", (size, size), "white")
    draw = ImageDraw.Draw(img)
    font = ImageFont.load_default()
    margin = max(40, size // 6)
    cell = (size - margin - 4) // n
    peak = max(1, int(cm.counts.max()))
    for i in range(n):
        row_total = max(1, int(cm.counts[i].sum()))
        for j in range(n):
            v = cm.counts[i, j] / row_total
            x0, y0 = margin + j * cell, margin + i * cell
            draw.rectangle([x0, y0, x0 + cell - 1, y0 + cell - 1], fill=_blues(v), outline=(200, 200, 200))
            draw.text((x0 + 3, y0 + cell // 2 - 5), str(int(cm.counts[i, j])),
                      fill="white" if v > 0.5 else "black", font=font)
        draw.text((2, margin + i * cell + cell // 2 - 5), cm.class_order[i][: margin // 6], fill="black", font=font)
        draw.text((margin + i * cell + 2, margin - 14), cm.class_order[i][: max(1, cell // 6)], fill="black", font=font)
    draw.text((margin, 2), f"true \\ predicted  (max {peak})", fill="black", font=font)
    return img


def render_report(report: EvaluationReport, out_dir: str | Path, image_size: int = 480) -> dict[str, Path]:
    """Write ``metrics.json``, ``metrics.csv`` and ``confusion.png`` into ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "json": out_dir / "metrics.json",
            "csv": out_dir / "metrics.csv",
            "confusion": out_dir / "confusion.png",
        }
        paths["json"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        paths["csv"].write_text(metrics_csv_text([report]), encoding="utf-8")
        save_png(confusion_image(report.confusion, image_size), paths["confusion"])
    except OSError as exc:
        raise EvaluationError(f"cannot write evaluation outputs to {out_dir}: {exc}") from exc
    return paths


def load_report(path: str | Path) -> EvaluationReport:
    return EvaluationReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
