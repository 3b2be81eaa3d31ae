"""Confusion matrix, precision/recall/F1, weighted F1, accuracy and report files.

Rows are the true class, columns the predicted class, everywhere.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import plotly.graph_objects as go

from errors import FormatError, InputError

logger = logging.getLogger(__name__)

CELL_PX = 32
AXES_NOTE = "rows = true class, columns = predicted class"
WEIGHTED_F1_SCHEME = "support"


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = self.counts.shape[0] if self.counts.ndim == 2 else -1
        if self.counts.ndim != 2 or self.counts.shape != (k, k) or k < 1:
            raise InputError(f"confusion matrix must be K x K, got shape {self.counts.shape}")
        if (self.counts < 0).any():
            raise InputError("confusion matrix entries must be non-negative")
        if not self.class_names:
            self.class_names = tuple(f"class_{c}" for c in range(k))
        self.class_names = tuple(self.class_names)
        if len(self.class_names) != k:
            raise InputError(f"{len(self.class_names)} class names for a {k}-class matrix")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.class_names != other.class_names:
            raise InputError(f"cannot add matrices over {self.class_names} and {other.class_names}")
        return ConfusionMatrix(self.counts + other.counts, self.class_names)

    def row_normalized(self) -> np.ndarray:
        rows = self.support.astype(np.float64)[:, None]
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["true\\predicted", *self.class_names])
        for name, row in zip(self.class_names, self.counts):
            writer.writerow([name, *(int(v) for v in row)])
        return buffer.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ConfusionMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or len(rows[0]) < 2:
            raise FormatError("confusion CSV has no header")
        names = tuple(rows[0][1:])
        body = rows[1:]
        if len(body) != len(names) or any(len(r) != len(names) + 1 for r in body):
            raise FormatError(f"confusion CSV is not {len(names)} x {len(names)}")
        if tuple(r[0] for r in body) != names:
            raise FormatError("confusion CSV row names differ from column names")
        try:
            counts = [[int(v) for v in r[1:]] for r in body]
        except ValueError:
            raise FormatError("confusion CSV cells must be integers") from None
        return cls(np.asarray(counts), names)


def confusion_matrix(
    true_labels: Sequence[int], predicted_labels: Sequence[int], num_classes: int, class_names: Sequence[str] = ()
) -> ConfusionMatrix:
    true = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    pred = np.asarray(predicted_labels, dtype=np.int64).reshape(-1)
    if true.shape != pred.shape:
        raise InputError(f"{true.size} true labels but {pred.size} predictions")
    if num_classes < 1:
        raise InputError(f"number of classes must be >= 1, got {num_classes}")
    for name, labels in (("true", true), ("predicted", pred)):
        bad = (labels < 0) | (labels >= num_classes)
        if bad.any():
            raise InputError(f"{name} label {int(labels[bad][0])} outside [0, {num_classes})")
    counts = np.bincount(true * num_classes + pred, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes), tuple(class_names))


@dataclass(frozen=True)
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int
    precision_undefined: bool = False
    recall_undefined: bool = False
    f1_undefined: bool = False

    @property
    def undefined(self) -> bool:
        return self.precision_undefined or self.recall_undefined or self.f1_undefined


def per_class_prf(cm: ConfusionMatrix) -> list[ClassScores]:
    """Precision, recall and F1 per class; zero denominators give 0 and set the matching flag."""
    tp = np.diag(cm.counts).astype(np.float64)
    predicted = cm.counts.sum(axis=0).astype(np.float64)
    actual = cm.counts.sum(axis=1).astype(np.float64)
    scores = []
    for c in range(cm.num_classes):
        precision = tp[c] / predicted[c] if predicted[c] > 0 else 0.0
        recall = tp[c] / actual[c] if actual[c] > 0 else 0.0
        denom = precision + recall
        f1 = 2 * precision * recall / denom if denom > 0 else 0.0
        scores.append(
            ClassScores(
                float(precision),
                float(recall),
                float(f1),
                int(actual[c]),
                precision_undefined=bool(predicted[c] == 0),
                recall_undefined=bool(actual[c] == 0),
                f1_undefined=bool(denom == 0),
            )
        )
    return scores


def _require_samples(cm: ConfusionMatrix) -> None:
    if cm.total == 0:
        raise InputError("confusion matrix is empty")


def accuracy(cm: ConfusionMatrix) -> float:
    _require_samples(cm)
    return float(np.trace(cm.counts)) / cm.total


def weighted_f1(cm: ConfusionMatrix) -> float:
    """Support-weighted mean of per-class F1."""
    _require_samples(cm)
    scores = per_class_prf(cm)
    return float(sum(s.support * s.f1 for s in scores)) / cm.total


def top_confusions(cm: ConfusionMatrix, n: int = 5) -> list[tuple[str, str, int]]:
    """Largest off-diagonal cells as (true, predicted, count), ties in row-major order."""
    cells = [
        (-int(cm.counts[t, p]), t, p)
        for t in range(cm.num_classes)
        for p in range(cm.num_classes)
        if t != p and cm.counts[t, p] > 0
    ]
    return [(cm.class_names[t], cm.class_names[p], -neg) for neg, t, p in sorted(cells)[:n]]


@dataclass
class MetricsReport:
    accuracy: float
    weighted_f1: float
    per_class: list[ClassScores]
    class_names: tuple[str, ...]
    total: int
    top_confusions: list[tuple[str, str, int]] = field(default_factory=list)

    def scores_for(self, index: int) -> ClassScores:
        return self.per_class[index]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "weighted_f1_scheme": WEIGHTED_F1_SCHEME,
            "axes": AXES_NOTE,
            "total": self.total,
            "per_class": [
                {
                    "class": name,
                    "precision": s.precision,
                    "recall": s.recall,
                    "f1": s.f1,
                    "support": s.support,
                    "precision_undefined": s.precision_undefined,
                    "recall_undefined": s.recall_undefined,
                    "f1_undefined": s.f1_undefined,
                }
                for name, s in zip(self.class_names, self.per_class)
            ],
            "top_confusions": [{"true": t, "predicted": p, "count": n} for t, p, n in self.top_confusions],
        }


def build_report(cm: ConfusionMatrix, n_confusions: int = 5) -> MetricsReport:
    return MetricsReport(
        accuracy=accuracy(cm),
        weighted_f1=weighted_f1(cm),
        per_class=per_class_prf(cm),
        class_names=cm.class_names,
        total=cm.total,
        top_confusions=top_confusions(cm, n_confusions),
    )


def heatmap_pixels(cm: ConfusionMatrix, cell_px: int = CELL_PX) -> np.ndarray:
    """Row-normalised grayscale image: an empty cell is white (255), a full row fraction black (0)."""
    shade = np.rint(255 * cm.row_normalized()).astype(np.int64)
    gray = (255 - shade).astype(np.uint8)
    return np.kron(gray, np.ones((cell_px, cell_px), dtype=np.uint8))


def pgm_bytes(image: np.ndarray) -> bytes:
    height, width = image.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + image.astype(np.uint8).tobytes()


def confusion_figure(cm: ConfusionMatrix, title: str = "Confusion matrix") -> go.Figure:
    """Interactive heatmap of the row-normalised matrix annotated with raw counts."""
    heat = go.Heatmap(
        z=cm.row_normalized(),
        x=list(cm.class_names),
        y=list(cm.class_names),
        text=cm.counts.tolist(),
        texttemplate="%{text}",
        colorscale="Blues",
        zmin=0,
        zmax=1,
        hovertemplate="true %{y}<br>predicted %{x}<br>count %{text}<extra></extra>",
    )
    fig = go.Figure(data=[heat])
    fig.update_layout(
        title=title,
        xaxis_title="Predicted class",
        yaxis_title="True class",
        yaxis=dict(autorange="reversed"),
        margin=dict(l=0, r=0, t=50, b=0),
    )
    return fig


def _write(path: Path, payload: bytes) -> Path:
    try:
        path.write_bytes(payload)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def render_report(cm: ConfusionMatrix, report: MetricsReport, out_dir: str | Path) -> dict[str, Path]:
    """Write confusion.csv, metrics.json, confusion.pgm and confusion.html into out_dir."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out_dir}: {exc.strerror}") from exc
    written = {
        "csv": _write(out_dir / "confusion.csv", cm.to_csv().encode("utf-8")),
        "json": _write(
            out_dir / "metrics.json", (json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n").encode("utf-8")
        ),
        "pgm": _write(out_dir / "confusion.pgm", pgm_bytes(heatmap_pixels(cm))),
    }
    html = confusion_figure(cm).to_html(include_plotlyjs="cdn", full_html=True, div_id="confusion-matrix")
    written["html"] = _write(out_dir / "confusion.html", html.encode("utf-8"))
    logger.info("report written to %s (accuracy %.4f, weighted F1 %.4f)", out_dir, report.accuracy, report.weighted_f1)
    return written
