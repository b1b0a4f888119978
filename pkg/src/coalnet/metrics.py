"""Confusion matrices, recognition rate, per-class recall and precision."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .augment import NormalizationStats, prepare_input
from .core import CLASS_NAMES, DatasetManifest, read_pgm
from .detect import DetectParams, detect_and_crop
from .errors import LabelOutOfRange, LengthMismatch


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts indexed ``m[true][pred]``."""

    counts: np.ndarray

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_list(self) -> list[list[int]]:
        return self.counts.astype(int).tolist()


@dataclass(frozen=True)
class MetricsReport:
    recg: float
    rec: np.ndarray
    pre: np.ndarray
    classes: tuple[str, ...] = CLASS_NAMES

    def to_dict(self, confusion: ConfusionMatrix | None = None) -> dict:
        d = {
            "recg": self.recg,
            "rec": {c: float(v) for c, v in zip(self.classes, self.rec)},
            "pre": {c: float(v) for c, v in zip(self.classes, self.pre)},
        }
        if confusion is not None:
            d["confusion"] = confusion.to_list()
        return d

    def format(self) -> str:
        lines = [f"recg {self.recg:.4f}"]
        for c, r, p in zip(self.classes, self.rec, self.pre):
            lines.append(f"{c:<11} rec {r:.4f} pre {p:.4f}")
        return "\n".join(lines)


def confusion(true_labels: Sequence[int], pred_labels: Sequence[int], k: int = 3) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64).ravel()
    p = np.asarray(pred_labels, dtype=np.int64).ravel()
    if t.size == 0 or t.size != p.size:
        raise LengthMismatch(f"need equal non-empty label vectors, got {t.size} and {p.size}")
    if min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= k:
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def compute_metrics(m: ConfusionMatrix, classes: Sequence[str] | None = None) -> MetricsReport:
    """Recognition rate trace/total; recall over rows, precision over columns.

    A class with an empty row or column gets 0 for that value.
    """
    c = m.counts.astype(np.float64)
    diag = np.diag(c)
    rows, cols = c.sum(axis=1), c.sum(axis=0)
    total = c.sum()
    recg = float(diag.sum() / total) if total else 0.0
    rec = np.divide(diag, rows, out=np.zeros_like(diag), where=rows > 0)
    pre = np.divide(diag, cols, out=np.zeros_like(diag), where=cols > 0)
    if classes is None:
        classes = CLASS_NAMES if m.k == len(CLASS_NAMES) else tuple(str(i) for i in range(m.k))
    return MetricsReport(recg, rec, pre, tuple(classes))


def report_json(m: ConfusionMatrix, report: MetricsReport) -> str:
    return json.dumps(report.to_dict(m), indent=2)


def evaluate(predict: Callable[[np.ndarray], np.ndarray], manifest: DatasetManifest, stats: NormalizationStats,
             input_size: int = 64, detect: DetectParams | None = DetectParams(), k: int = 3):
    """Single-crop evaluation: detect and crop, resize, normalise, argmax.

    ``predict`` maps a batch [B, 1, H, W] to scores [B, K]; the lowest index
    wins ties. Pass ``detect=None`` to skip the crop stage.
    """
    preds = []
    for rec in manifest.records:
        img = read_pgm(manifest.resolve(rec))
        if detect is not None:
            img = detect_and_crop(img, detect)
        x = prepare_input(img, input_size, stats)[None]
        preds.append(int(np.argmax(predict(x)[0])))
    m = confusion(manifest.labels(), preds, k)
    return m, compute_metrics(m)
