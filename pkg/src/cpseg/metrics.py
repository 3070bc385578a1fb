"""Confusion matrices, IoU, mIoU, pixel accuracy, and CSV reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from cpseg.exceptions import LabelError, ShapeError

REPORT_DIGITS = 4


def column_name(class_name: str) -> str:
    """Class name as a report column, e.g. ``Building-NonFlooded`` -> ``Building Non-Flooded``."""
    return class_name.replace("NonFlooded", "Non-Flooded").replace("-", " ", 1)


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, k: int) -> np.ndarray:
    """``C[i, j]`` counts pixels with ground truth ``i`` predicted as ``j``."""
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction has {pred.size} pixels, ground truth {gt.size}")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise LabelError(f"{name} labels outside [0, {k})")
    return np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)


def aggregate_confusion(conf: np.ndarray, lut: np.ndarray, k_new: int) -> np.ndarray:
    """Sum rows and columns of ``conf`` that ``lut`` maps to the same class."""
    out = np.zeros((k_new, k_new), dtype=conf.dtype)
    np.add.at(out, (lut[:, None], lut[None, :]), conf)
    return out


@dataclass
class MetricsReport:
    class_names: List[str]
    per_class_iou: np.ndarray     # nan where the class is absent from gt and prediction
    miou: float
    pixel_accuracy: float
    mean_recall: float
    confusion: np.ndarray
    runtime_seconds: Optional[float] = None

    @property
    def K(self) -> int:
        return len(self.class_names)

    @classmethod
    def from_confusion(cls, conf: np.ndarray, class_names: Sequence[str],
                       runtime_seconds: Optional[float] = None) -> "MetricsReport":
        conf = np.asarray(conf, dtype=np.int64)
        tp = np.diag(conf)
        gt_count = conf.sum(axis=1)
        pred_count = conf.sum(axis=0)
        union = gt_count + pred_count - tp
        seen = union > 0
        iou = np.full(len(tp), np.nan)
        iou[seen] = tp[seen] / union[seen]
        miou = float(iou[seen].mean()) if seen.any() else 0.0
        total = conf.sum()
        acc = float(tp.sum() / total) if total else 0.0
        has_gt = gt_count > 0
        recall = float((tp[has_gt] / gt_count[has_gt]).mean()) if has_gt.any() else 0.0
        return cls(list(class_names), iou, miou, acc, recall, conf, runtime_seconds)

    @classmethod
    def from_masks(cls, preds, gts, class_names: Sequence[str]) -> "MetricsReport":
        k = len(class_names)
        conf = np.zeros((k, k), dtype=np.int64)
        for p, g in zip(preds, gts):
            conf += confusion_matrix(p, g, k)
        return cls.from_confusion(conf, class_names)

    def row(self, method: str = "CPSeg") -> dict:
        """One per-class report row in percent; absent classes are left blank."""
        pct = lambda x: f"{100 * x:.{REPORT_DIGITS}f}"
        out = {"Method": method}
        for name, v in zip(self.class_names, self.per_class_iou):
            out[column_name(name)] = "" if np.isnan(v) else pct(v)
        out["mIoU"] = pct(self.miou)
        out["Pixel Accuracy"] = pct(self.pixel_accuracy)
        out["Mean Class Recall (extra)"] = pct(self.mean_recall)
        if self.runtime_seconds is not None:
            out["Seconds per Image"] = f"{self.runtime_seconds:.6f}"
        return out

    def to_csv(self, method: str = "CPSeg") -> str:
        return rows_to_csv([self.row(method)])


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
