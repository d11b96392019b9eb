"""Segmentation metrics and report emitters.

IoU for a class is ``tp / (tp + fp + fn)``. A class that appears in neither the
ground truth nor the prediction has no defined IoU and is left out of the mean
rather than counted as 0 or 1.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import models
from .losses import class_alignment_loss
from .numkit.tensor import ContractError


class ConfusionMatrix:
    """K x K pixel counts; rows are ground truth, columns prediction."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, y_true, y_pred) -> "ConfusionMatrix":
        t = np.asarray(y_true, dtype=np.int64).reshape(-1)
        p = np.asarray(y_pred, dtype=np.int64).reshape(-1)
        if t.shape != p.shape:
            raise ContractError(f"truth has {t.size} pixels, prediction {p.size}")
        K = self.num_classes
        if t.size and (t.min() < 0 or p.min() < 0 or t.max() >= K or p.max() >= K):
            raise ContractError(f"class id outside [0, {K})")
        self.counts += np.bincount(t * K + p, minlength=K * K).reshape(K, K)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def iou_per_class(self) -> list[float | None]:
        return iou_per_class(self)

    def miou(self) -> float:
        return miou(self)


def accumulate(cm: ConfusionMatrix, y_true, y_pred) -> ConfusionMatrix:
    return cm.accumulate(y_true, y_pred)


def iou_per_class(cm: ConfusionMatrix) -> list[float | None]:
    c = cm.counts
    tp = np.diag(c).astype(float)
    denom = c.sum(axis=0) + c.sum(axis=1) - np.diag(c)
    return [None if d == 0 else float(t / d) for t, d in zip(tp, denom)]


def miou(cm: ConfusionMatrix) -> float:
    defined = [v for v in iou_per_class(cm) if v is not None]
    if not defined:
        raise ContractError("mIoU undefined: no class present in truth or prediction")
    return float(np.mean(defined))


def evaluate_segmentation(bundle: models.ModelBundle, images, labels, head: str = "C1") -> ConfusionMatrix:
    cm = ConfusionMatrix(bundle.config.num_classes)
    for x, y in zip(images, labels):
        f = models.extract(bundle, x)
        pred = models.predict_labels(models.classify(bundle, head, f))
        cm.accumulate(np.argmax(y, axis=0), pred)
    return cm


def target_discrepancy(bundle: models.ModelBundle, images) -> float:
    """Mean head disagreement over a fixed image set; no parameters change."""
    if len(images) == 0:
        raise ContractError("target_discrepancy needs a non-empty eval set")
    vals = []
    for x in images:
        p1, p2, _ = models.forward_seg(bundle, x)
        vals.append(class_alignment_loss(p1, p2).item())
    return float(np.mean(vals))


# -- reports -------------------------------------------------------------------------------

def summary(cm: ConfusionMatrix) -> dict:
    ious = iou_per_class(cm)
    return {"iou": ious, "miou": miou(cm), "pixels": cm.total, "confusion": cm.counts.tolist()}


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_summary_csv(cm: ConfusionMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "iou"])
        for k, v in enumerate(iou_per_class(cm)):
            w.writerow([k, "" if v is None else f"{v:.6f}"])
        w.writerow(["miou", f"{miou(cm):.6f}"])
