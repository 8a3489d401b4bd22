"""Segmentation evaluation: confusion-matrix accumulation and mean IoU.

Ignore-label pixels never enter the matrix; classes absent from both the
prediction and the truth are excluded from the mean.
"""

from __future__ import annotations

import numpy as np


class ConfusionMatrix:
    def __init__(self, num_classes: int, ignore_label: int = 255):
        self.num_classes = num_classes
        self.ignore_label = ignore_label
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, truth: np.ndarray):
        pred = np.asarray(pred).reshape(-1).astype(np.int64)
        truth = np.asarray(truth).reshape(-1).astype(np.int64)
        if pred.shape != truth.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
        keep = truth != self.ignore_label
        pred, truth = pred[keep], truth[keep]
        idx = truth * self.num_classes + pred
        self.counts += np.bincount(idx, minlength=self.num_classes ** 2).reshape(
            self.num_classes, self.num_classes)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        assert other.num_classes == self.num_classes
        self.counts += other.counts
        return self

    def iou(self):
        """Per-class IoU (NaN where a class is absent from both sides) and mean."""
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        union = tp + fp + fn
        ious = np.full(self.num_classes, np.nan)
        present = union > 0
        ious[present] = tp[present] / union[present]
        mean = float(np.mean(ious[present])) if present.any() else 0.0
        return ious, mean


def miou(pred: np.ndarray, truth: np.ndarray, num_classes: int, ignore_label: int = 255):
    cm = ConfusionMatrix(num_classes, ignore_label)
    cm.update(pred, truth)
    return cm.iou()
