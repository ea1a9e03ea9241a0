"""Change-detection (PCC1) and classification (PCC2) accuracy."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, UndefinedMetricError


@dataclass(frozen=True)
class ChangeConfusion:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def as_dict(self) -> dict[str, int]:
        return {"TP": self.tp, "TN": self.tn, "FP": self.fp, "FN": self.fn}


@dataclass(frozen=True)
class ClassConfusion:
    cc: int
    ic: int
    # class index -> (correct, incorrect), keyed by the true class
    per_class: dict[int, tuple[int, int]] = field(default_factory=dict)

    def class_accuracy(self, cls: int) -> float:
        good, bad = self.per_class.get(cls, (0, 0))
        return good / (good + bad) if good + bad else float("nan")

    def as_dict(self) -> dict:
        return {
            "CC": self.cc,
            "IC": self.ic,
            "per_class": {str(k): {"CC": v[0], "IC": v[1]} for k, v in sorted(self.per_class.items())},
        }


def argmax_map(probs: np.ndarray) -> np.ndarray:
    """Class index per pixel over the channel axis of (N, C, H, W) or (C, H, W).

    Ties go to the lowest class index.
    """
    probs = np.asarray(probs)
    if probs.ndim not in (3, 4):
        raise DimensionError(f"argmax_map expects (C, H, W) or (N, C, H, W), got {probs.shape}")
    return probs.argmax(axis=-3)


def pcc1(pred_mask: np.ndarray, truth_mask: np.ndarray) -> tuple[float, ChangeConfusion]:
    """(TP + TN) / (TP + FP + TN + FN) over changed/unchanged pixel masks."""
    pred = np.asarray(pred_mask, dtype=bool)
    truth = np.asarray(truth_mask, dtype=bool)
    if pred.shape != truth.shape:
        raise DimensionError(f"pcc1: predicted mask {pred.shape} vs truth {truth.shape}")
    if pred.size == 0:
        raise UndefinedMetricError("pcc1 of empty masks is undefined")
    tp = int(np.count_nonzero(pred & truth))
    tn = int(np.count_nonzero(~pred & ~truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    conf = ChangeConfusion(tp, tn, fp, fn)
    return (tp + tn) / conf.total, conf


def pcc2(
    pred_classes: np.ndarray, truth_classes: np.ndarray, mask: np.ndarray | None = None
) -> tuple[float, ClassConfusion]:
    """CC / (CC + IC), over all pixels or only those selected by ``mask``."""
    pred = np.asarray(pred_classes)
    truth = np.asarray(truth_classes)
    if pred.shape != truth.shape:
        raise DimensionError(f"pcc2: predicted classes {pred.shape} vs truth {truth.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != truth.shape:
            raise DimensionError(f"pcc2: mask {mask.shape} vs truth {truth.shape}")
        pred, truth = pred[mask], truth[mask]
    if truth.size == 0:
        raise UndefinedMetricError("pcc2 over an empty pixel set is undefined")
    correct = pred == truth
    per_class = {}
    for cls in np.unique(truth):
        sel = truth == cls
        good = int(np.count_nonzero(correct & sel))
        per_class[int(cls)] = (good, int(np.count_nonzero(sel)) - good)
    cc = int(np.count_nonzero(correct))
    conf = ClassConfusion(cc, int(truth.size) - cc, per_class)
    return cc / truth.size, conf
