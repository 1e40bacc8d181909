"""Confusion-matrix IoU evaluation."""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import ConfigurationError, DataError
from .losses import IGNORE_LABEL


class ConfusionMatrix:
    """Entry (i, j) counts pixels with ground truth i predicted as j."""

    def __init__(self, n_classes):
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), np.int64)

    def accumulate(self, pred, gt):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ConfigurationError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        keep = gt != IGNORE_LABEL
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        if g.size and (g.max() >= self.n_classes or p.max() >= self.n_classes or p.min() < 0):
            raise DataError(f"class index outside [0, {self.n_classes - 1}]")
        self.counts += np.bincount(g * self.n_classes + p,
                                   minlength=self.n_classes ** 2).reshape(self.n_classes, self.n_classes)
        return self

    def merge(self, other):
        if other.n_classes != self.n_classes:
            raise ConfigurationError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        return self

    @property
    def total(self):
        return int(self.counts.sum())


def accumulate(cm, prob_or_pred, gt):
    """Add one image; a [C,H,W] probability map is reduced by argmax (ties go to the lowest class)."""
    arr = np.asarray(prob_or_pred.data if isinstance(prob_or_pred, T.Tensor) else prob_or_pred)
    if arr.ndim == 3:
        arr = arr.argmax(axis=0)
    return cm.accumulate(arr, gt)


@dataclass
class IoUReport:
    iou: list
    miou: float
    n_images: int = 0

    @property
    def n_classes(self):
        return len(self.iou)

    def to_csv(self):
        lines = ["class,iou"]
        for c, v in enumerate(self.iou):
            lines.append(f"{c}," + ("" if v is None else f"{v:.6f}"))
        lines.append("miou," + ("" if self.miou is None else f"{self.miou:.6f}"))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text):
        iou, miou = [], None
        for line in text.strip().splitlines()[1:]:
            key, _, val = line.partition(",")
            v = float(val) if val.strip() else None
            if key == "miou":
                miou = v
            else:
                iou.append(v)
        return cls(iou=iou, miou=miou)


def iou_report(cm, n_images=0):
    """Per-class TP / (TP + FP + FN); classes with an empty union are undefined and skipped."""
    counts = cm.counts
    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    iou = [float(tp[c] / union[c]) if union[c] > 0 else None for c in range(cm.n_classes)]
    defined = [v for v in iou if v is not None]
    miou = float(np.mean(defined)) if defined else None
    return IoUReport(iou=iou, miou=miou, n_images=n_images)


def miou_gap(adapted, oracle):
    if adapted.n_classes != oracle.n_classes:
        raise ConfigurationError(
            f"reports cover {adapted.n_classes} and {oracle.n_classes} classes")
    return adapted.miou - oracle.miou


def predict_labels(G, images):
    """Argmax of the main-head output for each [3,H,W] image."""
    out = []
    for img in images:
        prob = G(T.Tensor(np.asarray(img, np.float32)[None]))["P1"]
        out.append(prob.data[0].argmax(axis=0))
    return out


def evaluate(G, samples):
    """mIoU of G's main head over labeled samples."""
    if not samples:
        raise ConfigurationError("cannot evaluate on an empty split")
    cm = ConfusionMatrix(G.spec.n_classes)
    for s, pred in zip(samples, predict_labels(G, [s.image for s in samples])):
        cm.accumulate(pred, s.labels)
    return iou_report(cm, n_images=len(samples))


def evaluate_checkpoint(path, config, data, split="target_test", force=False):
    from .synth import load_split
    from .trainer import load_checkpoint

    trainer = load_checkpoint(path, config, force=force)
    return evaluate(trainer.G, load_split(data, split))
