"""Segmentation quality metrics via an accumulating confusion matrix.

The matrix is K x K int64 with reference labels on rows and predictions on
columns. Shards accumulated on different data splits merge by addition, so
evaluation can be tiled or parallelized without changing any score.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, ShapeError
from .losses import IGNORE_LABEL


class ConfusionMatrix:
    def __init__(self, num_classes: int, class_names: list[str] | None = None,
                 ignore_label: int = IGNORE_LABEL):
        if num_classes < 2:
            raise ShapeError(f"need at least two classes, got {num_classes}")
        if class_names is not None and len(class_names) != num_classes:
            raise ShapeError(f"{len(class_names)} names for {num_classes} classes")
        self.num_classes = num_classes
        self.class_names = class_names or [f"class{i}" for i in range(num_classes)]
        self.ignore_label = ignore_label
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, prediction: np.ndarray, reference: np.ndarray) -> None:
        """Tally one prediction/reference pair (any matching int shapes)."""
        prediction = np.asarray(prediction)
        reference = np.asarray(reference)
        if prediction.shape != reference.shape:
            raise ShapeError(
                f"prediction {prediction.shape} != reference {reference.shape}")
        if not np.issubdtype(prediction.dtype, np.integer) or \
                not np.issubdtype(reference.dtype, np.integer):
            raise ShapeError("labels must be integer-typed")
        k = self.num_classes
        valid = reference != self.ignore_label
        ref = reference[valid]
        pred = prediction[valid]
        if ref.size and (ref.min() < 0 or ref.max() >= k):
            raise DataError(f"reference labels outside [0, {k})")
        if pred.size and (pred.min() < 0 or pred.max() >= k):
            raise DataError(f"predicted labels outside [0, {k})")
        counts = np.bincount(ref.astype(np.int64) * k + pred, minlength=k * k)
        self.matrix += counts.reshape(k, k)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge matrices of different sizes")
        self.matrix += other.matrix
        return self

    # -- scores --------------------------------------------------------------

    def _tp_fp_fn(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        tp = np.diag(self.matrix).astype(np.float64)
        fp = self.matrix.sum(axis=0) - tp
        fn = self.matrix.sum(axis=1) - tp
        return tp, fp, fn

    def overall_accuracy(self) -> float:
        total = self.matrix.sum()
        if total == 0:
            return 0.0
        return float(np.trace(self.matrix) / total)

    def f1(self) -> np.ndarray:
        """Per-class F1; NaN where the class never occurs on either side."""
        tp, fp, fn = self._tp_fp_fn()
        denom = 2 * tp + fp + fn
        with np.errstate(invalid="ignore"):
            return np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), np.nan)

    def iou(self) -> np.ndarray:
        """Per-class intersection over union; NaN where the class is absent."""
        tp, fp, fn = self._tp_fp_fn()
        denom = tp + fp + fn
        with np.errstate(invalid="ignore"):
            return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)

    def inclusion_mask(self, include: "list[int | str] | None" = None) -> np.ndarray:
        """Boolean mask of classes that count toward the mean scores.

        A class is included when it occurs on either side of the matrix
        (otherwise its F1/IoU are undefined) and, if `include` is given,
        when it is listed there by index or name.
        """
        tp, fp, fn = self._tp_fp_fn()
        mask = (tp + fp + fn) > 0
        if include is not None:
            chosen = np.zeros(self.num_classes, dtype=bool)
            for item in include:
                if isinstance(item, str):
                    if item not in self.class_names:
                        raise DataError(f"unknown class name {item!r}")
                    chosen[self.class_names.index(item)] = True
                else:
                    if not 0 <= int(item) < self.num_classes:
                        raise DataError(f"class index {item} outside "
                                        f"[0, {self.num_classes})")
                    chosen[int(item)] = True
            mask &= chosen
        return mask

    def scores(self, include: "list[int | str] | None" = None) -> dict[str, float]:
        """Flat metric dict; means cover exactly `inclusion_mask` classes.

        The mask itself is exposed as included.<name> entries (1.0/0.0) so
        a report states which classes its means were computed over.
        """
        f1 = self.f1()
        iou = self.iou()
        mask = self.inclusion_mask(include)
        out = {"oa": self.overall_accuracy(),
               "mean_f1": float(f1[mask].mean()) if mask.any() else 0.0,
               "miou": float(iou[mask].mean()) if mask.any() else 0.0}
        for name, value in zip(self.class_names, f1):
            out[f"f1.{name}"] = float(value)
        for name, value in zip(self.class_names, iou):
            out[f"iou.{name}"] = float(value)
        for name, flag in zip(self.class_names, mask):
            out[f"included.{name}"] = float(flag)
        return out


def accumulate_confusion(matrix: ConfusionMatrix, prediction: np.ndarray,
                         reference: np.ndarray) -> ConfusionMatrix:
    """Tally a prediction/reference pair into `matrix` and return it."""
    matrix.update(prediction, reference)
    return matrix


def compute_metrics(matrix: ConfusionMatrix,
                    include: "list[int | str] | None" = None) -> dict[str, float]:
    """Score dict for an accumulated confusion matrix."""
    return matrix.scores(include)
