"""Eroded-boundary scoring: confusion matrix, per-class F1/IoU, PR curves."""
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


def boundary_pixels(gt):
    """True where a pixel has a 4-neighbour of a different class."""
    gt = np.asarray(gt)
    b = np.zeros(gt.shape, dtype=bool)
    dv = gt[1:, :] != gt[:-1, :]
    dh = gt[:, 1:] != gt[:, :-1]
    b[1:, :] |= dv
    b[:-1, :] |= dv
    b[:, 1:] |= dh
    b[:, :-1] |= dh
    return b


def erode_boundaries(gt, radius=3):
    """Ignore mask: pixels within Euclidean distance ``radius`` of a boundary pixel."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    b = boundary_pixels(gt)
    if not b.any():
        return b
    dist = ndimage.distance_transform_edt(~b)
    return dist <= radius


def confusion_matrix(pred, gt, num_classes, mask=None):
    """K x K counts, rows = ground truth, over pixels where ``mask`` is False."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if mask is not None:
        keep = ~np.asarray(mask, dtype=bool).ravel()
        pred, gt = pred[keep], gt[keep]
    idx = gt.astype(np.int64) * num_classes + pred.astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def _ratio(num, den):
    return np.divide(num, den, out=np.zeros(len(num)), where=den > 0)


@dataclass
class EvalReport:
    confusion: np.ndarray
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        c = np.asarray(self.confusion, dtype=np.int64)
        self.confusion = c
        k = c.shape[0]
        if not self.class_names:
            self.class_names = [f"class{i}" for i in range(k)]
        tp = np.diag(c).astype(np.float64)
        fp = c.sum(axis=0) - tp
        fn = c.sum(axis=1) - tp
        self.tp, self.fp, self.fn = tp, fp, fn
        self.precision = _ratio(tp, tp + fp)
        self.recall = _ratio(tp, tp + fn)
        self.f1 = _ratio(2 * tp, 2 * tp + fp + fn)
        self.iou = _ratio(tp, tp + fp + fn)
        # classes absent from both ground truth and prediction are skipped
        self.present = (tp + fp + fn) > 0
        total = c.sum()
        self.overall_accuracy = float(tp.sum() / total) if total else 0.0

    @property
    def mean_f1(self):
        return float(self.f1[self.present].mean()) if self.present.any() else 0.0

    @property
    def mean_iou(self):
        return float(self.iou[self.present].mean()) if self.present.any() else 0.0

    def __add__(self, other):
        return EvalReport(self.confusion + other.confusion, self.class_names)

    def to_dict(self):
        per_class = {
            name: {
                "precision": float(self.precision[i]),
                "recall": float(self.recall[i]),
                "f1": float(self.f1[i]),
                "iou": float(self.iou[i]),
                "present": bool(self.present[i]),
            }
            for i, name in enumerate(self.class_names)
        }
        return {
            "confusion": self.confusion.tolist(),
            "classes": per_class,
            "mean_f1": self.mean_f1,
            "mean_iou": self.mean_iou,
            "overall_accuracy": self.overall_accuracy,
            "pixels": int(self.confusion.sum()),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self):
        width = max(10, max(len(n) for n in self.class_names))
        lines = [f"{'class':<{width}}  {'prec':>7}  {'rec':>7}  {'F1':>7}  {'IoU':>7}"]
        for i, name in enumerate(self.class_names):
            mark = "" if self.present[i] else "  (absent)"
            lines.append(
                f"{name:<{width}}  {self.precision[i]:7.4f}  {self.recall[i]:7.4f}  "
                f"{self.f1[i]:7.4f}  {self.iou[i]:7.4f}{mark}"
            )
        lines.append(f"{'mean':<{width}}  {'':>7}  {'':>7}  {self.mean_f1:7.4f}  {self.mean_iou:7.4f}")
        lines.append(f"overall accuracy {self.overall_accuracy:.4f} over {int(self.confusion.sum())} pixels")
        return "\n".join(lines) + "\n"


def score(pred, gt, mask=None, num_classes=None, class_names=None):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    if mask is not None and np.shape(mask) != gt.shape:
        raise ValueError(f"mask shape {np.shape(mask)} does not match ground truth {gt.shape}")
    if num_classes is None:
        num_classes = len(class_names) if class_names else int(max(pred.max(), gt.max())) + 1
    return EvalReport(confusion_matrix(pred, gt, num_classes, mask), list(class_names or []))


def default_thresholds(n=101):
    return np.linspace(0.0, 1.0, n)


def pr_curve(prob, gt, mask, class_k, thresholds=None):
    """``[(t, precision, recall), ...]`` for ``prob[class_k] >= t``.

    Pixels are sorted once by score so every threshold is a prefix count.
    """
    thresholds = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(thresholds) < 0):
        raise ValueError("thresholds must be sorted ascending")
    scores = np.asarray(prob)[class_k].ravel()
    positive = (np.asarray(gt) == class_k).ravel()
    if mask is not None:
        keep = ~np.asarray(mask, dtype=bool).ravel()
        scores, positive = scores[keep], positive[keep]
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    tp_cum = np.concatenate([[0], np.cumsum(positive[order])])
    n_pos = int(positive.sum())
    out = []
    for t in thresholds:
        # number of pixels with score >= t
        k = int(np.searchsorted(-s_sorted, -t, side="right"))
        tp = int(tp_cum[k])
        fp = k - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / n_pos if n_pos else 0.0
        out.append((float(t), precision, recall))
    return out


def pr_csv(curves, class_names):
    """``curves`` maps class index -> samples; returns CSV text."""
    lines = ["class,threshold,precision,recall"]
    for k in sorted(curves):
        for t, p, r in curves[k]:
            lines.append(f"{class_names[k]},{t:.4f},{p:.8f},{r:.8f}")
    return "\n".join(lines) + "\n"
