"""Soft Dice loss and the per-class Dice / Hausdorff evaluation metrics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .autograd import ShapeError, Tensor, as_tensor

DICE_EPS = 1e-6
CLASS_NAMES = ("background", "LA", "RA", "LV", "RV")


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(B, H, W) integer labels -> (B, K, H, W) indicator array."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    return (labels[:, None] == np.arange(num_classes)[None, :, None, None]).astype(dtype)


def dice_loss(probs, target, eps: float = DICE_EPS) -> Tensor:
    """``1 - mean_{b,k} (2 sum p t + eps) / (sum p + sum t + eps)`` with one-hot ``t``."""
    probs = as_tensor(probs)
    if probs.ndim != 4:
        raise ShapeError(f"probs must be (B, K, H, W), got {probs.shape}")
    target = np.asarray(target)
    if target.shape != (probs.shape[0],) + probs.shape[2:]:
        raise ShapeError(f"target shape {target.shape} does not match probs {probs.shape}")
    t = Tensor(one_hot(target, probs.shape[1], probs.dtype))
    inter = (probs * t).sum(axis=(2, 3))
    denom = probs.sum(axis=(2, 3)) + Tensor(t.data.sum(axis=(2, 3)))
    ratio = (inter * 2.0 + eps) / (denom + eps)
    return 1.0 - ratio.mean()


def argmax_labels(probs) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest index."""
    return np.argmax(as_tensor(probs).data, axis=1)


def dice_score(pred: np.ndarray, gt: np.ndarray, k: int) -> float:
    """``2|P & G| / (|P| + |G|)`` for class ``k``; 1.0 when both are empty."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    p, g = pred == k, gt == k
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the mask."""
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def _directed(src: np.ndarray, dst: np.ndarray, sampling) -> float:
    # distance from every pixel to the nearest dst pixel, read off at src pixels
    dist = ndimage.distance_transform_edt(~dst, sampling=sampling)
    return float(dist[src].max())


def hausdorff(pred: np.ndarray, gt: np.ndarray, k: int, spacing=1.0, boundary_only: bool = False) -> float:
    """Exact symmetric Hausdorff distance between the class-``k`` pixel sets.

    Distances are Euclidean between pixel centres, scaled by ``spacing``
    (scalar or per-axis). Returns NaN when either set is empty.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    p, g = pred == k, gt == k
    if boundary_only:
        p, g = boundary(p), boundary(g)
    if not p.any() or not g.any():
        return math.nan
    sampling = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (pred.ndim,))
    return max(_directed(p, g, sampling), _directed(g, p, sampling))


@dataclass
class EvalReport:
    dice: dict[str, float]
    hd: dict[str, float]
    class_names: tuple[str, ...] = CLASS_NAMES[1:]
    extra: dict = field(default_factory=dict)

    @property
    def mean_dice(self) -> float:
        return float(np.mean([self.dice[c] for c in self.class_names]))

    @property
    def mean_hd(self) -> float:
        vals = [self.hd[c] for c in self.class_names if not math.isnan(self.hd[c])]
        return float(np.mean(vals)) if vals else math.nan

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v
        return {
            "dice": {c: self.dice[c] for c in self.class_names} | {"avg": self.mean_dice},
            "hd": {c: clean(self.hd[c]) for c in self.class_names} | {"avg": clean(self.mean_hd)},
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        cols = list(self.class_names) + ["Avg"]
        dice = [self.dice[c] for c in self.class_names] + [self.mean_dice]
        hd = [self.hd[c] for c in self.class_names] + [self.mean_hd]
        head = f"{'':<8}" + "".join(f"{c:>9}" for c in cols)
        fmt = lambda v: f"{'n/a':>9}" if math.isnan(v) else f"{v:>9.2f}"
        return "\n".join([
            head,
            f"{'Dice %':<8}" + "".join(fmt(100 * v) for v in dice),
            f"{'HD':<8}" + "".join(fmt(v) for v in hd),
        ])


def evaluate(preds, gts, num_classes: int = 5, spacing=1.0, boundary_only: bool = False,
             class_names=None) -> EvalReport:
    """Average per-class Dice and HD over label-map pairs (HD skips undefined cases)."""
    names = tuple(class_names or CLASS_NAMES[1:num_classes])
    dice = {c: [] for c in names}
    hd = {c: [] for c in names}
    for p, g in zip(preds, gts):
        for k, c in enumerate(names, start=1):
            dice[c].append(dice_score(p, g, k))
            hd[c].append(hausdorff(p, g, k, spacing, boundary_only))
    mean_hd = {}
    for c in names:
        vals = [v for v in hd[c] if not math.isnan(v)]
        mean_hd[c] = float(np.mean(vals)) if vals else math.nan
    return EvalReport({c: float(np.mean(dice[c])) for c in names}, mean_hd, names)
