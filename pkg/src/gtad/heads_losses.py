"""Occupancy decoder, per-voxel heads, the segmentation loss stack, and mIoU.

The decoder upsamples the voxel volume by (4, 4, 2) over three stages of
nearest-neighbour upsampling plus pointwise channel mixing; the contract
is the scale factors and differentiability, not a particular kernel
algebra.  Heads are pointwise two-layer MLPs with softplus in the middle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import ParamStore, Rng, ShapeError, Tensor


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    """Weights for the focal / Lovasz / foreground-mask terms."""

    focal: float = 1.0
    lovasz: float = 1.0
    thing: float = 0.5

    def __post_init__(self):
        if min(self.focal, self.lovasz, self.thing) < 0:
            raise MetricError("loss weights must be non-negative")
        if max(self.focal, self.lovasz, self.thing) <= 0:
            raise MetricError("at least one loss weight must be positive")


@dataclass
class OccupancyVolume:
    """Decoded per-voxel class logits plus argmax labels (0 = empty)."""

    logits: Tensor
    fg_logits: Tensor | None = None

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.logits.data, axis=-1)


class UpsampleDecoder:
    """Three-stage learned upsampling: x2/x2 in-plane, then x2 vertical."""

    STAGE_FACTORS = ((2, 2, 1), (2, 2, 1), (1, 1, 2))

    def __init__(self, store: ParamStore, prefix: str, in_dim: int,
                 hidden_dim: int, out_dim: int, rng: Rng):
        dims = [in_dim, hidden_dim, hidden_dim, out_dim]
        self.weights = []
        self.biases = []
        for s in range(3):
            self.weights.append(store.param(f"{prefix}.w{s}", (dims[s], dims[s + 1]),
                                            rng.child(f"w{s}")))
            self.biases.append(store.param(f"{prefix}.b{s}", (dims[s + 1],)))

    def __call__(self, feats: Tensor) -> Tensor:
        x = feats
        for s, factors in enumerate(self.STAGE_FACTORS):
            for axis, f in enumerate(factors):
                if f > 1:
                    x = nm.repeat_axis(x, f, axis)
            x = nm.linear(x, self.weights[s], self.biases[s])
            if s < 2:
                x = nm.relu(x)
        return x


class MlpHead:
    """Pointwise linear -> softplus -> linear head."""

    def __init__(self, store: ParamStore, prefix: str, in_dim: int,
                 hidden_dim: int, out_dim: int, rng: Rng):
        self.w1 = store.param(f"{prefix}.w1", (in_dim, hidden_dim), rng.child("w1"))
        self.b1 = store.param(f"{prefix}.b1", (hidden_dim,))
        self.w2 = store.param(f"{prefix}.w2", (hidden_dim, out_dim), rng.child("w2"))
        self.b2 = store.param(f"{prefix}.b2", (out_dim,))

    def __call__(self, feats: Tensor) -> Tensor:
        return nm.linear(nm.softplus(nm.linear(feats, self.w1, self.b1)), self.w2, self.b2)


def _check_labels(labels: np.ndarray, num_classes: int):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise MetricError(
            f"labels outside [0, {num_classes}): min={labels.min()} max={labels.max()}"
        )
    return labels.astype(np.int64)


def focal_loss(logits: Tensor, labels: np.ndarray, gamma: float = 2.0,
               alpha: float = 0.25) -> Tensor:
    """Mean of -alpha * (1 - p_true)^gamma * log p_true over all voxels.

    gamma = 0, alpha = 1 reduces exactly to mean cross-entropy.
    """
    if gamma < 0:
        raise MetricError(f"gamma must be >= 0, got {gamma}")
    if not (0.0 < alpha <= 1.0):
        raise MetricError(f"alpha must lie in (0, 1], got {alpha}")
    k = logits.shape[-1]
    labels = _check_labels(labels, k)
    flat = nm.reshape(logits, (-1, k))
    onehot = np.zeros(flat.shape)
    onehot[np.arange(flat.shape[0]), labels.ravel()] = 1.0
    logp = nm.tsum(nm.log_softmax(flat, axis=-1) * nm.constant(onehot), axis=-1)
    focal_term = (1.0 - nm.exp(logp)) ** gamma
    return nm.tmean(focal_term * nm.neg(logp)) * float(alpha)


def _lovasz_grad(fg_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension along sorted descending errors."""
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    out = jaccard.copy()
    out[1:] = jaccard[1:] - jaccard[:-1]
    return out


def lovasz_loss(logits: Tensor, labels: np.ndarray, nonempty_mask: np.ndarray) -> Tensor:
    """Lovasz-softmax surrogate of per-class Jaccard over masked voxels.

    Averaged over classes present in the masked ground truth; an empty
    mask returns 0.  The sorting permutation is treated as constant, the
    standard piecewise-linear treatment.
    """
    k = logits.shape[-1]
    labels = _check_labels(labels, k)
    mask = np.asarray(nonempty_mask, dtype=bool).ravel()
    if labels.ravel().shape != mask.shape:
        raise ShapeError("labels and nonempty_mask disagree on voxel count")
    if not mask.any():
        return nm.constant(0.0)

    flat = nm.reshape(logits, (-1, k))
    probs = nm.softmax(flat, axis=-1)
    labels_flat = labels.ravel()
    sel = np.flatnonzero(mask)
    present = np.unique(labels_flat[sel])

    per_class = []
    for cls in present:
        fg = (labels_flat[sel] == cls).astype(np.float64)
        p_cls = nm.take1d(nm.reshape(probs[:, int(cls)], (-1,)), sel)
        # |fg - p| with fg binary: fg*(1-p) + (1-fg)*p
        errors = nm.constant(fg) * (1.0 - p_cls) + nm.constant(1.0 - fg) * p_cls
        order = np.argsort(-errors.data, kind="stable")
        grad = _lovasz_grad(fg[order])
        per_class.append(nm.tsum(nm.take1d(errors, order) * nm.constant(grad)))
    total = per_class[0]
    for term in per_class[1:]:
        total = total + term
    return total * (1.0 / len(per_class))


def thing_mask_loss(fg_logits: Tensor, fg_labels: np.ndarray, gamma: float = 2.0,
                    alpha: float = 0.25) -> Tensor:
    """Binary focal loss on the foreground ('thing') mask over all voxels."""
    if fg_logits.shape[-1] != 2:
        raise ShapeError(f"foreground logits must have 2 channels, got {fg_logits.shape}")
    labels = np.asarray(fg_labels)
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise MetricError("foreground labels must be binary")
    return focal_loss(fg_logits, labels, gamma=gamma, alpha=alpha)


def total_seg_loss(parts: dict, weights: LossWeights) -> Tensor:
    """Weighted sum of the focal / lovasz / thing parts (linear in each)."""
    return (parts["focal"] * weights.focal
            + parts["lovasz"] * weights.lovasz
            + parts["thing"] * weights.thing)


def miou(pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int,
         ignore_empty: bool = True) -> tuple[float, np.ndarray]:
    """Mean IoU over classes present in the ground truth.

    ``num_classes`` counts all label values including the empty class 0;
    ``ignore_empty`` drops class 0 from the mean.  Returns (miou,
    per-class vector) where absent classes hold NaN.
    """
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} disagree")
    per_class = np.full(num_classes, np.nan)
    for cls in range(num_classes):
        gt_c = gt == cls
        pred_c = pred == cls
        union = np.logical_or(gt_c, pred_c).sum()
        if union == 0:
            continue
        per_class[cls] = np.logical_and(gt_c, pred_c).sum() / union
    start = 1 if ignore_empty else 0
    present = [c for c in range(start, num_classes) if np.any(gt == c)]
    if not present:
        return 0.0, per_class
    return float(np.mean([per_class[c] for c in present])), per_class


def miou_union_average(pred_labels: np.ndarray, gt_labels: np.ndarray,
                       num_classes: int, ignore_empty: bool = True) -> float:
    """Companion average over every class with any support (gt or pred)."""
    _, per_class = miou(pred_labels, gt_labels, num_classes, ignore_empty)
    start = 1 if ignore_empty else 0
    vals = [v for v in per_class[start:] if not np.isnan(v)]
    return float(np.mean(vals)) if vals else 0.0


def iou_csv(per_class: np.ndarray, miou_value: float, ignore_empty: bool = True) -> str:
    """Metric CSV: header ``class,iou``, one row per class, final mIoU row."""
    lines = ["class,iou"]
    start = 1 if ignore_empty else 0
    for cls in range(start, len(per_class)):
        val = per_class[cls]
        lines.append(f"{cls},{'nan' if np.isnan(val) else repr(float(val))}")
    lines.append(f"mIoU,{repr(float(miou_value))}")
    return "\n".join(lines) + "\n"
