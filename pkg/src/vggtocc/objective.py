"""Loss stack and occupancy metrics.

Class 0 is free space throughout.  Losses take logits of shape
(..., n_classes) and integer labels of shape (...).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Node

FREE = 0


def _flat(logits: Node, labels: np.ndarray) -> tuple[Node, np.ndarray]:
    C = logits.shape[-1]
    return dc.reshape(logits, (-1, C)), np.asarray(labels).reshape(-1).astype(np.int64)


def ce_smoothed(logits: Node, labels: np.ndarray, alpha: float = 0.1) -> Node:
    """Mean label-smoothed cross-entropy; target = (1-a) one-hot + a/C."""
    x, y = _flat(logits, labels)
    n, C = x.shape
    target = np.full((n, C), alpha / C, dtype=x.value.dtype)
    target[np.arange(n), y] += 1.0 - alpha
    return dc.scale(dc.sum(dc.mul(dc.log_softmax(x), target)), -1.0 / n)


def geo_scal(logits: Node, labels: np.ndarray) -> Node:
    """Binary cross-entropy of occupancy (1 - p_free) vs. label != free."""
    x, y = _flat(logits, labels)
    n = x.shape[0]
    occ = (y != FREE).astype(x.value.dtype)
    lse_all = dc.logsumexp(x, axis=-1)
    log_free = dc.sub(x[:, FREE], lse_all)
    log_occ = dc.sub(dc.logsumexp(x[:, FREE + 1:], axis=-1), lse_all)
    ll = dc.add(dc.mul(log_occ, occ), dc.mul(log_free, 1.0 - occ))
    return dc.scale(dc.sum(ll), -1.0 / n)


def class_weights(label_grids: Sequence[np.ndarray], n_classes: int,
                  clip: tuple[float, float] = (0.1, 10.0)) -> np.ndarray:
    """Inverse-frequency weights normalized to mean 1, then clipped.

    Classes never observed are treated as seen once.
    """
    counts = np.zeros(n_classes)
    for g in label_grids:
        counts += np.bincount(np.asarray(g).reshape(-1), minlength=n_classes)[:n_classes]
    freq = np.maximum(counts, 1) / max(counts.sum(), 1)
    w = 1.0 / freq
    w = w / w.mean()
    return np.clip(w, *clip)


def sem_scal(logits: Node, labels: np.ndarray, weights: np.ndarray) -> Node:
    """Class-weighted cross-entropy, averaged over voxels."""
    x, y = _flat(logits, labels)
    n, C = x.shape
    target = np.zeros((n, C), dtype=x.value.dtype)
    target[np.arange(n), y] = np.asarray(weights)[y]
    return dc.scale(dc.sum(dc.mul(dc.log_softmax(x), target)), -1.0 / n)


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Jaccard-loss Lovasz extension w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    inter = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jac = 1.0 - inter / union
    if len(gt_sorted) > 1:
        jac[1:] = jac[1:] - jac[:-1]
    return jac


def lovasz_softmax(probs: Node, labels: np.ndarray, classes: str = "present") -> Node:
    """Lovasz-softmax over flattened voxels.

    probs: (..., C) normalized probabilities.  Averages over classes
    present in ``labels`` (or all classes with ``classes="all"``).
    """
    C = probs.shape[-1]
    p = dc.reshape(probs, (-1, C))
    y = np.asarray(labels).reshape(-1)
    terms = []
    for c in range(C):
        fg = (y == c).astype(p.value.dtype)
        if classes == "present" and fg.sum() == 0:
            continue
        # |fg - p| written linearly: 1 - p on the class, p elsewhere
        err = dc.add(dc.mul(p[:, c], 1.0 - 2.0 * fg), fg)
        order = np.argsort(-err.value, kind="stable")
        sorted_err = dc.take(err, order, axis=0)
        terms.append(dc.sum(dc.mul(sorted_err, lovasz_grad(fg[order]))))
    if not terms:
        return dc.const(np.zeros((), dtype=p.value.dtype))
    total = terms[0]
    for t in terms[1:]:
        total = dc.add(total, t)
    return dc.scale(total, 1.0 / len(terms))


# ------------------------------------------------------------------- total

@dataclass
class LossBreakdown:
    ce: float
    sem_scal: float
    geo_scal: float
    lovasz: float
    total: float
    per_scale: list[dict[str, float]] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"ce": self.ce, "sem_scal": self.sem_scal, "geo_scal": self.geo_scal,
                "lovasz": self.lovasz, "total": self.total, "per_scale": self.per_scale}


LOSS_TERMS = ("ce", "sem_scal", "geo_scal", "lovasz")


def total_loss(logits: Sequence[Node], labels: Sequence[np.ndarray], weights: np.ndarray,
               scale_weights: Sequence[float] = (0.5, 0.75, 1.0), alpha: float = 0.1,
               toggles: dict[str, bool] | None = None) -> tuple[Node, LossBreakdown]:
    """Weighted sum over scales of CE + sem_scal + geo_scal + Lovasz."""
    toggles = {t: True for t in LOSS_TERMS} | dict(toggles or {})
    sums: dict[str, Node | None] = {t: None for t in LOSS_TERMS}
    per_scale = []
    for lg, lb, w in zip(logits, labels, scale_weights):
        terms = {}
        if toggles["ce"]:
            terms["ce"] = ce_smoothed(lg, lb, alpha)
        if toggles["sem_scal"]:
            terms["sem_scal"] = sem_scal(lg, lb, weights)
        if toggles["geo_scal"]:
            terms["geo_scal"] = geo_scal(lg, lb)
        if toggles["lovasz"]:
            terms["lovasz"] = lovasz_softmax(dc.softmax(lg), lb)
        per_scale.append({k: float(v.value) for k, v in terms.items()})
        for k, v in terms.items():
            wv = dc.scale(v, w)
            sums[k] = wv if sums[k] is None else dc.add(sums[k], wv)
    total = None
    for k in LOSS_TERMS:
        if sums[k] is not None:
            total = sums[k] if total is None else dc.add(total, sums[k])
    if total is None:
        total = dc.const(np.zeros(()))
    vals = {k: (0.0 if sums[k] is None else float(sums[k].value)) for k in LOSS_TERMS}
    return total, LossBreakdown(vals["ce"], vals["sem_scal"], vals["geo_scal"], vals["lovasz"],
                                float(total.value), per_scale)


# ------------------------------------------------------------------ labels

def downsample_labels(labels: np.ndarray) -> np.ndarray:
    """2x2x2 majority vote.  Ties prefer an occupied class, then the lowest id."""
    X, Y, Z = labels.shape
    blocks = labels.reshape(X // 2, 2, Y // 2, 2, Z // 2, 2).transpose(0, 2, 4, 1, 3, 5)
    blocks = blocks.reshape(X // 2, Y // 2, Z // 2, 8).astype(np.int64)
    n_cls = int(labels.max()) + 1
    counts = np.zeros(blocks.shape[:3] + (n_cls,), dtype=np.int64)
    for c in range(n_cls):
        counts[..., c] = (blocks == c).sum(axis=-1)
    # score: count first, then occupied over free, then lower id
    score = counts * 2 * (n_cls + 1) + (np.arange(n_cls) != FREE) * (n_cls + 1) + (n_cls - np.arange(n_cls))
    return score.argmax(axis=-1).astype(labels.dtype)


def label_pyramid(labels: np.ndarray, n_scales: int = 3) -> list[np.ndarray]:
    """Coarse-to-fine list of label grids ending with ``labels``."""
    out = [labels]
    for _ in range(n_scales - 1):
        out.insert(0, downsample_labels(out[0]))
    return out


# ----------------------------------------------------------------- metrics

@dataclass
class Metrics:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    occ_tp: int = 0
    occ_fp: int = 0
    occ_fn: int = 0

    @classmethod
    def empty(cls, n_classes: int) -> "Metrics":
        z = np.zeros(n_classes, dtype=np.int64)
        return cls(z.copy(), z.copy(), z.copy())

    def __add__(self, other: "Metrics") -> "Metrics":
        return Metrics(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                       self.occ_tp + other.occ_tp, self.occ_fp + other.occ_fp,
                       self.occ_fn + other.occ_fn)

    @property
    def iou(self) -> float:
        den = self.occ_tp + self.occ_fp + self.occ_fn
        return float(self.occ_tp / den) if den else 1.0

    @property
    def class_iou(self) -> np.ndarray:
        den = self.tp + self.fp + self.fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, self.tp / np.maximum(den, 1), np.nan)

    @property
    def miou(self) -> float:
        ious = self.class_iou[FREE + 1:]
        ious = ious[~np.isnan(ious)]
        return float(ious.mean()) if ious.size else 1.0

    def report(self, class_names: Sequence[str] | None = None) -> str:
        n = len(self.tp)
        names = list(class_names) if class_names else [f"class_{c}" for c in range(n)]
        lines = ["class\tiou"]
        for c in range(FREE + 1, n):
            v = self.class_iou[c]
            lines.append(f"{names[c]}\t{'nan' if np.isnan(v) else f'{v:.6f}'}")
        lines.append(f"IoU\t{self.iou:.6f}")
        lines.append(f"mIoU\t{self.miou:.6f}")
        return "\n".join(lines) + "\n"


def iou_miou(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> Metrics:
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth differ in size")
    tp = np.bincount(gt[pred == gt], minlength=n_classes)[:n_classes]
    fp = np.bincount(pred[pred != gt], minlength=n_classes)[:n_classes]
    fn = np.bincount(gt[pred != gt], minlength=n_classes)[:n_classes]
    po, go = pred != FREE, gt != FREE
    return Metrics(tp, fp, fn, int(np.sum(po & go)), int(np.sum(po & ~go)), int(np.sum(~po & go)))
