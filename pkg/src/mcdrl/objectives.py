"""The three training losses, their weighted total, and segmentation metrics.

seg: mean per-pixel cross-entropy with the log argument clamped at 1e-12.
causal: squared L2 between mean-pooled intervened rows and the class's
        domain-averaged text embedding.
contrast: cross-entropy of cosine similarities between the pooled image
        feature and the class embeddings, sharpened by 1/tau.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as nc
from .cdrl import IntervenedFeatures
from .encoders import TextEncoder
from .prompts import class_domain_prompt
from .tensor import DimensionError, Tensor

LOG_FLOOR = 1e-12


@dataclass
class LossConfig:
    lambda1: float = 0.5
    lambda2: float = 0.1
    tau: float = 0.5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def seg_loss(pixel_probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over pixels of -log p(true class)."""
    if pixel_probs.data.ndim != 2:
        raise DimensionError(f"seg_loss expects (n_pixels, channels), got {pixel_probs.shape}")
    labels = np.asarray(labels).reshape(-1)
    n, channels = pixel_probs.shape
    if labels.shape[0] != n:
        raise DimensionError(f"seg_loss: {labels.shape[0]} labels for {n} pixels")
    if labels.min() < 0 or labels.max() >= channels:
        raise ValueError(f"seg_loss: label outside 0..{channels - 1}")
    onehot = Tensor(np.eye(channels)[labels])
    p_true = nc.reduce(nc.mul(pixel_probs, onehot), "sum", axis=1)
    return nc.scale(nc.reduce(nc.log(nc.clip_min(p_true, LOG_FLOOR)), "mean"), -1.0)


@dataclass
class ClassDomainTable:
    """Embeddings of every class under every confounder descriptor."""

    embeds: np.ndarray  # (n_classes, n_domains, d)
    mean_embeds: np.ndarray  # (n_classes, d), averaged over domains

    @classmethod
    def build(cls, encoder: TextEncoder, class_names, descriptors) -> "ClassDomainTable":
        table = np.stack([
            np.stack([encoder.encode(class_domain_prompt(n, d)).data for d in descriptors])
            for n in class_names
        ])
        return cls(embeds=table, mean_embeds=table.mean(axis=1))

    @property
    def n_classes(self) -> int:
        return self.embeds.shape[0]


def causal_loss(intervened: IntervenedFeatures | Tensor, table: ClassDomainTable,
                class_k: int) -> Tensor:
    """Squared distance of pooled intervened rows to the class's averaged embedding.

    ``class_k`` is the 1-based lesion class id.
    """
    if not 1 <= class_k <= table.n_classes:
        raise ValueError(f"class id {class_k} outside 1..{table.n_classes}")
    rows = intervened.rows if isinstance(intervened, IntervenedFeatures) else intervened
    if rows.data.ndim != 2 or rows.shape[0] == 0:
        raise DimensionError("causal_loss: need a nonempty (n, d) row matrix")
    pooled = nc.reduce(rows, "mean", axis=0)
    target = Tensor(table.mean_embeds[class_k - 1])
    diff = nc.sub(pooled, target)
    return nc.reduce(nc.mul(diff, diff), "sum")


def contrast_rows(pooled: Tensor, class_embeds: Tensor, class_ids: np.ndarray,
                  tau: float) -> Tensor:
    """Batched contrastive loss over (batch, d) pooled image features."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    sims = nc.matmul(nc.normalize_rows(pooled), nc.transpose(nc.normalize_rows(class_embeds)))
    probs = nc.softmax_rows(nc.scale(sims, 1.0 / tau))
    k = class_embeds.shape[0]
    ids = np.asarray(class_ids).reshape(-1)
    if ids.min() < 1 or ids.max() > k:
        raise ValueError(f"class id outside 1..{k}")
    onehot = Tensor(np.eye(k)[ids - 1])
    p_true = nc.reduce(nc.mul(probs, onehot), "sum", axis=1)
    return nc.scale(nc.reduce(nc.log(nc.clip_min(p_true, LOG_FLOOR)), "mean"), -1.0)


def contrast_loss(image_feature: Tensor, class_embeds: Tensor, class_k: int,
                  tau: float) -> Tensor:
    """Single-sample contrastive alignment of one pooled feature vector."""
    if image_feature.data.ndim != 1:
        raise DimensionError(f"contrast_loss expects a vector, got {image_feature.shape}")
    pooled = nc.reshape(image_feature, (1, image_feature.shape[0]))
    return contrast_rows(pooled, class_embeds, np.asarray([class_k]), tau)


def total_loss(seg: Tensor, causal: Tensor | None, contrast: Tensor | None,
               cfg: LossConfig) -> Tensor:
    """seg + lambda1 * causal + lambda2 * contrast; absent parts contribute zero."""
    for name, part in (("seg", seg), ("causal", causal), ("contrast", contrast)):
        if part is not None and not np.isfinite(part.data).all():
            raise nc.NumericError(f"total_loss: non-finite {name} part")
    out = seg
    if causal is not None and cfg.lambda1 != 0.0:
        out = nc.add(out, nc.scale(causal, cfg.lambda1))
    if contrast is not None and cfg.lambda2 != 0.0:
        out = nc.add(out, nc.scale(contrast, cfg.lambda2))
    return out


# ---------------------------------------------------------------------------
# metrics

@dataclass
class ClassMetrics:
    dice: float
    iou: float
    in_average: bool  # False when the class is absent from both maps


@dataclass
class MetricsReport:
    per_class: dict[int, ClassMetrics]
    acc: float
    mean_dice: float
    mean_iou: float
    per_domain: dict[str, "MetricsReport"] = field(default_factory=dict)

    def to_records(self, **extra) -> list[dict]:
        """Flatten into JSON-friendly rows, one per (domain, class) plus means."""
        rows = []
        sources = list(self.per_domain.items()) if self.per_domain else [("all", self)]
        for site, rep in sources:
            for k, cm in sorted(rep.per_class.items()):
                rows.append({"site": site, "class": k, "dice": cm.dice, "iou": cm.iou,
                             "acc": rep.acc, **extra})
        rows.append({"site": "mean", "class": 0, "dice": self.mean_dice,
                     "iou": self.mean_iou, "acc": self.acc, **extra})
        return rows


def _scores_from_counts(inter: int, pred: int, gt: int) -> ClassMetrics:
    if pred == 0 and gt == 0:
        return ClassMetrics(dice=1.0, iou=1.0, in_average=False)
    union = pred + gt - inter
    dice = 2.0 * inter / (pred + gt)
    iou = inter / union if union else 1.0
    return ClassMetrics(dice=dice, iou=iou, in_average=True)


def _finalize(per_class: dict[int, ClassMetrics], correct: int, total: int) -> MetricsReport:
    counted = [cm for cm in per_class.values() if cm.in_average]
    mean_dice = float(np.mean([cm.dice for cm in counted])) if counted else 1.0
    mean_iou = float(np.mean([cm.iou for cm in counted])) if counted else 1.0
    return MetricsReport(per_class=per_class, acc=correct / total,
                         mean_dice=mean_dice, mean_iou=mean_iou)


def metrics(pred_labels: np.ndarray, gt_labels: np.ndarray, n_classes: int) -> MetricsReport:
    """Per-class Dice/IoU and pixel accuracy for one predicted/true label map.

    A class absent from both maps scores 1.0 but is excluded from the averages.
    """
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise DimensionError(f"metrics: shape mismatch {pred.shape} vs {gt.shape}")
    per_class: dict[int, ClassMetrics] = {}
    for k in range(1, n_classes + 1):
        p = pred == k
        g = gt == k
        per_class[k] = _scores_from_counts(int((p & g).sum()), int(p.sum()), int(g.sum()))
    return _finalize(per_class, int((pred == gt).sum()), pred.size)


class MetricsAccumulator:
    """Merge per-sample integer counts into dataset-level metrics, by domain."""

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self._counts: dict[str, np.ndarray] = {}  # site -> (K, 3) inter/pred/gt
        self._pixels: dict[str, np.ndarray] = {}  # site -> [correct, total]

    def add(self, pred_labels: np.ndarray, gt_labels: np.ndarray, domain: str) -> None:
        pred = np.asarray(pred_labels)
        gt = np.asarray(gt_labels)
        if pred.shape != gt.shape:
            raise DimensionError(f"accumulate: shape mismatch {pred.shape} vs {gt.shape}")
        c = self._counts.setdefault(domain, np.zeros((self.n_classes, 3), dtype=np.int64))
        px = self._pixels.setdefault(domain, np.zeros(2, dtype=np.int64))
        for k in range(1, self.n_classes + 1):
            p = pred == k
            g = gt == k
            c[k - 1] += (int((p & g).sum()), int(p.sum()), int(g.sum()))
        px += (int((pred == gt).sum()), pred.size)

    def _report_for(self, counts: np.ndarray, pixels: np.ndarray) -> MetricsReport:
        per_class = {k: _scores_from_counts(*counts[k - 1]) for k in range(1, self.n_classes + 1)}
        return _finalize(per_class, int(pixels[0]), int(pixels[1]))

    def report(self) -> MetricsReport:
        if not self._counts:
            raise ValueError("no samples accumulated")
        totals = np.zeros((self.n_classes, 3), dtype=np.int64)
        pixels = np.zeros(2, dtype=np.int64)
        per_domain = {}
        for site in sorted(self._counts):
            totals += self._counts[site]
            pixels += self._pixels[site]
            per_domain[site] = self._report_for(self._counts[site], self._pixels[site])
        overall = self._report_for(totals, pixels)
        overall.per_domain = per_domain
        return overall
