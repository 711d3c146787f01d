"""Accuracy, band-level IoU (BIO@k), spatial IoU and AUPRC against planted ground truth."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .hsi import downscale_mask
from .saliency import normalize_minmax


def accuracy(predictions, labels) -> float:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.size == 0:
        raise ValueError("accuracy of an empty set")
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    return float(np.mean(p == y))


def top_k_bands(curve, k: int) -> list[int]:
    """Indices of the k largest values; ties go to the lower band index."""
    c = np.asarray(curve, dtype=np.float64)
    order = sorted(range(c.size), key=lambda i: (-c[i], i))
    return order[:k]


def bio_at_k(curve, true_bands, k: int = 5) -> float:
    """IoU of the curve's top-k bands and the first k ranked ground-truth bands."""
    curve = np.asarray(curve)
    if k > curve.size:
        raise ValueError(f"k={k} exceeds band count {curve.size}")
    truth = list(true_bands)
    if not truth:
        raise ValueError("need at least one ground-truth band")
    pred = set(top_k_bands(curve, k))
    gt = set(truth[:k])
    return len(pred & gt) / len(pred | gt)


def spatial_iou(heatmap, mask, threshold: float = 0.5) -> float:
    """IoU of the min-max-normalised heatmap above ``threshold`` and the mask.

    The mask is downscaled to the heatmap grid first. A constant heatmap
    scores 0 (with a warning).
    """
    h = np.asarray(heatmap, dtype=np.float64)
    m = downscale_mask(mask, h.shape)
    if float(h.max()) == float(h.min()):
        warnings.warn("constant heatmap; spatial IoU set to 0", stacklevel=2)
        return 0.0
    pred = normalize_minmax(h) >= threshold
    union = np.logical_or(pred, m).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(pred, m).sum() / union)


def auprc(scores, mask) -> float:
    """Step-wise average precision: Σ (R_k - R_{k-1}) · P_k over descending thresholds."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    m = np.asarray(mask)
    if m.shape != np.shape(scores):
        m = downscale_mask(m, np.shape(scores))
    y = m.astype(bool).ravel()
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise ValueError("mask needs both positive and negative cells")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of each group of tied scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = tp[ends]
    precision = tp / (ends + 1)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass
class EvalReport:
    accuracy: float
    bio_at_k: float
    spatial_iou: float
    auprc: float
    rollout_iou: float
    sink: dict[str, float] = field(default_factory=dict)
    per_sample: list[dict] = field(default_factory=list)
    k: int = 5

    def rows(self) -> list[tuple[str, float | str]]:
        out = [("accuracy", self.accuracy), (f"bio_at_{self.k}", self.bio_at_k),
               ("spatial_iou", self.spatial_iou), ("auprc", self.auprc),
               ("rollout_spatial_iou", self.rollout_iou)]
        out.extend(sorted(self.sink.items()))
        return out

    def check_ranges(self) -> None:
        for name, v in self.rows():
            if v == "" or v is None:
                continue
            lo = -1.0 if "consistency" in name else 0.0
            if not lo <= float(v) <= 1.0:
                raise ValueError(f"metric {name}={v} outside [{lo}, 1]")

    def summary(self) -> str:
        lines = ["FOCUS evaluation report", "-" * 32]
        for name, v in self.rows():
            lines.append(f"{name:<28s} {'n/a' if v == '' else format(float(v), '.4f')}")
        lines.append(f"samples evaluated            {len(self.per_sample)}")
        return "\n".join(lines) + "\n"
