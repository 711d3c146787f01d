"""Single-pass explanation of a cube and dataset-level evaluation."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar

import numpy as np

from . import numerics as nx
from .hsi import HsiCube, Sample, downscale_mask, ranked_truth
from .metrics import EvalReport, accuracy, auprc, bio_at_k, spatial_iou
from .model import FocusModel, TokenLayout, argmax_first
from .saliency import (SaliencyCube, attention_rollout, build_cube, layer_heatmaps,
                       spatial_heatmap, spectral_curve, top_group)
from .sink import HeadPartition, collapse_rate, layer_sink_mass, sink_consistency, sink_rate

T = TypeVar("T")
R = TypeVar("R")


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("FOCUS_THREADS", "1")))
    except ValueError:
        return 1


def map_ordered(fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
    """``[fn(x) for x in items]``, optionally threaded (FOCUS_THREADS), order preserved."""
    workers = min(n_threads(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class Explanation:
    class_id: int
    logits: np.ndarray
    attn: np.ndarray  # (L, H, T, T)
    layout: TokenLayout
    cube: SaliencyCube
    heatmap: np.ndarray
    curve: np.ndarray
    rollout: np.ndarray
    layer_maps: list[np.ndarray]


def explain(model: FocusModel, parts: HeadPartition, cube: HsiCube, class_id: int | None = None,
            mode: str = "faithful") -> Explanation:
    """Predict and explain ``cube``; runs with differentiation disabled.

    ``class_id=None`` explains the predicted class.
    """
    with nx.differentiation_disabled():
        pooled = model.pool(cube)[None]
        grid = model.grid_for(cube.height, cube.width)
        K = model.n_classes
        logits, attn, layout = model.forward_batch(np.repeat(pooled, K, axis=0), grid, np.arange(K))
        logits = logits.data.copy()
        c = argmax_first(logits) if class_id is None else int(class_id)
        if not 0 <= c < K:
            raise ValueError(f"class {c} out of range 0..{K - 1}")
        a = attn.array()[c]
        sal = build_cube(a, parts, layout, model.partition, mode, model.params.phi.data, c)
        return Explanation(
            class_id=c, logits=logits, attn=a, layout=layout, cube=sal,
            heatmap=spatial_heatmap(sal), curve=spectral_curve(sal),
            rollout=attention_rollout(a, layout),
            layer_maps=layer_heatmaps(a, parts, layout, model.partition),
        )


def sink_metrics(attn: np.ndarray, parts: HeadPartition, layout: TokenLayout,
                 layer_maps: list[np.ndarray]) -> dict[str, float]:
    out = {"collapse_rate": collapse_rate(attn, layout.sink_index)}
    if len(layer_maps) >= 2:
        out["sink_consistency"] = sink_consistency(layer_maps)
    if layout.has_sink:
        out["sink_rate"] = sink_rate(attn, "all")
        out["sink_rate_aux"] = sink_rate(attn, "aux", parts)
        out["sink_rate_nonaux"] = sink_rate(attn, "nonaux", parts)
    return out


def evaluate(model: FocusModel, parts: HeadPartition, samples: Sequence[Sample], k: int = 5,
             mode: str = "faithful") -> EvalReport:
    """All metrics over ``samples``; saliency is read for each sample's true class."""
    if not samples:
        raise ValueError("empty evaluation split")

    def one(s: Sample) -> dict:
        ex = explain(model, parts, s.cube, int(s.label) if model.n_classes > 1 else 0, mode)
        grid = ex.layout.grid
        cell_mask = downscale_mask(s.lesion_mask, grid)
        row = {
            "sample_id": s.sample_id,
            "label": s.label,
            "pred": argmax_first(ex.logits),
            "bio": bio_at_k(ex.curve, ranked_truth(s), k) if s.true_bands else float("nan"),
            "top_group": top_group(ex.curve, model.partition),
            "spatial_iou": spatial_iou(ex.heatmap, cell_mask),
            "rollout_iou": spatial_iou(ex.rollout, cell_mask),
            "auprc": auprc(ex.heatmap, cell_mask) if 0 < cell_mask.sum() < cell_mask.size else float("nan"),
        }
        row.update(sink_metrics(ex.attn, parts, ex.layout, ex.layer_maps))
        return row

    rows = map_ordered(one, list(samples))

    def avg(key):
        vals = [r[key] for r in rows if key in r and np.isfinite(r[key])]
        return float(np.mean(vals)) if vals else float("nan")

    acc = (accuracy([r["pred"] for r in rows], [int(r["label"]) for r in rows])
           if model.n_classes > 1 else float("nan"))
    sink_keys = ["collapse_rate", "sink_consistency", "sink_rate", "sink_rate_aux", "sink_rate_nonaux"]
    sink = {key: avg(key) for key in sink_keys if any(key in r for r in rows)}
    return EvalReport(accuracy=acc, bio_at_k=avg("bio"), spatial_iou=avg("spatial_iou"),
                      auprc=avg("auprc"), rollout_iou=avg("rollout_iou"), sink=sink,
                      per_sample=rows, k=k)


def mean_layer_sink_mass(model: FocusModel, samples: Sequence[Sample]) -> np.ndarray:
    """Per-layer sink mass averaged over samples (true-class sequences)."""
    vals = []
    for s in samples:
        with nx.differentiation_disabled():
            _, attn, _ = model.forward_class(s.cube, int(s.label) if model.n_classes > 1 else 0)
        vals.append(layer_sink_mass(attn))
    return np.mean(vals, axis=0)
