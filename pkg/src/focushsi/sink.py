"""Auxiliary-head selection, the sink attraction loss and collapse diagnostics.

Attention inputs are either an :class:`AttentionRecord` or an array of shape
``(*batch, L, H, T, T)``; leading batch axes are averaged over.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .backbone import AttentionRecord
from .numerics import Tensor

SCOPES = ("all", "aux", "nonaux")


@dataclass(frozen=True)
class HeadPartition:
    n_heads: int
    aux: tuple[tuple[int, ...], ...]  # per layer

    def __post_init__(self):
        for layer, heads in enumerate(self.aux):
            if any(not 0 <= h < self.n_heads for h in heads):
                raise ValueError(f"head index out of range in layer {layer}")
            if len(set(heads)) != len(heads):
                raise ValueError(f"duplicate aux head in layer {layer}")

    @property
    def n_layers(self) -> int:
        return len(self.aux)

    def star(self, layer: int) -> tuple[int, ...]:
        aux = set(self.aux[layer])
        return tuple(h for h in range(self.n_heads) if h not in aux)

    def to_json(self) -> dict:
        return {"n_heads": self.n_heads, "aux": [list(h) for h in self.aux]}

    @classmethod
    def from_json(cls, obj: dict) -> "HeadPartition":
        return cls(int(obj["n_heads"]), tuple(tuple(int(h) for h in layer) for layer in obj["aux"]))

    @classmethod
    def empty(cls, n_layers: int, n_heads: int) -> "HeadPartition":
        return cls(n_heads, tuple(() for _ in range(n_layers)))


def _values(attn) -> np.ndarray:
    if isinstance(attn, AttentionRecord):
        return attn.array()
    return np.asarray(attn, dtype=np.float64)


def head_entropy(attn) -> np.ndarray:
    """Mean row entropy per (layer, head), averaged over queries and samples."""
    a = _values(attn)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(a > 0, a * np.log(a), 0.0)
    ent = -plogp.sum(axis=-1).mean(axis=-1)  # (*batch, L, H)
    return ent.reshape((-1,) + ent.shape[-2:]).mean(axis=0)


def select_aux_heads(records: Sequence, rho: float) -> HeadPartition:
    """Per layer, the ceil(rho·H) heads with the most diffuse attention.

    Ties go to the lower head index.
    """
    if not 0.0 <= rho < 1.0:
        raise ValueError("rho must lie in [0, 1)")
    if len(records) == 0:
        raise ValueError("need at least one calibration record")
    ents = np.stack([head_entropy(r) for r in records]).mean(axis=0)  # (L, H)
    L, H = ents.shape
    n_aux = int(math.ceil(rho * H - 1e-12))
    if n_aux >= H:
        raise ValueError("no discriminative heads")
    aux = []
    for layer in range(L):
        order = sorted(range(H), key=lambda h: (-ents[layer, h], h))
        aux.append(tuple(sorted(order[:n_aux])))
    return HeadPartition(H, tuple(aux))


def sink_loss(attn: AttentionRecord, parts: HeadPartition, lam: float, sink_index: int | None = 0) -> Tensor:
    """-λ Σ_ℓ mean_{h∈aux_ℓ} mean_i A[ℓ,h,i,sink]; differentiable through ``attn``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    total = Tensor(0.0)
    if sink_index is None or lam == 0:
        return total
    for layer, a in enumerate(attn.maps):
        heads = parts.aux[layer]
        if not heads:
            continue
        col = a[..., list(heads), :, sink_index]  # (*batch, |aux|, T)
        total = total + nx.mean(col)
    return nx.scale(total, -lam)


def _select_heads(a: np.ndarray, scope: str, parts: HeadPartition | None) -> list[np.ndarray]:
    """Per-layer arrays ``(*batch, h_sel, T, T)`` for the requested scope."""
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    L = a.shape[-4]
    out = []
    for layer in range(L):
        la = a[..., layer, :, :, :]
        if scope == "all":
            out.append(la)
            continue
        if parts is None:
            raise ValueError(f"scope {scope!r} needs a head partition")
        heads = parts.aux[layer] if scope == "aux" else parts.star(layer)
        if heads:
            out.append(la[..., list(heads), :, :])
    return out


def sink_rate(attn, scope: str = "all", parts: HeadPartition | None = None, sink_index: int = 0) -> float:
    """Mean attention mass on the sink column over the selected layers, heads and queries."""
    a = _values(attn)
    if a.size == 0:
        raise ValueError("empty attention record")
    chunks = _select_heads(a, scope, parts)
    if not chunks:
        return 0.0
    num = sum(float(c[..., sink_index].sum()) for c in chunks)
    den = sum(c[..., sink_index].size for c in chunks)
    return num / den


def layer_sink_mass(attn, sink_index: int = 0) -> np.ndarray:
    a = _values(attn)
    col = a[..., sink_index]  # (*batch, L, H, T)
    col = np.moveaxis(col, -3, 0).reshape(a.shape[-4], -1)
    return col.mean(axis=1)


def collapse_rate(attn, sink_index: int | None = 0) -> float:
    """Mean over layers/heads of the heaviest non-sink key column's average mass."""
    a = _values(attn)
    if a.size == 0:
        raise ValueError("empty attention record")
    colmass = a.mean(axis=-2)  # (*batch, L, H, T)
    if sink_index is not None:
        colmass = np.delete(colmass, sink_index, axis=-1)
    return float(colmass.max(axis=-1).mean())


def layer_correlations(heatmaps: Sequence[np.ndarray]) -> tuple[list[float], list[int]]:
    """Pearson r of consecutive heatmaps; zero-variance pairs give 0 and are flagged."""
    if len(heatmaps) < 2:
        raise ValueError("need at least two layers")
    corrs, flagged = [], []
    for i in range(len(heatmaps) - 1):
        u = np.asarray(heatmaps[i], dtype=np.float64).ravel()
        v = np.asarray(heatmaps[i + 1], dtype=np.float64).ravel()
        u = u - u.mean()
        v = v - v.mean()
        den = math.sqrt(float(u @ u) * float(v @ v))
        if den == 0.0:
            corrs.append(0.0)
            flagged.append(i)
        else:
            corrs.append(float(np.clip((u @ v) / den, -1.0, 1.0)))
    return corrs, flagged


def sink_consistency(heatmaps: Sequence[np.ndarray]) -> float:
    corrs, flagged = layer_correlations(heatmaps)
    if flagged:
        warnings.warn(f"constant heatmap in layer pair(s) {flagged}; counted as 0", stacklevel=2)
    return float(np.mean(corrs))
