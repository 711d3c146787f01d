"""Gradient-free saliency cubes from prompt-to-patch attention, plus attention rollout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import AttentionRecord
from .hsi import BandPartition
from .model import TokenLayout
from .sink import HeadPartition

MODES = ("faithful", "band-weighted")


@dataclass(frozen=True, eq=False)
class SaliencyCube:
    t: np.ndarray  # (Hp, Wp, C)
    class_id: int
    partition: BandPartition


def _values(attn) -> np.ndarray:
    if isinstance(attn, AttentionRecord):
        return attn.array()
    return np.asarray(attn, dtype=np.float64)


def group_attention(layer_attn: np.ndarray, heads, layout: TokenLayout) -> np.ndarray:
    """Mean over ``heads`` of A[prompt g, patch(x,y,g)], shape ``(G, Hp, Wp)``."""
    if len(heads) == 0:
        raise ValueError("no discriminative heads")
    a = layer_attn[list(heads)].mean(axis=0)
    Hp, Wp = layout.grid
    out = np.empty((layout.n_groups, Hp, Wp))
    for g in range(layout.n_groups):
        out[g] = a[layout.prompt_index(g), layout.group_patch_slice(g)].reshape(Hp, Wp)
    return out


def band_weights(phi: np.ndarray, partition: BandPartition) -> np.ndarray:
    """|B_g| · softmax over λ∈B_g of ‖Φ_λ‖ (all ones when norms are equal)."""
    norms = np.linalg.norm(np.asarray(phi), axis=1)
    w = np.empty_like(norms)
    for members in partition.groups:
        idx = list(members)
        z = norms[idx] - norms[idx].max()
        e = np.exp(z)
        w[idx] = len(idx) * e / e.sum()
    return w


def layer_cube(attn, layer: int, parts: HeadPartition, layout: TokenLayout,
               partition: BandPartition, mode: str = "faithful", phi=None) -> np.ndarray:
    a = _values(attn)
    if a.ndim != 4:
        raise ValueError("saliency needs a single-sample record of shape (L, H, T, T)")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    vals = group_attention(a[layer], parts.star(layer), layout)  # (G, Hp, Wp)
    t = np.moveaxis(vals[partition.group_of()], 0, -1)  # (Hp, Wp, C)
    if mode == "band-weighted":
        if phi is None:
            raise ValueError("band-weighted mode needs the adapter weights")
        t = t * band_weights(phi, partition)
    return t


def build_cube(attn, parts: HeadPartition, layout: TokenLayout, partition: BandPartition,
               mode: str = "faithful", phi=None, class_id: int = 0) -> SaliencyCube:
    """Final-layer saliency cube T[x, y, λ] from discriminative heads."""
    L = _values(attn).shape[0]
    t = layer_cube(attn, L - 1, parts, layout, partition, mode, phi)
    return SaliencyCube(t, class_id, partition)


def spatial_heatmap(cube: SaliencyCube) -> np.ndarray:
    return cube.t.sum(axis=2)


def spectral_curve(cube: SaliencyCube) -> np.ndarray:
    return cube.t.max(axis=(0, 1))


def layer_heatmaps(attn, parts: HeadPartition, layout: TokenLayout, partition: BandPartition) -> list[np.ndarray]:
    """Spatial heatmap of every layer (faithful mode), for consistency metrics."""
    a = _values(attn)
    return [layer_cube(a, layer, parts, layout, partition).sum(axis=2) for layer in range(a.shape[0])]


def rollout_matrix(attn) -> np.ndarray:
    """Head-averaged, identity-added, row-renormalized attention chained over layers."""
    a = _values(attn)
    T = a.shape[-1]
    eye = np.eye(T)
    joint = eye
    for layer in range(a.shape[0]):
        m = a[layer].mean(axis=0) + eye
        m = m / m.sum(axis=-1, keepdims=True)
        joint = m @ joint
    return joint


def attention_rollout(attn, layout: TokenLayout) -> np.ndarray:
    """Rollout mass from all prompt rows onto patch tokens, summed over groups per (x, y)."""
    r = rollout_matrix(attn)
    Hp, Wp = layout.grid
    prompts = r[layout.prompt_slice()].sum(axis=0)
    heat = np.zeros(Hp * Wp)
    for g in range(layout.n_groups):
        heat += prompts[layout.group_patch_slice(g)]
    return heat.reshape(Hp, Wp)


def top_group(curve: np.ndarray, partition: BandPartition) -> int:
    """Group holding the curve's maximum (lowest band index on ties)."""
    return int(partition.group_of()[int(np.argmax(curve))])


def normalize_minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi == lo:
        return np.zeros_like(x, dtype=np.float64)
    return (x - lo) / (hi - lo)


def heatmap_to_pgm(x: np.ndarray) -> np.ndarray:
    return np.round(normalize_minmax(x) * 255.0).astype(np.uint8)
