"""Frozen pre-norm mini-ViT encoder with per-layer attention recording."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

WEIGHT_MAGIC = b"FWT1"
LAYER_KEYS = ("ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_o", "b_o",
              "ln2_g", "ln2_b", "w_fc1", "b_fc1", "w_fc2", "b_fc2")
FINAL_KEYS = ("lnf_g", "lnf_b")


@dataclass(frozen=True)
class BackboneConfig:
    d: int = 16
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    seed: int = 0
    init_std: float = 0.02
    # std of the query/key projections; None means init_std
    qk_std: float | None = None

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.heads < 2:
            raise ValueError("need at least two heads")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def hidden(self) -> int:
        return self.d * self.mlp_ratio

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        d, m = self.d, self.hidden
        return {
            "ln1_g": (d,), "ln1_b": (d,),
            "w_qkv": (d, 3 * d), "b_qkv": (3 * d,),
            "w_o": (d, d), "b_o": (d,),
            "ln2_g": (d,), "ln2_b": (d,),
            "w_fc1": (d, m), "b_fc1": (m,),
            "w_fc2": (m, d), "b_fc2": (d,),
        }

    def n_params(self) -> int:
        per_layer = sum(math.prod(s) for s in self.layer_shapes().values())
        return self.layers * per_layer + 2 * self.d


@dataclass
class AttentionRecord:
    """Attention maps of one forward pass, one tensor per layer.

    Each entry has shape ``(*batch, H, T, T)``.
    """

    maps: list[Tensor]

    @property
    def n_layers(self) -> int:
        return len(self.maps)

    def array(self) -> np.ndarray:
        """Stacked values with shape ``(*batch, L, H, T, T)``."""
        return np.stack([m.data for m in self.maps], axis=-4)

    def sample(self, i: int) -> "AttentionRecord":
        return AttentionRecord([nx.getitem(m, i) for m in self.maps])


class FrozenBackbone:
    def __init__(self, config: BackboneConfig, layers: list[dict[str, np.ndarray]],
                 final: dict[str, np.ndarray]):
        self.config = config
        self._layers = [{k: Tensor(np.array(v, dtype=np.float64)) for k, v in layer.items()}
                        for layer in layers]
        self._final = {k: Tensor(np.array(v, dtype=np.float64)) for k, v in final.items()}
        for t in self._all_tensors():
            t.data.setflags(write=False)

    def _all_tensors(self):
        for layer in self._layers:
            for k in LAYER_KEYS:
                yield layer[k]
        for k in FINAL_KEYS:
            yield self._final[k]

    def weights(self) -> list[np.ndarray]:
        return [t.data for t in self._all_tensors()]

    def weight(self, layer: int, key: str) -> np.ndarray:
        return self._layers[layer][key].data

    def n_params(self) -> int:
        return sum(w.size for w in self.weights())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for w in self.weights():
            h.update(np.ascontiguousarray(w).tobytes())
        return h.hexdigest()

    def encode(self, seq: Tensor, mask: np.ndarray) -> tuple[Tensor, AttentionRecord]:
        """Run all layers over ``seq`` (``(*batch, T, d)``) under a ``T×T`` mask."""
        cfg = self.config
        if seq.shape[-1] != cfg.d:
            raise ValueError(f"token width {seq.shape[-1]} != backbone d={cfg.d}")
        T = seq.shape[-2]
        if np.shape(mask) != (T, T):
            raise ValueError(f"mask shape {np.shape(mask)} does not match sequence length {T}")
        squeeze = seq.ndim == 2
        x = nx.reshape(seq, (1, T, cfg.d)) if squeeze else seq
        B = x.shape[0]
        H, dh = cfg.heads, cfg.head_dim
        maps = []
        for w in self._layers:
            h = nx.layer_norm(x, w["ln1_g"], w["ln1_b"])
            qkv = nx.matmul(h, w["w_qkv"]) + w["b_qkv"]
            qkv = nx.transpose(nx.reshape(qkv, (B, T, 3, H, dh)), (2, 0, 3, 1, 4))
            q, k, v = qkv[0], qkv[1], qkv[2]
            out, a = nx.attention(q, k, v, mask)
            maps.append(a)
            out = nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (B, T, cfg.d))
            x = x + (nx.matmul(out, w["w_o"]) + w["b_o"])
            h = nx.layer_norm(x, w["ln2_g"], w["ln2_b"])
            h = nx.gelu(nx.matmul(h, w["w_fc1"]) + w["b_fc1"])
            x = x + (nx.matmul(h, w["w_fc2"]) + w["b_fc2"])
        x = nx.layer_norm(x, self._final["lnf_g"], self._final["lnf_b"])
        if squeeze:
            x = nx.reshape(x, (T, cfg.d))
            maps = [nx.reshape(a, a.shape[1:]) for a in maps]
        return x, AttentionRecord(maps)


def _f32(a: np.ndarray) -> np.ndarray:
    # keep values exactly representable in the f32 weight file
    return a.astype(np.float32).astype(np.float64)


def init_frozen(config: BackboneConfig) -> FrozenBackbone:
    """Scaled-normal init, deterministic in ``config.seed``."""
    rng = np.random.default_rng([config.seed, 0xB0])
    d, std = config.d, config.init_std
    qk_std = config.qk_std if config.qk_std is not None else std
    out_std = std / math.sqrt(2 * config.layers)
    layers = []
    for _ in range(config.layers):
        w_qkv = np.concatenate([rng.normal(0.0, qk_std, (d, 2 * d)),
                                rng.normal(0.0, std, (d, d))], axis=1)
        layers.append({
            "ln1_g": np.ones(d), "ln1_b": np.zeros(d),
            "w_qkv": _f32(w_qkv), "b_qkv": np.zeros(3 * d),
            "w_o": _f32(rng.normal(0.0, out_std, (d, d))), "b_o": np.zeros(d),
            "ln2_g": np.ones(d), "ln2_b": np.zeros(d),
            "w_fc1": _f32(rng.normal(0.0, std, (d, config.hidden))), "b_fc1": np.zeros(config.hidden),
            "w_fc2": _f32(rng.normal(0.0, out_std, (config.hidden, d))), "b_fc2": np.zeros(d),
        })
    final = {"lnf_g": np.ones(d), "lnf_b": np.zeros(d)}
    return FrozenBackbone(config, layers, final)


def save_backbone(bb: FrozenBackbone, path) -> None:
    """FWT1: magic, u32 d/L/H/mlp_ratio/seed, f64 init_std, f64 qk_std, f32 weights."""
    cfg = bb.config
    qk = cfg.qk_std if cfg.qk_std is not None else -1.0
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<5I2d", cfg.d, cfg.layers, cfg.heads, cfg.mlp_ratio, cfg.seed,
                             cfg.init_std, qk))
        for w in bb.weights():
            fh.write(w.astype("<f4").tobytes())


def load_backbone(path) -> FrozenBackbone:
    raw = Path(path).read_bytes()
    head = 4 + struct.calcsize("<5I2d")
    if len(raw) < head:
        raise ValueError("truncated backbone file")
    if raw[:4] != WEIGHT_MAGIC:
        raise ValueError("bad magic")
    d, L, H, ratio, seed, std, qk = struct.unpack("<5I2d", raw[4:head])
    cfg = BackboneConfig(d=d, layers=L, heads=H, mlp_ratio=ratio, seed=seed, init_std=std,
                         qk_std=None if qk < 0 else qk)
    if len(raw) != head + 4 * cfg.n_params():
        raise ValueError("backbone payload length mismatch")
    flat = np.frombuffer(raw, dtype="<f4", offset=head).astype(np.float64)
    pos = 0

    def take(shape):
        nonlocal pos
        n = math.prod(shape)
        out = flat[pos:pos + n].reshape(shape)
        pos += n
        return out

    shapes = cfg.layer_shapes()
    layers = [{k: take(shapes[k]) for k in LAYER_KEYS} for _ in range(L)]
    final = {k: take((d,)) for k in FINAL_KEYS}
    return FrozenBackbone(cfg, layers, final)
