"""Spectral prompts, [SINK] token, group-structured tokens and class scoring."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .backbone import AttentionRecord, FrozenBackbone
from .hsi import BandPartition, HsiCube
from .numerics import Tensor

PARAM_MAGIC = b"FPM1"
PARAM_ORDER = ("phi", "prompts", "sink", "w", "b")


@dataclass
class FocusParams:
    """The trainable set: adapter, prompt bank, sink token, readout."""

    phi: Tensor  # (C, d)
    prompts: Tensor  # (K, G, d)
    sink: Tensor  # (d,)
    w: Tensor  # (d,)
    b: Tensor  # (K,)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        K, G, d = self.prompts.shape
        return K, G, self.phi.shape[0], d

    def leaves(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in PARAM_ORDER}

    def n_trainable(self) -> int:
        return sum(t.data.size for t in self.leaves().values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.leaves().items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "FocusParams":
        return cls(**{k: Tensor(np.array(arrays[k], dtype=np.float64), trainable=True, name=k)
                      for k in PARAM_ORDER})

    def copy(self) -> "FocusParams":
        return FocusParams.from_arrays(self.arrays())


def init_params(K: int, G: int, C: int, d: int, seed: int) -> FocusParams:
    rng = np.random.default_rng([seed, 0xF0C5])
    return FocusParams.from_arrays({
        "phi": rng.normal(0.0, 1.0 / math.sqrt(C), (C, d)),
        "prompts": rng.normal(0.0, 0.02, (K, G, d)),
        "sink": rng.normal(0.0, 0.02, d),
        "w": np.zeros(d),
        "b": np.zeros(K),
    })


def save_params(params: FocusParams, path) -> None:
    K, G, C, d = params.shape
    with open(path, "wb") as fh:
        fh.write(PARAM_MAGIC)
        fh.write(struct.pack("<4I", K, G, C, d))
        for k in PARAM_ORDER:
            fh.write(getattr(params, k).data.astype("<f4").tobytes())


def load_params(path) -> FocusParams:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != PARAM_MAGIC:
        raise ValueError("bad magic")
    K, G, C, d = struct.unpack("<4I", raw[4:20])
    shapes = {"phi": (C, d), "prompts": (K, G, d), "sink": (d,), "w": (d,), "b": (K,)}
    n = sum(math.prod(s) for s in shapes.values())
    if len(raw) != 20 + 4 * n:
        raise ValueError("parameter payload length mismatch")
    flat = np.frombuffer(raw, dtype="<f4", offset=20).astype(np.float64)
    arrays, pos = {}, 0
    for k in PARAM_ORDER:
        size = math.prod(shapes[k])
        arrays[k] = flat[pos:pos + size].reshape(shapes[k])
        pos += size
    return FocusParams.from_arrays(arrays)


def round_to_f32(params: FocusParams) -> FocusParams:
    return FocusParams.from_arrays({k: v.astype(np.float32).astype(np.float64)
                                    for k, v in params.arrays().items()})


@dataclass(frozen=True)
class TokenLayout:
    """Token indices: [sink?] + G prompts + G·Hp·Wp patches (group-major)."""

    n_groups: int
    grid: tuple[int, int]  # (Hp, Wp)
    has_sink: bool = True

    @property
    def sink_index(self) -> int | None:
        return 0 if self.has_sink else None

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def prompt_offset(self) -> int:
        return 1 if self.has_sink else 0

    @property
    def patch_offset(self) -> int:
        return self.prompt_offset + self.n_groups

    @property
    def length(self) -> int:
        return self.patch_offset + self.n_groups * self.n_patches

    def prompt_index(self, g: int) -> int:
        return self.prompt_offset + g

    def patch_index(self, x: int, y: int, g: int) -> int:
        Hp, Wp = self.grid
        return self.patch_offset + g * self.n_patches + y * Wp + x

    def group_patch_slice(self, g: int) -> slice:
        start = self.patch_offset + g * self.n_patches
        return slice(start, start + self.n_patches)

    def prompt_slice(self) -> slice:
        return slice(self.prompt_offset, self.patch_offset)

    def mask(self) -> np.ndarray:
        """``mask[i, j]`` is True when query ``i`` may attend key ``j``."""
        T = self.length
        m = np.zeros((T, T), dtype=bool)
        patches = slice(self.patch_offset, T)
        if self.has_sink:
            m[0, :] = True
            m[:, 0] = True
        m[patches, patches] = True
        for g in range(self.n_groups):
            p = self.prompt_index(g)
            m[p, p] = True
            m[p, self.group_patch_slice(g)] = True
        return m


def sinusoid_2d(grid: tuple[int, int], d: int) -> np.ndarray:
    """Fixed 2-D sine/cosine position table, shape ``(Hp·Wp, d)`` in row-major (y, x)."""
    Hp, Wp = grid
    half = d // 2
    n_freq = max(half // 2, 1)
    freqs = 1.0 / (10000.0 ** (np.arange(n_freq) / n_freq))

    def enc(pos, width):
        ang = np.outer(pos, freqs)
        out = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
        return out[:, :width]

    ys, xs = np.meshgrid(np.arange(Hp), np.arange(Wp), indexing="ij")
    table = np.zeros((Hp * Wp, d))
    table[:, :half] = enc(ys.ravel(), half)
    table[:, half:2 * half] = enc(xs.ravel(), half)
    return table


class FocusModel:
    """A frozen backbone plus FOCUS parameters and the fixed token embeddings."""

    def __init__(self, backbone: FrozenBackbone, params: FocusParams, partition: BandPartition,
                 patch: int, use_sink: bool = True, pos_scale: float = 0.0,
                 embed_seed: int | None = None):
        K, G, C, d = params.shape
        if d != backbone.config.d:
            raise ValueError(f"parameter width {d} != backbone width {backbone.config.d}")
        if partition.n_groups != G:
            raise ValueError(f"partition has {partition.n_groups} groups, prompts have {G}")
        if partition.n_bands != C:
            raise ValueError(f"partition covers {partition.n_bands} bands, adapter has {C}")
        self.backbone = backbone
        self.params = params
        self.partition = partition
        self.patch = patch
        self.use_sink = use_sink
        self.pos_scale = pos_scale
        seed = backbone.config.seed if embed_seed is None else embed_seed
        rng = np.random.default_rng([seed, 0x6E])
        self.group_emb = rng.normal(0.0, 0.02, (G, d))
        self._group_weights = np.zeros((G, C))
        for g, members in enumerate(partition.groups):
            self._group_weights[g, list(members)] = 1.0 / len(members)

    @property
    def n_classes(self) -> int:
        return self.params.shape[0]

    @property
    def n_bands(self) -> int:
        return self.params.shape[2]

    def grid_for(self, height: int, width: int) -> tuple[int, int]:
        if height % self.patch or width % self.patch:
            raise ValueError(f"image {height}x{width} not divisible by patch size {self.patch}")
        return height // self.patch, width // self.patch

    def layout(self, grid: tuple[int, int]) -> TokenLayout:
        return TokenLayout(self.partition.n_groups, grid, self.use_sink)

    # -- embedding

    def pool(self, cube: HsiCube) -> np.ndarray:
        """Per-band patch means, shape ``(Hp·Wp, C)``."""
        if cube.bands != self.n_bands:
            raise ValueError(f"cube has C={cube.bands} bands but model expects C={self.n_bands}")
        Hp, Wp = self.grid_for(cube.height, cube.width)
        p = self.patch
        pooled = cube.data.reshape(cube.bands, Hp, p, Wp, p).mean(axis=(2, 4))
        return pooled.reshape(cube.bands, Hp * Wp).T

    def tokenize(self, pooled: np.ndarray, grid: tuple[int, int]) -> Tensor:
        """Patch tokens ``(*batch, G·Hp·Wp, d)`` from pooled patches ``(*batch, Hp·Wp, C)``."""
        pooled = np.asarray(pooled, dtype=np.float64)
        G = self.partition.n_groups
        P = grid[0] * grid[1]
        # X[..., g*P + p, λ] = pooled[..., p, λ] / |B_g| for λ in B_g
        x = pooled[..., None, :, :] * self._group_weights[:, None, :]
        x = x.reshape(pooled.shape[:-2] + (G * P, self.n_bands))
        d = self.params.shape[3]
        fixed = (self.pos_scale * np.tile(sinusoid_2d(grid, d), (G, 1))
                 + np.repeat(self.group_emb, P, axis=0))
        return nx.matmul(Tensor(x), self.params.phi) + fixed

    def assemble(self, classes, tokens: Tensor, grid: tuple[int, int]):
        """Sequences ``[s, p_{c,1..G}, patches]`` for each row of a token batch."""
        classes = np.atleast_1d(np.asarray(classes, dtype=np.intp))
        if np.any(classes < 0) or np.any(classes >= self.n_classes):
            raise ValueError(f"class index out of range 0..{self.n_classes - 1}")
        B = tokens.shape[0]
        d = tokens.shape[-1]
        parts = []
        if self.use_sink:
            parts.append(nx.broadcast_to(nx.reshape(self.params.sink, (1, 1, d)), (B, 1, d)))
        parts.append(nx.take(self.params.prompts, classes, axis=0))
        parts.append(tokens)
        layout = self.layout(grid)
        return nx.concat(parts, axis=1), layout.mask(), layout

    # -- scoring

    def forward_batch(self, pooled: np.ndarray, grid: tuple[int, int], classes) -> tuple[Tensor, AttentionRecord, TokenLayout]:
        """Logits of class ``classes[i]`` on sample ``pooled[i]``."""
        tokens = self.tokenize(pooled, grid)
        seq, mask, layout = self.assemble(classes, tokens, grid)
        states, attn = self.backbone.encode(seq, mask)
        prompt_states = states[:, layout.prompt_slice(), :]
        logits = nx.matmul(nx.mean(prompt_states, axis=1), self.params.w)
        logits = logits + nx.take(self.params.b, np.asarray(classes, dtype=np.intp), axis=0)
        return logits, attn, layout

    def all_class_logits(self, pooled: np.ndarray, grid: tuple[int, int]):
        """Logits ``(B, K)`` from K per-class forwards of each sample.

        The attention record is batched over ``B·K`` sequences, sample-major.
        """
        B = pooled.shape[0]
        K = self.n_classes
        rows = np.repeat(np.arange(B), K)
        classes = np.tile(np.arange(K), B)
        logits, attn, layout = self.forward_batch(pooled[rows], grid, classes)
        return nx.reshape(logits, (B, K)), attn, layout

    def forward_class(self, cube: HsiCube, c: int):
        """``(logit, attention record (L,H,T,T), layout)`` for a single cube and class."""
        pooled = self.pool(cube)[None]
        grid = self.grid_for(cube.height, cube.width)
        logits, attn, layout = self.forward_batch(pooled, grid, [c])
        return logits[0], attn.sample(0), layout

    def logits(self, cube: HsiCube) -> np.ndarray:
        pooled = self.pool(cube)[None]
        grid = self.grid_for(cube.height, cube.width)
        with nx.differentiation_disabled():
            out, _, _ = self.all_class_logits(pooled, grid)
        return out.data[0]

    def classify(self, cube: HsiCube) -> int:
        if self.n_classes < 2:
            raise ValueError("classification needs K >= 2")
        return argmax_first(self.logits(cube))


def argmax_first(values) -> int:
    """Index of the maximum; ties go to the smallest index."""
    return int(np.argmax(np.asarray(values)))
