"""Combined task + sink objective, AdamW, and the frozen-backbone training loop."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .backbone import AttentionRecord, BackboneConfig, FrozenBackbone
from .hsi import BandPartition, Sample
from .model import PARAM_ORDER, FocusModel, FocusParams, init_params
from .numerics import Tensor
from .sink import HeadPartition, select_aux_heads, sink_loss, sink_rate

log = logging.getLogger(__name__)

STATE_MAGIC = b"FOS1"


class NumericAbort(RuntimeError):
    """Training hit a non-finite value."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 1e-2
    eps: float = 1e-8
    epochs: int = 100
    lam: float = 1e-3
    groups: int = 10
    rho_aux: float = 0.25
    seed: int = 0
    batch_size: int = 8
    task: str = "cls"
    warmup_epochs: int = 1
    calib_size: int = 16

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr and batch size must be positive, epochs non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.lam < 0:
            raise ValueError("weight decay and lambda must be non-negative")
        if self.task not in ("cls", "reg"):
            raise ValueError("task must be 'cls' or 'reg'")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: FocusParams) -> "OptimizerState":
        arrays = params.arrays()
        return cls({k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()})


def optimizer_step(params: FocusParams, grads: dict[str, np.ndarray], state: OptimizerState,
                   cfg: TrainConfig) -> None:
    """AdamW with bias-corrected moments and decoupled weight decay, in place."""
    for name in PARAM_ORDER:
        if name not in grads:
            raise ValueError(f"missing gradient for {name}")
        if not np.all(np.isfinite(grads[name])):
            raise NumericAbort(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name in PARAM_ORDER:
        g = grads[name]
        p = getattr(params, name)
        m = state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps) + cfg.weight_decay * p.data
        p.data = p.data - cfg.lr * update


def save_state(state: OptimizerState, path) -> None:
    with open(path, "wb") as fh:
        fh.write(STATE_MAGIC)
        fh.write(struct.pack("<Q", state.step))
        for name in PARAM_ORDER:
            fh.write(state.m[name].astype("<f8").tobytes())
            fh.write(state.v[name].astype("<f8").tobytes())


def load_state(path, params: FocusParams) -> OptimizerState:
    raw = Path(path).read_bytes()
    if raw[:4] != STATE_MAGIC:
        raise ValueError("bad magic")
    (step,) = struct.unpack("<Q", raw[4:12])
    pos = 12
    m, v = {}, {}
    for name in PARAM_ORDER:
        shape = getattr(params, name).shape
        n = int(np.prod(shape)) * 8
        m[name] = np.frombuffer(raw[pos:pos + n], dtype="<f8").reshape(shape).copy()
        pos += n
        v[name] = np.frombuffer(raw[pos:pos + n], dtype="<f8").reshape(shape).copy()
        pos += n
    return OptimizerState(m, v, step)


def task_loss(pred: Tensor, target, task: str = "cls") -> Tensor:
    target = np.asarray(target)
    if task == "cls":
        K = pred.shape[-1]
        t = target.astype(np.intp)
        if np.any(t < 0) or np.any(t >= K) or np.any(t != target):
            raise ValueError(f"target out of range 0..{K - 1}")
        logp = nx.log_softmax(pred)
        picked = logp[np.arange(pred.shape[0]), t]
        return -nx.mean(picked)
    diff = pred - Tensor(target.astype(np.float64))
    return nx.mean(nx.square(diff))


def total_loss(pred: Tensor, target, attn: AttentionRecord | None, parts: HeadPartition | None,
               lam: float, task: str = "cls", sink_index: int | None = 0) -> Tensor:
    """Task loss (cross-entropy on (B, K) logits, or MSE) plus the sink attraction loss."""
    loss = task_loss(pred, target, task)
    if attn is not None and parts is not None and lam > 0:
        loss = loss + sink_loss(attn, parts, lam, sink_index)
    return loss


def overhead_ratio(params: FocusParams, backbone: FrozenBackbone | BackboneConfig) -> float:
    """Trainable scalars over frozen backbone scalars."""
    n_bb = backbone.n_params()
    return params.n_trainable() / n_bb


def expected_trainable(K: int, G: int, C: int, d: int) -> int:
    return K * G * d + d + C * d + d + K


@dataclass
class EpochLog:
    epoch: int
    task_loss: float
    sink_loss: float
    aux_sink_rate: float | None
    accuracy: float | None


@dataclass
class FitResult:
    params: FocusParams
    parts: HeadPartition
    log: list[EpochLog] = field(default_factory=list)
    state: OptimizerState | None = None


def _targets(samples: Sequence[Sample], task: str) -> np.ndarray:
    if task == "cls":
        return np.array([int(s.label) for s in samples], dtype=np.intp)
    return np.array([float(s.label) for s in samples], dtype=np.float64)


def pool_all(model: FocusModel, samples: Sequence[Sample]) -> tuple[np.ndarray, tuple[int, int]]:
    if not samples:
        raise ValueError("empty dataset")
    grids = {model.grid_for(s.cube.height, s.cube.width) for s in samples}
    if len(grids) != 1:
        raise ValueError("all cubes must share one spatial size")
    return np.stack([model.pool(s.cube) for s in samples]), grids.pop()


def _forward(model: FocusModel, pooled: np.ndarray, grid, task: str, labels=None):
    """(prediction tensor, attention record) for a batch."""
    if task == "cls":
        return model.all_class_logits(pooled, grid)[:2]
    logits, attn, _ = model.forward_batch(pooled, grid, np.zeros(pooled.shape[0], dtype=np.intp))
    return logits, attn


def calibrate_heads(model: FocusModel, pooled: np.ndarray, grid, labels, cfg: TrainConfig) -> HeadPartition:
    n = min(len(pooled), cfg.calib_size)
    classes = labels[:n] if cfg.task == "cls" else np.zeros(n, dtype=np.intp)
    with nx.differentiation_disabled():
        _, attn, _ = model.forward_batch(pooled[:n], grid, classes)
    return select_aux_heads([attn.array()], cfg.rho_aux)


def build_model(backbone: FrozenBackbone, params: FocusParams, partition: BandPartition,
                patch: int, use_sink: bool = True, pos_scale: float = 0.0) -> FocusModel:
    return FocusModel(backbone, params, partition, patch, use_sink=use_sink, pos_scale=pos_scale)


def fit(samples: Sequence[Sample], backbone: FrozenBackbone, cfg: TrainConfig,
        partition: BandPartition, patch: int, use_sink: bool = True,
        n_classes: int | None = None, pos_scale: float = 0.0) -> FitResult:
    """Warm-up epoch(s) with λ=0, freeze the aux-head partition, then train with the full objective."""
    if not samples:
        raise ValueError("empty dataset")
    labels = _targets(samples, cfg.task)
    if cfg.task == "cls":
        K = n_classes if n_classes is not None else int(labels.max()) + 1
        missing = set(range(K)) - set(labels.tolist())
        if missing:
            raise ValueError(f"no training samples for classes {sorted(missing)}")
    else:
        K = 1
    C = samples[0].cube.bands
    params = init_params(K, partition.n_groups, C, backbone.config.d, cfg.seed)
    model = build_model(backbone, params, partition, patch, use_sink, pos_scale)
    pooled, grid = pool_all(model, samples)
    state = OptimizerState.zeros(params)
    rng = np.random.default_rng([cfg.seed, 0x7A])
    sink_idx = 0 if use_sink else None
    parts: HeadPartition | None = None
    history: list[EpochLog] = []
    N = len(samples)

    for epoch in range(cfg.epochs):
        if parts is None and epoch >= cfg.warmup_epochs:
            parts = calibrate_heads(model, pooled, grid, labels, cfg)
            log.info("aux heads per layer: %s", parts.aux)
        lam = cfg.lam if parts is not None else 0.0
        perm = rng.permutation(N)
        sums = {"task": 0.0, "sink": 0.0, "correct": 0, "aux_num": 0.0, "aux_den": 0}
        for start in range(0, N, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            with nx.record() as tape:
                pred, attn = _forward(model, pooled[idx], grid, cfg.task)
                tl = task_loss(pred, labels[idx], cfg.task)
                sl = sink_loss(attn, parts, lam, sink_idx) if parts is not None else Tensor(0.0)
                loss = tl + sl
            if not np.isfinite(loss.data):
                raise NumericAbort(f"non-finite loss at epoch {epoch}")
            grads = nx.backward(tape, loss)
            del tape
            named = {name: grads.get(leaf, np.zeros_like(leaf.data))
                     for name, leaf in params.leaves().items()}
            optimizer_step(params, named, state, cfg)
            b = len(idx)
            sums["task"] += float(tl.data) * b
            sums["sink"] += float(sl.data) * b
            if cfg.task == "cls":
                sums["correct"] += int(np.sum(np.argmax(pred.data, axis=1) == labels[idx]))
            if parts is not None and use_sink:
                a = attn.array()
                sums["aux_num"] += sink_rate(a, "aux", parts) * b
                sums["aux_den"] += b
        entry = EpochLog(
            epoch=epoch,
            task_loss=sums["task"] / N,
            sink_loss=sums["sink"] / N + 0.0,
            aux_sink_rate=sums["aux_num"] / sums["aux_den"] if sums["aux_den"] else None,
            accuracy=sums["correct"] / N if cfg.task == "cls" else None,
        )
        history.append(entry)
        log.info("epoch %d task %.5f sink %.3e", epoch, entry.task_loss, entry.sink_loss)

    if parts is None:
        parts = calibrate_heads(model, pooled, grid, labels, cfg)
    return FitResult(params, parts, history, state)


def loss_closure(model: FocusModel, samples: Sequence[Sample], parts: HeadPartition, lam: float,
                 task: str = "cls"):
    """``f(leaves) -> total loss`` over ``samples`` for gradient checking."""
    labels = _targets(samples, task)
    pooled, grid = pool_all(model, samples)
    sink_idx = 0 if model.use_sink else None

    def f(leaves):
        saved = model.params
        model.params = FocusParams(**{k: leaves[k] for k in PARAM_ORDER})
        try:
            pred, attn = _forward(model, pooled, grid, task)
            return total_loss(pred, labels, attn, parts, lam, task, sink_idx)
        finally:
            model.params = saved

    return f

