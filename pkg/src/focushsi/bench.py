"""Desk-scale synthetic benchmark: defaults shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .backbone import BackboneConfig, FrozenBackbone, init_frozen
from .explain import evaluate
from .hsi import Sample, SyntheticSpec, default_partition, generate_synthetic
from .metrics import EvalReport
from .train import FitResult, TrainConfig, build_model, fit

ABLATION_CONFIGS = (
    ("w/o Sink", False, False),
    ("+ Sink, no loss", True, False),
    ("+ Sink & Loss", True, True),
)


@dataclass(frozen=True)
class Benchmark:
    """One synthetic run: data, backbone and optimisation settings."""
    seed: int = 0
    classes: int = 2
    bands: int = 20
    size: int = 16
    patch: int = 4
    groups: int = 10
    amplitude: float = 0.5
    noise: float = 0.02
    samples_per_class: int = 40
    task: str = "cls"
    d: int = 16
    layers: int = 2
    heads: int = 4
    init_std: float = 0.1
    qk_std: float | None = 0.5
    epochs: int = 60
    lr: float = 1e-2
    lam: float = 1e-3
    rho_aux: float = 0.25
    batch_size: int = 8
    pos_scale: float = 0.0

    def data_spec(self) -> SyntheticSpec:
        return SyntheticSpec(classes=self.classes, bands=self.bands, height=self.size, width=self.size,
                             n_groups=self.groups, amplitude=self.amplitude, noise=self.noise,
                             samples_per_class=self.samples_per_class, task=self.task, seed=self.seed)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(d=self.d, layers=self.layers, heads=self.heads, seed=self.seed,
                              init_std=self.init_std, qk_std=self.qk_std)

    def train_config(self, **overrides) -> TrainConfig:
        cfg = TrainConfig(lr=self.lr, epochs=self.epochs, lam=self.lam, groups=self.groups,
                          rho_aux=self.rho_aux, seed=self.seed, batch_size=self.batch_size,
                          task=self.task)
        return replace(cfg, **overrides)


def split(samples: Sequence[Sample], seed: int, train_frac: float = 0.8) -> tuple[list[Sample], list[Sample]]:
    """Deterministic shuffled train/held-out split."""
    perm = np.random.default_rng([seed, 0x5B]).permutation(len(samples))
    cut = int(round(train_frac * len(samples)))
    return [samples[i] for i in perm[:cut]], [samples[i] for i in perm[cut:]]


@dataclass
class RunResult:
    fit: FitResult
    report: EvalReport
    backbone: FrozenBackbone
    train: list[Sample]
    test: list[Sample]


def run(bench: Benchmark, samples: Sequence[Sample] | None = None, use_sink: bool = True,
        lam: float | None = None, backbone: FrozenBackbone | None = None) -> RunResult:
    """Generate (or reuse) data, train on the 80% split and evaluate on the rest."""
    if samples is None:
        samples = generate_synthetic(bench.data_spec())
    bb = backbone if backbone is not None else init_frozen(bench.backbone_config())
    part = default_partition(samples[0].cube.wavelengths, bench.groups)
    train, test = split(samples, bench.seed)
    cfg = bench.train_config(lam=bench.lam if lam is None else lam)
    n_classes = bench.classes if bench.task == "cls" else None
    res = fit(train, bb, cfg, part, bench.patch, use_sink, n_classes, bench.pos_scale)
    model = build_model(bb, res.params, part, bench.patch, use_sink, bench.pos_scale)
    return RunResult(res, evaluate(model, res.parts, test), bb, train, test)


def ablation(bench: Benchmark, samples: Sequence[Sample] | None = None) -> list[tuple[str, RunResult]]:
    """The three sink configurations on identical data, split and backbone."""
    if samples is None:
        samples = generate_synthetic(bench.data_spec())
    bb = init_frozen(bench.backbone_config())
    return [(name, run(bench, samples, use_sink, None if with_loss else 0.0, bb))
            for name, use_sink, with_loss in ABLATION_CONFIGS]


def planted_hit_rate(bench: Benchmark, report: EvalReport) -> float:
    """Fraction of evaluated samples whose top group is their class's planted group."""
    planted = bench.data_spec().planted_groups()
    rows = report.per_sample
    return float(np.mean([r["top_group"] == planted[int(r["label"]) if bench.task == "cls" else 0]
                          for r in rows]))
