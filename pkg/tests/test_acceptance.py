"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line (also listed in the terminal summary).

Criteria 3-6 and 10 train on the desk-scale synthetic benchmark (``focushsi.bench.Benchmark``);
the expensive runs are cached per (seed, noise, lambda, sink) so criteria share them.
"""

import csv
import functools
import itertools
import time
from dataclasses import replace

import numpy as np
import pytest

from focushsi import cli
from focushsi import numerics as nx
from focushsi.backbone import BackboneConfig, init_frozen
from focushsi.bench import Benchmark, planted_hit_rate, run
from focushsi.hsi import BandPartition, HsiCube, SyntheticSpec, generate_synthetic, ranked_truth
from focushsi.metrics import auprc, bio_at_k, spatial_iou
from focushsi.model import FocusModel, init_params
from focushsi.sink import HeadPartition
from focushsi.train import build_model, expected_trainable, loss_closure, overhead_ratio

pytestmark = pytest.mark.acceptance

SEEDS_5 = range(5)
SEEDS_10 = range(10)


@functools.lru_cache(maxsize=None)
def bench_run(seed: int, noise: float = 0.02, lam: float | None = None, use_sink: bool = True,
              epochs: int | None = None):
    """(RunResult, backbone checksum before training, wall seconds)."""
    bench = Benchmark(seed=seed, noise=noise)
    if epochs is not None:
        bench = replace(bench, epochs=epochs)
    bb = init_frozen(bench.backbone_config())
    before = bb.checksum()
    t0 = time.perf_counter()
    res = run(bench, use_sink=use_sink, lam=lam, backbone=bb)
    return res, before, time.perf_counter() - t0


# ---------------------------------------------------------------- 1


def _relative_fd_error(f, arrays, eps=1e-5):
    """max |analytic - central difference| / max(|analytic|, |fd|) over every coordinate."""
    leaves = {k: nx.Tensor(v.copy(), trainable=True, name=k) for k, v in arrays.items()}
    with nx.record() as tape:
        loss = f(leaves)
    grads = nx.backward(tape, loss)
    worst = {}
    for name, leaf in leaves.items():
        analytic = grads[leaf].ravel()
        work = {k: v.copy() for k, v in arrays.items()}
        flat = work[name].reshape(-1)
        fd = np.empty_like(analytic)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f({k: nx.Tensor(v) for k, v in work.items()}).data)
            flat[i] = orig - eps
            down = float(f({k: nx.Tensor(v) for k, v in work.items()}).data)
            flat[i] = orig
            fd[i] = (up - down) / (2 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-300)
        worst[name] = float(np.max(np.abs(analytic - fd) / denom))
    return worst


def test_c01_gradient_oracle(verdict):
    t0 = time.perf_counter()
    spec = SyntheticSpec(classes=2, bands=8, height=8, width=8, wl_max=1600, n_groups=2,
                         amplitude=0.4, noise=0.02, samples_per_class=2, seed=0)
    data = generate_synthetic(spec)
    bb = init_frozen(BackboneConfig(d=8, layers=2, heads=2, seed=0, init_std=0.1, qk_std=0.5))
    params = init_params(2, 2, 8, 8, 0)
    rng = np.random.default_rng(1)
    for leaf in params.leaves().values():  # move off the zero readout so every path carries gradient
        leaf.data = leaf.data + rng.normal(0, 0.1, leaf.data.shape)
    model = build_model(bb, params, spec.partition(), patch=2)
    assert model.grid_for(8, 8) == (4, 4)
    f = loss_closure(model, data, HeadPartition(2, ((0,), (1,))), 1e-3)
    worst = _relative_fd_error(f, params.arrays())
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert verdict(1, ok, f"max rel err per leaf: {detail}; {elapsed:.1f}s")


# ---------------------------------------------------------------- 2


def test_c02_attention_contracts(verdict):
    worst_row, masked_max, n_forward = 0.0, 0.0, 0
    for i in range(100):
        rng = np.random.default_rng(i)
        G = int(rng.integers(1, 4))
        sizes = [int(s) for s in rng.integers(1, 4, G)]
        C = sum(sizes)
        part = BandPartition.from_sizes(sizes)
        d, H = 8, int(rng.choice([2, 4]))
        bb = init_frozen(BackboneConfig(d=d, layers=int(rng.integers(1, 3)), heads=H, seed=i,
                                        init_std=float(rng.uniform(0.02, 0.5))))
        K = int(rng.integers(1, 4))
        params = init_params(K, G, C, d, i)
        params.prompts.data = rng.normal(0, 1.0, params.prompts.data.shape)
        model = FocusModel(bb, params, part, patch=2, use_sink=bool(i % 4), pos_scale=float(i % 2))
        hp, wp = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        cube = HsiCube(np.linspace(450, 950, C), rng.uniform(0, 1, (C, 2 * hp, 2 * wp)))
        _, rec, lay = model.forward_class(cube, int(rng.integers(K)))
        a = rec.array()
        worst_row = max(worst_row, float(np.max(np.abs(a.sum(-1) - 1.0))))
        blocked = ~lay.mask()
        for g in range(G):  # prompt g -> other groups' patches
            for g2 in range(G):
                if g2 != g:
                    assert blocked[lay.prompt_index(g), lay.group_patch_slice(g2)].all()
        patches = slice(lay.patch_offset, lay.length)
        assert blocked[patches, lay.prompt_slice()].all()
        masked_max = max(masked_max, float(np.max(np.abs(a[..., blocked]), initial=0.0)))
        n_forward += 1
    ok = n_forward == 100 and worst_row <= 1e-9 and masked_max == 0.0
    assert verdict(2, ok, f"{n_forward} forwards; max |row sum - 1| {worst_row:.1e}; max masked entry {masked_max}")


# ---------------------------------------------------------------- 3


def test_c03_frozen_backbone(verdict):
    res, before, _ = bench_run(0, epochs=20)
    after = res.backbone.checksum()
    epochs = len(res.fit.log)
    ok = before == after and epochs == 20
    assert verdict(3, ok, f"{epochs}-epoch run; checksum {before[:16]}... before, {after[:16]}... after")


# ---------------------------------------------------------------- 4


def test_c04_sink_efficacy(verdict):
    wins, parts, elapsed = 0, [], 0.0
    for seed in SEEDS_5:
        full, _, t1 = bench_run(seed, lam=1e-3)
        zero, _, t2 = bench_run(seed, lam=0.0)
        elapsed += t1 + t2
        fs, zs = full.report.sink, zero.report.sink
        win = fs["sink_rate_aux"] > zs["sink_rate_aux"] and fs["collapse_rate"] < zs["collapse_rate"]
        wins += win
        parts.append(f"s{seed}:{'y' if win else 'n'}(aux {fs['sink_rate_aux']:.4f}/{zs['sink_rate_aux']:.4f}, "
                     f"coll {fs['collapse_rate']:.4f}/{zs['collapse_rate']:.4f})")
    ok = wins >= 4 and elapsed < 600
    assert verdict(4, ok, f"{wins}/5 seeds (need 4); {elapsed:.0f}s; " + " ".join(parts))


# ---------------------------------------------------------------- 5


def random_top5_baseline(truths, n_bands=20, k=5, draws=20000, seed=0):
    """Monte-Carlo IoU of a uniformly random k-band set against each ground-truth set."""
    rng = np.random.default_rng(seed)
    picks = np.argsort(rng.random((draws, n_bands)), axis=1)[:, :k]
    cache = {}
    for truth in truths:
        key = tuple(sorted(truth[:k]))
        if key not in cache:
            inter = np.isin(picks, key).sum(axis=1)
            cache[key] = float(np.mean(inter / (k + len(key) - inter)))
    return float(np.mean([cache[tuple(sorted(t[:k]))] for t in truths]))


def test_c05_planted_band_recovery(verdict):
    hits, bios, truths = [], [], []
    for seed in SEEDS_10:
        res, _, _ = bench_run(seed)
        bench = Benchmark(seed=seed)
        hits.append(planted_hit_rate(bench, res.report))
        bios.append(res.report.bio_at_k)
        truths.extend(ranked_truth(s) for s in res.test)
    seeds_ok = sum(h > 0.5 for h in hits)
    baseline = random_top5_baseline(truths)
    bio = float(np.mean(bios))
    ok = seeds_ok >= 8 and bio >= 3 * baseline
    assert verdict(5, ok, f"top group correct in {seeds_ok}/10 seeds (need 8; per-seed hit rates "
                          f"{', '.join(f'{h:.2f}' for h in hits)}); BIO@5 {bio:.3f} vs random {baseline:.3f} "
                          f"(ratio {bio / baseline:.2f}, need 3)")


# ---------------------------------------------------------------- 6


def test_c06_lesion_localization(verdict):
    ious, aps = [], []
    for seed in SEEDS_5:
        res, _, _ = bench_run(seed, noise=0.0)
        ious.append(res.report.spatial_iou)
        aps.append(res.report.auprc)
    iou, ap = float(np.mean(ious)), float(np.mean(aps))
    ok = iou >= 0.5 and ap >= 0.8
    assert verdict(6, ok, f"noiseless, mean over 5 seeds: spatial IoU {iou:.3f} (need 0.5), AUPRC {ap:.3f} "
                          f"(need 0.8); per seed IoU {', '.join(f'{v:.2f}' for v in ious)}")


# ---------------------------------------------------------------- 7


def test_c07_overhead_bound(verdict):
    vit_b = BackboneConfig(d=768, layers=12, heads=12, mlp_ratio=4)
    params = init_params(4, 10, 204, 768, 0)
    closed = 4 * 10 * 768 + 768 + 204 * 768 + 768 + 4
    ratio = overhead_ratio(params, vit_b)
    ok = params.n_trainable() == closed == expected_trainable(4, 10, 204, 768) and ratio < 0.01
    assert verdict(7, ok, f"{params.n_trainable()} trainable (closed form {closed}) vs "
                          f"{vit_b.n_params()} backbone: ratio {ratio:.5f}")


# ---------------------------------------------------------------- 8


def test_c08_gradient_free_explanation(tmp_path, verdict):
    small = ["--samples", "3", "--size", "8", "--bands", "8", "--groups", "2", "--patch", "2",
             "--dim", "8", "--heads", "2"]
    assert cli.main(["gen-data", *small, "--out", str(tmp_path / "d")]) == 0
    assert cli.main(["train", *small, "--epochs", "2", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "m")]) == 0
    outs = []
    with nx.differentiation_disabled():
        for tag in "ab":
            rc = cli.main(["explain", "--checkpoint", str(tmp_path / "m"),
                           "--cube", str(tmp_path / "d" / "cubes" / "s00001.hsc"), "--out", str(tmp_path / tag)])
            assert rc == 0
            outs.append({p.name: p.read_bytes() for p in sorted((tmp_path / tag).iterdir())})
    ok = outs[0] == outs[1] and len(outs[0]) >= 6
    assert verdict(8, ok, f"{len(outs[0])} artifacts byte-identical across two runs with differentiation disabled")


# ---------------------------------------------------------------- 9


def _brute_iou(scores, mask):
    lo, hi = scores.min(), scores.max()
    pred = (scores - lo) / (hi - lo) >= 0.5
    union = np.sum(pred | mask)
    return np.sum(pred & mask) / union if union else 0.0


def _brute_ap(scores, mask):
    total, prev_recall = 0.0, 0.0
    for thr in sorted(set(scores.ravel().tolist()), reverse=True):
        sel = scores >= thr
        tp = np.sum(sel & mask)
        recall = tp / mask.sum()
        total += (recall - prev_recall) * tp / sel.sum()
        prev_recall = recall
    return total


def _brute_bio(scores, mask, k):
    order = sorted(range(9), key=lambda i: -scores.ravel()[i])
    pred = set(order[:k])
    truth = set(np.flatnonzero(mask.ravel())[:k].tolist())
    return len(pred & truth) / len(pred | truth)


def test_c09_metric_oracles(verdict):
    rng = np.random.default_rng(9)
    iou_bad = bio_bad = 0
    ap_err = 0.0
    n = 0
    for bits in itertools.product([False, True], repeat=9):
        mask = np.array(bits).reshape(3, 3)
        scores = rng.random((3, 3))
        n += 1
        iou_bad += spatial_iou(scores, mask) != _brute_iou(scores, mask)
        if mask.any():
            for k in range(1, 10):
                bio_bad += bio_at_k(scores.ravel(), np.flatnonzero(mask.ravel()).tolist(), k) != _brute_bio(scores, mask, k)
        if 0 < mask.sum() < 9:
            ap_err = max(ap_err, abs(auprc(scores, mask) - _brute_ap(scores, mask)))
    ok = n == 512 and iou_bad == 0 and bio_bad == 0 and ap_err <= 1e-12
    assert verdict(9, ok, f"{n} masks: IoU mismatches {iou_bad}, BIO mismatches {bio_bad}, max AUPRC error {ap_err:.1e}")


# ---------------------------------------------------------------- 10


def test_c10_ablation_direction(tmp_path, verdict):
    data, out = tmp_path / "data", tmp_path / "abl"
    assert cli.main(["gen-data", "--seed", "0", "--out", str(data)]) == 0
    assert cli.main(["ablate", "--seed", "0", "--data", str(data), "--out", str(out)]) == 0
    with open(out / "ablation.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    by = {r["config"]: r for r in rows}
    full, nosink = by["+ Sink & Loss"], by["w/o Sink"]
    schema = len(rows) == 3 and nosink["sink_rate"] == ""
    coll = float(full["collapse_rate"]) < float(nosink["collapse_rate"])
    cons = float(full["sink_consistency"]) > float(nosink["sink_consistency"])
    ok = schema and coll and cons
    assert verdict(10, ok, f"collapse full {float(full['collapse_rate']):.4f} vs no-sink {float(nosink['collapse_rate']):.4f}; "
                           f"consistency full {float(full['sink_consistency']):.3f} vs no-sink "
                           f"{float(nosink['sink_consistency']):.3f}; schema {'ok' if schema else 'bad'}")
