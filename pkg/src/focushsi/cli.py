"""``focus`` command line: gen-data, train, explain, eval, ablate."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .backbone import init_frozen, load_backbone, save_backbone
from .bench import ABLATION_CONFIGS, Benchmark, run, split
from .explain import evaluate, explain, sink_metrics
from .hsi import (BandPartition, HsiCube, HsiFormatError, Sample, default_partition,
                  generate_synthetic, load_cube, mask_to_pgm, read_labels, read_pgm, save_array,
                  save_cube, write_labels, write_pgm)
from .model import load_params, save_params
from .saliency import heatmap_to_pgm
from .sink import HeadPartition, layer_sink_mass
from .train import NumericAbort, build_model, fit, save_state

log = logging.getLogger("focushsi")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(Exception):
    """Missing, malformed or incompatible input."""


def _num(v: float) -> str:
    return format(float(v), ".9g")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    if not out.is_dir():
        raise DataError(f"{out} is not a directory")
    return out


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {what}: {path}")
    return path


# ---------------------------------------------------------------- dataset I/O


def write_dataset(samples: list[Sample], out: Path) -> None:
    for sub in ("cubes", "masks", "gt"):
        (out / sub).mkdir(exist_ok=True)
    for s in samples:
        save_cube(s.cube, out / "cubes" / f"{s.sample_id}.hsc")
        write_pgm(out / "masks" / f"{s.sample_id}.pgm", mask_to_pgm(s.lesion_mask))
        gt = {"sample_id": s.sample_id, "label": s.label, "true_bands": list(s.true_bands),
              "lesion_bbox": s.lesion_bbox()}
        (out / "gt" / f"{s.sample_id}.json").write_text(json.dumps(gt) + "\n")
    write_labels(out / "labels.csv", [(s.sample_id, s.label) for s in samples])


def read_dataset(root: Path) -> list[Sample]:
    _need(root / "labels.csv", "labels file")
    try:
        rows = read_labels(root / "labels.csv")
        samples = []
        for sid, _ in rows:
            cube = load_cube(_need(root / "cubes" / f"{sid}.hsc", "cube"))
            mask = read_pgm(_need(root / "masks" / f"{sid}.pgm", "mask")) > 127
            gt = json.loads(_need(root / "gt" / f"{sid}.json", "ground truth").read_text())
            if mask.shape != (cube.height, cube.width):
                raise DataError(f"{sid}: mask {mask.shape} does not match cube {cube.height}x{cube.width}")
            samples.append(Sample(sid, cube, gt["label"], mask, tuple(gt["true_bands"])))
    except (HsiFormatError, ValueError, KeyError) as exc:
        raise DataError(str(exc)) from exc
    if not samples:
        raise DataError(f"no samples listed in {root / 'labels.csv'}")
    shapes = {s.cube.data.shape for s in samples}
    if len(shapes) != 1:
        raise DataError(f"cubes disagree on shape: {sorted(shapes)}")
    return samples


def _partition_json(part: BandPartition) -> dict:
    return {"groups": [list(g) for g in part.groups], "labels": list(part.labels),
            "boundaries": list(part.boundaries)}


def _partition_from(obj: dict) -> BandPartition:
    return BandPartition(tuple(tuple(g) for g in obj["groups"]), tuple(obj["labels"]),
                         tuple(obj.get("boundaries", ())))


# ---------------------------------------------------------------- commands


def _bench(args) -> Benchmark:
    fields = dict(seed=args.seed, classes=args.classes, bands=args.bands, size=args.size,
                  patch=args.patch, groups=args.groups, amplitude=args.amplitude, noise=args.noise,
                  samples_per_class=args.samples, task=args.task, d=args.dim, layers=args.depth,
                  heads=args.heads, init_std=args.init_std,
                  qk_std=None if args.qk_std < 0 else args.qk_std, epochs=args.epochs, lr=args.lr,
                  lam=args.lam, rho_aux=args.rho_aux, batch_size=args.batch_size,
                  pos_scale=args.pos_scale)
    try:
        return Benchmark(**fields)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _dataset_bench(args, samples: list[Sample]) -> Benchmark:
    """Benchmark flags with data-dependent fields taken from the dataset itself."""
    classes = max(int(s.label) for s in samples) + 1 if args.task == "cls" else 1
    return replace(_bench(args), bands=samples[0].cube.bands, size=samples[0].cube.height,
                   classes=classes)


def cmd_gen_data(args) -> None:
    out = _out_dir(args.out)
    try:
        samples = generate_synthetic(_bench(args).data_spec())
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    write_dataset(samples, out)
    print(f"wrote {len(samples)} samples to {out}")


def cmd_train(args) -> None:
    data = Path(args.data)
    out = _out_dir(args.out)
    samples = read_dataset(data)
    bench = _dataset_bench(args, samples)
    train, _ = split(samples, bench.seed)
    try:
        part = default_partition(samples[0].cube.wavelengths, bench.groups)
        bb = init_frozen(bench.backbone_config())
        cfg = bench.train_config()
        n_classes = bench.classes if bench.task == "cls" else None
        use_sink = not args.no_sink
        res = fit(train, bb, cfg, part, bench.patch, use_sink, n_classes, bench.pos_scale)
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    save_params(res.params, out / "model.fpm")
    save_backbone(bb, out / "backbone.fwt")
    save_state(res.state, out / "optimizer.fos")
    (out / "heads.json").write_text(json.dumps(res.parts.to_json()) + "\n")
    config = {"train": asdict(cfg), "patch": bench.patch, "use_sink": use_sink,
              "pos_scale": bench.pos_scale, "partition": _partition_json(part),
              "backbone_checksum": bb.checksum()}
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    rows = [[e.epoch, _num(e.task_loss), _num(e.sink_loss),
             "" if e.aux_sink_rate is None else _num(e.aux_sink_rate),
             "" if e.accuracy is None else _num(e.accuracy)] for e in res.log]
    _write_csv(out / "train_log.csv", ["epoch", "task_loss", "sink_loss", "aux_sink_rate", "accuracy"], rows)
    print(f"trained {len(res.log)} epochs on {len(train)} samples; checkpoint in {out}")


def load_checkpoint(path: Path):
    """(model, head partition, config dict) from a training output directory."""
    try:
        config = json.loads(_need(path / "config.json", "config").read_text())
        bb = load_backbone(_need(path / "backbone.fwt", "backbone"))
        params = load_params(_need(path / "model.fpm", "checkpoint"))
        parts = HeadPartition.from_json(json.loads(_need(path / "heads.json", "head partition").read_text()))
        part = _partition_from(config["partition"])
        model = build_model(bb, params, part, config["patch"], config["use_sink"], config["pos_scale"])
    except (ValueError, KeyError) as exc:
        raise DataError(f"bad checkpoint {path}: {exc}") from exc
    return model, parts, config


def write_explanation(ex, model, parts, cube: HsiCube, out: Path) -> None:
    save_array(cube.wavelengths, np.transpose(ex.cube.t, (2, 0, 1)), out / "saliency.hsc")
    write_pgm(out / "heatmap.pgm", heatmap_to_pgm(ex.heatmap))
    Hp, Wp = ex.heatmap.shape
    _write_csv(out / "heatmap.csv", ["x", "y", "M"],
               [[x, y, _num(ex.heatmap[y, x])] for y in range(Hp) for x in range(Wp)])
    _write_csv(out / "curve.csv", ["wavelength_nm", "B"],
               [[_num(w), _num(b)] for w, b in zip(cube.wavelengths, ex.curve)])
    write_pgm(out / "rollout.pgm", heatmap_to_pgm(ex.rollout))

    rows = [[name, "", "", _num(v)] for name, v in sink_metrics(ex.attn, parts, ex.layout, ex.layer_maps).items()]
    if ex.layout.has_sink:
        for layer, v in enumerate(layer_sink_mass(ex.attn)):
            rows.append(["layer_sink_mass", layer, "", _num(v)])
        per_head = ex.attn[..., 0].mean(axis=-1)
        for layer in range(per_head.shape[0]):
            for head in range(per_head.shape[1]):
                rows.append(["head_sink_rate", layer, head, _num(per_head[layer, head])])
    _write_csv(out / "sink.csv", ["metric", "layer", "head", "value"], rows)
    summary = {"class": ex.class_id, "logits": [float(v) for v in ex.logits]}
    (out / "prediction.json").write_text(json.dumps(summary) + "\n")


def cmd_explain(args) -> None:
    model, parts, _ = load_checkpoint(Path(args.checkpoint))
    try:
        cube = load_cube(_need(Path(args.cube), "cube"))
    except HsiFormatError as exc:
        raise DataError(str(exc)) from exc
    if cube.bands != model.n_bands:
        raise DataError(f"cube has C={cube.bands} bands but the checkpoint expects C={model.n_bands}")
    out = _out_dir(args.out)
    try:
        with nx.differentiation_disabled():
            ex = explain(model, parts, cube, args.class_id, args.mode)
            write_explanation(ex, model, parts, cube, out)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    print(f"explained class {ex.class_id}; artifacts in {out}")


def cmd_eval(args) -> None:
    model, parts, config = load_checkpoint(Path(args.checkpoint))
    samples = read_dataset(Path(args.data))
    out = _out_dir(args.out)
    train, test = split(samples, config["train"]["seed"])
    chosen = {"test": test, "train": train, "all": samples}[args.split]
    if not chosen:
        raise DataError(f"empty {args.split} split")
    if samples[0].cube.bands != model.n_bands:
        raise DataError(f"data has C={samples[0].cube.bands} bands but the checkpoint expects C={model.n_bands}")
    try:
        report = evaluate(model, parts, chosen, args.k, args.mode)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    report.check_ranges()
    _write_csv(out / "report.csv", ["metric", "value"],
               [[n, "" if v == "" else _num(v)] for n, v in report.rows()])
    keys = ["sample_id", "label", "pred", "top_group", "bio", "spatial_iou", "auprc", "rollout_iou"]
    _write_csv(out / "per_sample.csv", keys,
               [[r[k] if isinstance(r[k], (int, str)) else _num(r[k]) for k in keys] for r in report.per_sample])
    text = report.summary()
    (out / "summary.txt").write_text(text)
    print(text, end="")


ABLATION_HEADER = ["config", "accuracy", "bio_at_5", "collapse_rate", "sink_consistency", "sink_rate"]


def cmd_ablate(args) -> None:
    samples = read_dataset(Path(args.data))
    out = _out_dir(args.out)
    bench = _dataset_bench(args, samples)
    bb = init_frozen(bench.backbone_config())
    rows = []
    try:
        for name, use_sink, with_loss in ABLATION_CONFIGS:
            rep = run(bench, samples, use_sink, None if with_loss else 0.0, bb).report
            rate = rep.sink.get("sink_rate")
            rows.append([name, _num(rep.accuracy), _num(rep.bio_at_k), _num(rep.sink["collapse_rate"]),
                         _num(rep.sink["sink_consistency"]), "" if rate is None else _num(rate)])
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    _write_csv(out / "ablation.csv", ABLATION_HEADER, rows)
    for r in rows:
        print(",".join(str(v) for v in r))


# ---------------------------------------------------------------- parser


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    d = Benchmark()
    p.add_argument("--classes", type=int, default=d.classes)
    p.add_argument("--bands", type=int, default=d.bands)
    p.add_argument("--size", type=int, default=d.size, help="cube height and width in pixels")
    p.add_argument("--samples", type=int, default=d.samples_per_class, help="samples per class")
    p.add_argument("--amplitude", type=float, default=d.amplitude, help="planted reflectance bump")
    p.add_argument("--noise", type=float, default=d.noise, help="Gaussian noise sigma")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = Benchmark()
    p.add_argument("--groups", type=int, default=d.groups, help="spectral groups G")
    p.add_argument("--patch", type=int, default=d.patch)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--lambda", dest="lam", type=float, default=d.lam, help="sink loss weight")
    p.add_argument("--rho-aux", type=float, default=d.rho_aux, help="fraction of heads routed to the sink")
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--dim", type=int, default=d.d, help="backbone width")
    p.add_argument("--depth", type=int, default=d.layers, help="backbone layers")
    p.add_argument("--heads", type=int, default=d.heads)
    p.add_argument("--init-std", type=float, default=d.init_std)
    p.add_argument("--qk-std", type=float, default=d.qk_std, help="query/key init std; negative uses --init-std")
    p.add_argument("--pos-scale", type=float, default=d.pos_scale, help="weight of the 2-D sinusoidal position code")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="focus", description="Spectral prompts and a sink token on a frozen ViT.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--task", choices=("cls", "reg"), default="cls")

    p = sub.add_parser("gen-data", help="write a synthetic dataset with planted ground truth")
    common(p)
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train prompts, sink and adapter on a dataset")
    common(p)
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--no-sink", action="store_true", help="train without the sink token")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", help="saliency artifacts for one cube")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--class", dest="class_id", type=int, default=None,
                   help="class to explain (default: the predicted class)")
    p.add_argument("--mode", choices=("faithful", "band-weighted"), default="faithful")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("eval", help="metrics on the held-out split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--mode", choices=("faithful", "band-weighted"), default="faithful")
    p.add_argument("-k", type=int, default=5, help="bands compared by BIO@k")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="w/o sink, sink without loss, sink with loss")
    common(p)
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except DataError as exc:
        print(f"focus: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as exc:
        print(f"focus: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
