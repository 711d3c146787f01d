import csv
import json

import numpy as np
import pytest

from focushsi import cli
from focushsi import numerics as nx
from focushsi.hsi import generate_synthetic, load_cube, planted_contrast, read_pgm
from focushsi.model import init_params, load_params
from focushsi.train import NumericAbort

SMALL = ["--samples", "4", "--size", "8", "--bands", "8", "--groups", "2", "--patch", "4",
         "--dim", "8", "--heads", "2", "--seed", "3"]


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", *SMALL, "--out", str(root / "data")]) == 0
    assert cli.main(["train", *SMALL, "--epochs", "3", "--data", str(root / "data"), "--out", str(root / "ckpt")]) == 0
    return root


def test_gen_data_is_deterministic(tmp_path, workspace):
    assert cli.main(["gen-data", *SMALL, "--out", str(tmp_path / "again")]) == 0
    assert _files(tmp_path / "again") == _files(workspace / "data")


def test_gen_data_layout_and_ground_truth(workspace):
    data = workspace / "data"
    labels = _rows(data / "labels.csv")
    assert labels[0] == ["sample_id", "label"] and len(labels) == 1 + 2 * 4
    gt = json.loads((data / "gt" / "s00001.json").read_text())
    assert set(gt) == {"sample_id", "label", "true_bands", "lesion_bbox"}
    mask = read_pgm(data / "masks" / "s00001.pgm") > 0
    ys, xs = np.nonzero(mask)
    assert gt["lesion_bbox"] == [xs.min(), ys.min(), xs.max() + 1, ys.max() + 1]
    assert load_cube(data / "cubes" / "s00001.hsc").bands == 8


def test_noiseless_planted_contrast_exact(tmp_path):
    assert cli.main(["gen-data", *SMALL, "--noise", "0", "--out", str(tmp_path)]) == 0
    s = cli.read_dataset(tmp_path)[0]
    c = planted_contrast(s)
    planted = list(s.true_bands)
    others = [b for b in range(8) if b not in planted]
    assert np.allclose(c[planted], 0.5, atol=1e-6)
    assert np.allclose(c[others], 0.0, atol=1e-6)


def test_train_outputs(workspace):
    ckpt = workspace / "ckpt"
    assert {"model.fpm", "backbone.fwt", "heads.json", "config.json", "train_log.csv", "optimizer.fos"} <= set(_files(ckpt))
    log = _rows(ckpt / "train_log.csv")
    assert log[0] == ["epoch", "task_loss", "sink_loss", "aux_sink_rate", "accuracy"] and len(log) == 4


def test_train_epochs_zero_is_init(tmp_path, workspace):
    args = ["train", *SMALL, "--epochs", "0", "--data", str(workspace / "data"), "--out", str(tmp_path)]
    assert cli.main(args) == 0
    got = load_params(tmp_path / "model.fpm")
    ref = init_params(2, 2, 8, 8, 3)
    for k, v in ref.arrays().items():
        assert np.array_equal(got.arrays()[k], v.astype(np.float32).astype(np.float64))


def test_lambda_zero_changes_sink_loss_column(tmp_path, workspace):
    args = ["train", *SMALL, "--epochs", "3", "--lambda", "0", "--data", str(workspace / "data"), "--out", str(tmp_path)]
    assert cli.main(args) == 0
    zero = [r[2] for r in _rows(tmp_path / "train_log.csv")[1:]]
    full = [r[2] for r in _rows(workspace / "ckpt" / "train_log.csv")[1:]]
    assert set(map(float, zero)) == {0.0}
    assert zero != full


def test_numeric_abort_exit_code(tmp_path, workspace, monkeypatch):
    def boom(*a, **k):
        raise NumericAbort("non-finite gradient in leaf 'sink'")
    monkeypatch.setattr(cli, "fit", boom)
    rc = cli.main(["train", *SMALL, "--data", str(workspace / "data"), "--out", str(tmp_path)])
    assert rc == cli.EXIT_NUMERIC


def test_explain_outputs_and_determinism(tmp_path, workspace):
    cube = workspace / "data" / "cubes" / "s00002.hsc"
    outs = []
    for tag in ("a", "b"):
        args = ["explain", "--checkpoint", str(workspace / "ckpt"), "--cube", str(cube), "--out", str(tmp_path / tag)]
        assert cli.main(args) == 0
        outs.append(_files(tmp_path / tag))
    assert outs[0] == outs[1]
    assert {"saliency.hsc", "heatmap.pgm", "heatmap.csv", "curve.csv", "rollout.pgm", "sink.csv"} <= set(outs[0])
    curve = _rows(tmp_path / "a" / "curve.csv")
    assert curve[0] == ["wavelength_nm", "B"] and len(curve) == 1 + 8
    assert _rows(tmp_path / "a" / "heatmap.csv")[0] == ["x", "y", "M"]
    assert _rows(tmp_path / "a" / "sink.csv")[0] == ["metric", "layer", "head", "value"]
    assert load_cube(tmp_path / "a" / "saliency.hsc").data.shape == (8, 2, 2)


def test_explain_defaults_to_predicted_class(tmp_path, workspace):
    cube = workspace / "data" / "cubes" / "s00002.hsc"
    model, parts, _ = cli.load_checkpoint(workspace / "ckpt")
    assert cli.main(["explain", "--checkpoint", str(workspace / "ckpt"), "--cube", str(cube), "--out", str(tmp_path)]) == 0
    pred = json.loads((tmp_path / "prediction.json").read_text())
    assert pred["class"] == model.classify(load_cube(cube))


def test_explain_never_records(tmp_path, workspace, monkeypatch):
    def no_tape():
        raise AssertionError("tape requested during explain")
    monkeypatch.setattr(nx, "record", no_tape)
    cube = workspace / "data" / "cubes" / "s00000.hsc"
    assert cli.main(["explain", "--checkpoint", str(workspace / "ckpt"), "--cube", str(cube), "--out", str(tmp_path)]) == 0


def test_explain_band_mismatch(tmp_path, workspace, capsys):
    other = tmp_path / "other"
    assert cli.main(["gen-data", "--samples", "1", "--size", "8", "--bands", "6", "--groups", "2", "--out", str(other)]) == 0
    rc = cli.main(["explain", "--checkpoint", str(workspace / "ckpt"), "--cube", str(other / "cubes" / "s00000.hsc"),
                   "--out", str(tmp_path / "x")])
    assert rc == cli.EXIT_DATA
    err = capsys.readouterr().err
    assert "C=6" in err and "C=8" in err


def test_eval_report(tmp_path, workspace):
    for tag in ("a", "b"):
        assert cli.main(["eval", "--checkpoint", str(workspace / "ckpt"), "--data", str(workspace / "data"),
                         "--out", str(tmp_path / tag)]) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    rows = dict((r[0], r[1]) for r in _rows(tmp_path / "a" / "report.csv")[1:])
    for name, v in rows.items():
        lo = -1.0 if "consistency" in name else 0.0
        assert lo <= float(v) <= 1.0
    assert "accuracy" in (tmp_path / "a" / "summary.txt").read_text()


def test_usage_and_data_errors(tmp_path):
    assert cli.main(["train"]) == cli.EXIT_USAGE
    assert cli.main(["frobnicate"]) == cli.EXIT_USAGE
    assert cli.main(["eval", "--checkpoint", str(tmp_path), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == cli.EXIT_DATA
    bad = tmp_path / "bad"
    (bad / "cubes").mkdir(parents=True)
    (bad / "labels.csv").write_text("sample_id,label\ns0,0\n")
    (bad / "cubes" / "s0.hsc").write_bytes(b"HSC1\x00")
    assert cli.main(["train", "--data", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_DATA


def test_ablate_schema(tmp_path, workspace):
    out = tmp_path / "abl"
    assert cli.main(["ablate", *SMALL, "--epochs", "2", "--data", str(workspace / "data"), "--out", str(out)]) == 0
    rows = _rows(out / "ablation.csv")
    assert rows[0] == cli.ABLATION_HEADER
    assert [r[0] for r in rows[1:]] == ["w/o Sink", "+ Sink, no loss", "+ Sink & Loss"]
    assert rows[1][5] == "" and rows[2][5] != "" and rows[3][5] != ""
    assert all(r[1:5] and all(v != "" for v in r[1:5]) for r in rows[1:])


def test_threads_env_gives_same_report(tmp_path, workspace, monkeypatch):
    monkeypatch.setenv("FOCUS_THREADS", "3")
    assert cli.main(["eval", "--checkpoint", str(workspace / "ckpt"), "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "t")]) == 0
    monkeypatch.setenv("FOCUS_THREADS", "1")
    assert cli.main(["eval", "--checkpoint", str(workspace / "ckpt"), "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "s")]) == 0
    assert _files(tmp_path / "t") == _files(tmp_path / "s")


def test_generated_matches_library(workspace):
    spec = cli.Benchmark(seed=3, bands=8, size=8, groups=2, samples_per_class=4).data_spec()
    lib = generate_synthetic(spec)
    disk = cli.read_dataset(workspace / "data")
    for a, b in zip(lib, disk):
        assert np.array_equal(a.cube.data.astype(np.float32), b.cube.data)
        assert np.array_equal(a.lesion_mask, b.lesion_mask) and a.true_bands == b.true_bands
