"""End-to-end command-line tests, run in-process via main()."""

import json
from pathlib import Path

import numpy as np
import pytest

from segfield.cli import main, write_obj
from segfield.model import save_pipeline
from segfield.train import build_pipeline
from segfield.volume import GridDims, LabelVolume, load_svol, read_json


def run(args, **kw):
    return main([str(a) for a in args], **kw)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    assert run(["phantom", "--n", 10, "--dims", 32, "--seed", 3, "--out", root / "data"]) == 0
    return root / "data"


def tree_bytes(root: Path) -> dict:
    return {
        str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()
    }


def test_phantom_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(["phantom", "--n", 10, "--dims", 48, "--seed", 7, "--out", out]) == 0
    assert tree_bytes(a / "subjects") == tree_bytes(b / "subjects")
    assert (a / "split.json").read_bytes() == (b / "split.json").read_bytes()


def test_phantom_split_partitions_the_ids(dataset):
    split = read_json(dataset / "split.json")
    ids = sorted(split["train"] + split["val"] + split["test"])
    assert ids == [f"s{i:04d}" for i in range(10)]
    assert len(split["train"]) == 7 and len(split["val"]) == 1


def test_existing_out_dir_is_a_usage_error(dataset, capsys):
    assert run(["phantom", "--n", 1, "--out", dataset]) == 1
    assert "already exists" in capsys.readouterr().err


def test_unknown_flag_and_subcommand(capsys):
    assert run(["train", "--bogus", "x"]) == 1
    assert run(["frobnicate"]) == 1
    capsys.readouterr()


def test_eval_of_gt_copy_is_perfect(dataset, tmp_path, capsys):
    subject = dataset / "subjects" / "s0000"
    code = run(
        ["eval", "--subject", subject, "--pred", subject / "segments.svol", "--out", tmp_path / "ev"]
    )
    assert code == 0
    report = read_json(tmp_path / "ev" / "report.json")
    assert report["dice_macro"] == 1.0
    assert report["nsd"] == 1.0
    assert report["nib"] == 0 and report["nia"] == 0
    assert report["idb"] is None and report["ida"] is None
    assert "dice 1.0000" in capsys.readouterr().out


def test_manifest_lifecycle(dataset, tmp_path):
    subject = dataset / "subjects" / "s0001"
    out = tmp_path / "ev"
    assert run(["eval", "--subject", subject, "--pred", subject / "segments.svol", "--out", out]) == 0
    man = read_json(out / "manifest.json")
    assert man["command"] == "eval"
    assert man["status"] == "done"
    assert man["version"]
    assert isinstance(man["wall_seconds"], float)
    assert man["outputs"]["report"].endswith("report.json")
    # the config echo plus argv is enough to re-run the command
    assert man["config"]["tau"] == 1.0
    assert "--subject" in man["argv"]


def test_failed_run_finalizes_manifest_as_failed(dataset, tmp_path, capsys):
    out = tmp_path / "diverged"
    with np.errstate(over="ignore", invalid="ignore"):
        code = run(
            ["pretrain", "--data", dataset, "--epochs", 4, "--resolution", 16, "--lr", "1e62",
             "--out", out]
        )
    assert code == 3
    assert "numerical" in capsys.readouterr().err
    assert read_json(out / "manifest.json")["status"] == "failed"


def test_missing_bundle_and_bad_svol_are_data_errors(dataset, tmp_path, capsys):
    assert run(["eval", "--subject", dataset / "subjects" / "nope", "--pred", "x", "--out", tmp_path / "a"]) == 2
    bad = tmp_path / "bad.svol"
    bad.write_bytes(b"JUNKJUNKJUNKJUNKJUNK")
    subject = dataset / "subjects" / "s0000"
    assert run(["eval", "--subject", subject, "--pred", bad, "--out", tmp_path / "b"]) == 2
    capsys.readouterr()


def test_threads_cap_env(dataset, tmp_path, monkeypatch, capsys):
    subject = dataset / "subjects" / "s0002"
    monkeypatch.setenv("SEGFIELD_THREADS", "2")
    out = tmp_path / "capped"
    assert run(["eval", "--subject", subject, "--pred", subject / "segments.svol", "--out", out]) == 0
    assert read_json(out / "manifest.json")["threads_cap"] == "2"
    monkeypatch.setenv("SEGFIELD_THREADS", "zero")
    assert run(["eval", "--subject", subject, "--pred", subject / "segments.svol", "--out", tmp_path / "c"]) == 1
    capsys.readouterr()


def test_workdir_anchors_relative_paths(tmp_path):
    assert run(["--workdir", tmp_path, "phantom", "--n", 1, "--dims", 32, "--seed", 1, "--out", "rel"]) == 0
    assert (tmp_path / "rel" / "split.json").exists()


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_runs")
    pre = root / "pre"
    assert run(["pretrain", "--data", dataset, "--epochs", 3, "--resolution", 16, "--out", pre]) == 0
    tr = root / "tr"
    code = run(
        ["train", "--data", dataset, "--points", 256, "--epochs", 2, "--gamma", 0.5,
         "--template-ckpt", pre / "template.snn", "--out", tr]
    )
    assert code == 0
    return tr


def test_train_log_is_ndjson_with_val_records(trained):
    records = [json.loads(line) for line in (trained / "train_log.ndjson").read_text().splitlines()]
    keys = {"epoch", "split", "loss_ce", "loss_dice", "loss_def", "loss_total", "dice_macro"}
    assert all(keys <= set(r) for r in records)
    assert any(r["split"] == "val" for r in records)
    train_recs = [r for r in records if r["split"] == "train"]
    assert [r["epoch"] for r in train_recs] == [0, 1]


def test_infer_eval_export_chain(dataset, trained, tmp_path):
    subject = dataset / "subjects" / "s0003"
    inf = tmp_path / "inf"
    assert run(["infer", "--model", trained / "model.snn", "--subject", subject, "--out", inf]) == 0
    pred = load_svol(inf / "pred.svol")
    assert pred.dims.shape == (32, 32, 32)
    ev = tmp_path / "ev"
    assert run(["eval", "--subject", subject, "--pred", inf / "pred.svol", "--out", ev]) == 0
    assert 0.0 <= read_json(ev / "report.json")["dice_macro"] <= 1.0
    ex = tmp_path / "ex"
    assert run(["export", "--subject", subject, "--pred", inf / "pred.svol", "--out", ex]) == 0
    assert (ex / "per_class_dice.csv").read_text().startswith("class,dice")
    assert (ex / "summary.csv").read_text().splitlines()[0] == "dice_macro,nsd,nib,idb,nia,ida"
    meshes = sorted(p.name for p in ex.glob("*.obj"))
    assert meshes  # at least one class produced a surface


def test_infer_mode_mismatch_is_a_data_error(dataset, trained, tmp_path, capsys):
    subject = dataset / "subjects" / "s0000"
    code = run(
        ["infer", "--model", trained / "model.snn", "--subject", subject, "--input-mode", "I",
         "--out", tmp_path / "x"]
    )
    assert code == 2
    assert "mismatch" in capsys.readouterr().err


def test_wrong_checkpoint_kind_is_a_data_error(dataset, tmp_path, capsys):
    pre = tmp_path / "pre"
    assert run(["pretrain", "--data", dataset, "--epochs", 1, "--resolution", 16, "--out", pre]) == 0
    code = run(
        ["infer", "--model", pre / "template.snn", "--subject", dataset / "subjects" / "s0000",
         "--out", tmp_path / "y"]
    )
    assert code == 2
    capsys.readouterr()


def test_infer_upsamples_past_input_resolution(tmp_path):
    # the stated shape-check: a 96^3 request against a 48^3-input model
    assert run(["phantom", "--n", 1, "--dims", 48, "--seed", 5, "--out", tmp_path / "d"]) == 0
    grid = np.random.default_rng(0).normal(size=(5, 32, 32, 32))
    pipe = build_pipeline(grid, "IBAV", seed=1, encoder_channels=(4, 8), hidden=(16,))
    save_pipeline(tmp_path / "small.snn", pipe)
    code = run(
        ["infer", "--model", tmp_path / "small.snn", "--subject", tmp_path / "d" / "subjects" / "s0000",
         "--out-dims", 96, "--out", tmp_path / "big"]
    )
    assert code == 0
    pred = load_svol(tmp_path / "big" / "pred.svol", num_classes=5)
    assert pred.dims.shape == (96, 96, 96)
    assert pred.data.max() < 5  # every voxel holds a valid class id


def test_obj_writer_counts(tmp_path):
    lab = LabelVolume(np.zeros((3, 3, 3), dtype=np.uint8), 2)
    lab.data[1, 1, 1] = 1
    p = tmp_path / "one.obj"
    assert write_obj(p, lab, 1) == 6
    text = p.read_text()
    assert text.count("\nv ") == 8
    assert text.count("\nf ") == 6
    # two touching voxels share a wall: 10 exposed faces, 12 corners
    lab.data[1, 1, 2] = 1
    p2 = tmp_path / "two.obj"
    assert write_obj(p2, lab, 1) == 10
    assert p2.read_text().count("\nv ") == 12


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    assert "phantom" in capsys.readouterr().out
