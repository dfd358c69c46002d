import json
import subprocess
import sys

import numpy as np
import pytest

from drlesion.cli import main
from drlesion.dataset import LesionClass, read_manifest
from drlesion.fusion import read_composite
from drlesion.imaging.io import write_mask
from drlesion.metrics import MetricReport
from golden import FIXTURE
from synth import write_dataset

LESIONS = [c.value for c in LesionClass]
TRAIN_FLAGS = ["--epochs", "2", "--image-size", "32", "--backbone", "tiny", "--no-pretrained",
               "--batch-size", "2", "--tiny-width", "4", "--aspp-channels", "8", "--decoder-channels", "8",
               "--decoder-low-level-channels", "4"]

EXPECTED_FILES = (
    ["run_manifest.json", "report.md", "report.json", "preprocessed/crops.tsv"]
    + [f"preprocessed/images/IDRiD_0{i}.png" for i in range(1, 5)]
    + [f"preprocessed/masks/{c}/IDRiD_0{i}.png" for c in LESIONS for i in range(1, 5)]
    + [f"splits/{c}.tsv" for c in LESIONS]
    + [f"splits/{c}.augmented.tsv" for c in LESIONS]
    + [f"models/{c}/{f}" for c in LESIONS
       for f in ("checkpoint.pt", "epochs.jsonl", "loss_curve.png", "train_config.txt")]
    + [f"reports/{c}.json" for c in LESIONS]
    + [f"reports/{c}_roc.csv" for c in LESIONS]
    + [f"predictions/{c}/IDRiD_0{i}.png" for c in LESIONS for i in range(1, 5)]
    + [f"fused/IDRiD_0{i}.png" for i in range(1, 5)]
    + [f"fused/IDRiD_0{i}_overlay.png" for i in range(1, 5)]
)

PIPELINE = [
    ["preprocess", "--root", str(FIXTURE)],
    ["split"],
    ["augment"],
    ["train", *TRAIN_FLAGS],
    ["evaluate"],
    ["infer"],
    ["fuse"],
    ["report"],
]


def run_pipeline(out):
    return [main([*cmd, "--out", str(out)]) for cmd in PIPELINE]


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    codes = run_pipeline(out)
    return out, codes


def test_full_pipeline_exit_codes(smoke_run):
    _, codes = smoke_run
    assert codes == [0] * len(PIPELINE)


def test_full_pipeline_artifacts(smoke_run):
    out, _ = smoke_run
    missing = [f for f in EXPECTED_FILES if not (out / f).is_file()]
    assert missing == []
    for c in LESIONS:
        manifest = read_manifest(out / "splits" / f"{c}.augmented.tsv", base=out)
        assert manifest.counts() == (2 + 18, 1, 1)
        assert len(list((out / "augmented" / c / "images").glob("*.png"))) == 18


def test_report_is_well_formed(smoke_run):
    out, _ = smoke_run
    summary = json.loads((out / "report.json").read_text())
    assert sorted(summary["classes"]) == sorted(LESIONS)
    for c in LESIONS:
        rep = MetricReport.from_dict(summary["classes"][c])
        assert rep.counts.total == 32 * 32 and rep.n_images == 1
        for k in ("accuracy", "specificity", "sensitivity", "precision", "f1", "iou"):
            assert 0.0 <= getattr(rep, k) <= 1.0
        assert MetricReport.load(out / "reports" / f"{c}.json") == rep
    table = (out / "report.md").read_text()
    assert "| Metric | EX | HE | MA | SE |" in table and "| IoU |" in table


def test_manifest_records_configs_and_seeds(smoke_run):
    out, _ = smoke_run
    stages = json.loads((out / "run_manifest.json").read_text())["stages"]
    assert {"preprocess", "fuse", "report"} <= set(stages)
    assert stages["split:EX"]["config"]["seed"] == 0
    assert stages["train:MA"]["config"]["train"]["seed"] == 0
    assert stages["train:MA"]["config"]["model"]["backbone"] == "tiny"
    fused = read_composite(out / "fused" / "IDRiD_01.png")
    assert fused.shape == (32, 32)


def test_rerun_is_a_no_op(smoke_run, capsys):
    out, _ = smoke_run
    stamp = {p: p.stat().st_mtime_ns for p in out.rglob("*") if p.is_file() and p.name != "run_manifest.json"}
    capsys.readouterr()
    assert main(["train", *TRAIN_FLAGS, "--out", str(out)]) == 0
    assert main(["split", "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert printed.count("up to date") == 8
    assert stamp == {p: p.stat().st_mtime_ns for p in stamp}


def test_force_is_a_clean_overwrite(tmp_path):
    out = tmp_path / "run"
    assert main(["preprocess", "--root", str(FIXTURE), "--out", str(out)]) == 0
    stray = out / "preprocessed" / "images" / "stray.png"
    stray.write_bytes(b"")
    assert main(["preprocess", "--root", str(FIXTURE), "--out", str(out)]) == 0
    assert stray.exists()  # up to date: left alone
    assert main(["preprocess", "--root", str(FIXTURE), "--out", str(out), "--force"]) == 0
    assert not stray.exists()
    assert len(list((out / "preprocessed" / "images").iterdir())) == 4


def test_changed_config_redoes_stage_and_downstream(tmp_path, capsys):
    out = tmp_path / "run"
    main(["preprocess", "--root", str(FIXTURE), "--out", str(out)])
    main(["split", "--lesion", "EX", "--out", str(out)])
    first = (out / "splits" / "EX.tsv").read_text()
    capsys.readouterr()
    main(["split", "--lesion", "EX", "--seed", "3", "--out", str(out)])
    assert "split:EX: done" in capsys.readouterr().out
    assert (out / "splits" / "EX.tsv").read_text() != first


def test_reproducible_runs(smoke_run, tmp_path):
    first, _ = smoke_run
    second = tmp_path / "again"
    assert run_pipeline(second) == [0] * len(PIPELINE)
    assert (first / "run_manifest.json").read_bytes() == (second / "run_manifest.json").read_bytes()
    for c in LESIONS:
        for rel in (f"splits/{c}.tsv", f"splits/{c}.augmented.tsv", f"reports/{c}.json", f"reports/{c}_roc.csv"):
            assert (first / rel).read_bytes() == (second / rel).read_bytes(), rel
    assert (first / "report.json").read_bytes() == (second / "report.json").read_bytes()


def test_split_counts_on_81_pairs(tmp_path, capsys):
    write_dataset(tmp_path / "data", 81, 12, 12, lesions=(LesionClass.EX,))
    out = tmp_path / "run"
    assert main(["split", "--root", str(tmp_path / "data"), "--lesion", "EX", "--seed", "7", "--out", str(out)]) == 0
    assert "EX: train=57 validation=16 test=8 skipped=0" in capsys.readouterr().out
    assert read_manifest(out / "splits" / "EX.tsv", base=out).counts() == (57, 16, 8)


def test_dataset_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("DRLESION_DATASET_ROOT", str(FIXTURE))
    assert main(["preprocess", "--out", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "preprocessed" / "crops.tsv").exists()


def test_fuse_four_empty_masks(tmp_path):
    args = []
    for c in LESIONS:
        write_mask(tmp_path / f"{c}.png", np.zeros((10, 12), np.uint8))
        args += ["--mask", f"{c}={tmp_path / f'{c}.png'}"]
    target = tmp_path / "composite.png"
    assert main(["fuse", *args, "--output", str(target), "--out", str(tmp_path / "run")]) == 0
    comp = read_composite(target)
    assert comp.shape == (10, 12) and not comp.support.any()


@pytest.mark.parametrize("argv", [["bogus"], ["split", "--nope"], [], ["train", "--epochs", "many"]])
def test_usage_errors_exit_2(argv, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main([*argv, "--out", str(tmp_path)] if argv else argv)
    assert exc.value.code == 2


@pytest.mark.parametrize("argv", [
    ["preprocess", "--root", "/does/not/exist"],
    ["split"],
    ["evaluate", "--lesion", "EX"],
    ["split", "--lesion", "XY", "--root", str(FIXTURE)],
    ["fuse", "--mask", "EX"],
    ["report"],
])
def test_contract_errors_exit_1(argv, tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("DRLESION_DATASET_ROOT", raising=False)
    assert main([*argv, "--out", str(tmp_path / "run")]) == 1
    assert "error:" in capsys.readouterr().err


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "drlesion.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("drlesion ")
