import json
import subprocess
import sys

import numpy as np
import pytest

from segbias import LabelMap, load_volume, save_volume
from segbias.cli import main


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def small_phantom(out, seed=0, *extra):
    return main(["phantom", "--kind", "ellipsoid", "--n-per-group", "3", "--seed", str(seed),
                 "--out", str(out), *extra])


def test_phantom_then_simulate_then_audit(tmp_path, capsys):
    assert small_phantom(tmp_path / "c") == 0
    manifest = tmp_path / "c" / "cohort.json"
    assert manifest.exists()
    assert main(["simulate-error", "--manifest", str(manifest), "--kind", "systematic-erode",
                 "--p", "0.5", "--out", str(tmp_path / "c")]) == 0
    errors = (tmp_path / "c" / "errors.csv").read_text().splitlines()
    assert errors[0] == "subject_id,group,kind,p,dsc,volume_bias" and len(errors) == 7
    cfg = tmp_path / "c" / "audit.json"
    cfg.write_text(json.dumps({"manifest": "cohort.json", "predictions": "predictions/{subject_id}.nii.gz"}))
    capsys.readouterr()
    assert main(["audit", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    assert "AUC predicted=" in out
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["groups"]["1"]["L"]["median_bias"] < 0


def test_phantom_reproducible(tmp_path):
    assert small_phantom(tmp_path / "a", 5) == 0
    assert small_phantom(tmp_path / "b", 5) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert small_phantom(tmp_path / "c", 6) == 0
    assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "c")


def test_phantom_with_resolution_pair(tmp_path):
    assert small_phantom(tmp_path / "c", 0, "--pair", "1.0", "1.4") == 0
    manifest = json.loads((tmp_path / "c" / "cohort.json").read_text())
    sizes = {e["group"]: e["native_voxel_size"] for e in manifest["subjects"]}
    assert sizes == {"H": [1.0, 1.0, 1.0], "L": [1.4, 1.4, 1.4]}
    low = next(e for e in manifest["subjects"] if e["group"] == "L")
    assert load_volume(tmp_path / "c" / low["reference"], kind="label").geometry.voxel_size == (1.4, 1.4, 1.4)


def test_audit_rerun_byte_identical(tmp_path):
    small_phantom(tmp_path / "c")
    cfg = tmp_path / "c" / "audit.json"
    cfg.write_text(json.dumps({"manifest": "cohort.json", "predictions": "labels/{subject_id}.nii.gz"}))
    assert main(["audit", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["audit", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_fig1_reproducible(tmp_path, capsys):
    args = ["fig1", "--n", "6", "--seed", "2", "--models", "random", "systematic", "downsampled-3mm"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert "p_random=" in capsys.readouterr().out


def test_resample_labels_counting_fixture(tmp_path, capsys):
    labels = np.array([[1, 1, 0, 2], [1, 0, 2, 2], [0, 0, 3, 3], [0, 1, 3, 1]], np.uint8)
    save_volume(LabelMap.from_array(labels), tmp_path / "l.json")
    assert main(["resample", "--in", str(tmp_path / "l.json"), "--out", str(tmp_path / "o.json"),
                 "--labels", "--factor", "0.5"]) == 0
    out = load_volume(tmp_path / "o.json", kind="label")
    assert out.labels.tolist() == [[1, 2], [0, 3]]
    assert json.loads(capsys.readouterr().out) == {"dims": [2, 2], "voxel_size": [2.0, 2.0]}


def test_resample_target_mm(tmp_path):
    small_phantom(tmp_path / "c")
    img = tmp_path / "c" / "images" / "sub-000.nii.gz"
    assert main(["resample", "--in", str(img), "--out", str(tmp_path / "r.nii"), "--target-mm", "2"]) == 0
    assert load_volume(tmp_path / "r.nii").geometry.voxel_size == (2.0, 2.0, 2.0)


def test_metrics_command(tmp_path, capsys):
    labels = np.zeros((4, 4, 4), np.uint8)
    labels[1:3, 1:3, 1:3] = 1
    save_volume(LabelMap.from_array(labels), tmp_path / "r.nii")
    assert main(["metrics", "--pred", str(tmp_path / "r.nii"), "--ref", str(tmp_path / "r.nii")]) == 0
    row = json.loads(capsys.readouterr().out)["labels"][0]
    assert row["dsc"] == 1.0 and row["volume_bias"] == 0.0


def test_auc_prints_one_for_separated_groups(tmp_path, capsys):
    csv = tmp_path / "v.csv"
    csv.write_text("subject_id,group,volume\na,L,10\nb,L,11\nc,H,5\nd,H,6\n")
    assert main(["auc", "--csv", str(csv)]) == 0
    assert capsys.readouterr().out.strip() == "1.0"
    assert main(["auc", "--csv", str(csv), "--positive-group", "H"]) == 0
    assert capsys.readouterr().out.strip() == "0.0"


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["resample", "--in", "x.nii"],
    ["auc"],
    ["simulate-error", "--manifest", "m.json", "--kind", "gaussian", "--p", "0.1"],
])
def test_usage_errors_exit_1(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1
    assert "usage:" in capsys.readouterr().err


def test_validation_error_exit_1(tmp_path, capsys):
    csv = tmp_path / "v.csv"
    csv.write_text("subject_id,group,volume\na,L,x\nb,H,1\n")
    assert main(["auc", "--csv", str(csv)]) == 1
    assert "non-numeric" in capsys.readouterr().err
    cfg = tmp_path / "a.json"
    cfg.write_text('{"manifest": "m.json", "bogus": 1}')
    assert main(["audit", "--config", str(cfg)]) == 1


def test_io_errors_exit_2(tmp_path, capsys):
    assert main(["resample", "--in", str(tmp_path / "none.nii"), "--out", str(tmp_path / "o.nii"),
                 "--factor", "2"]) == 2
    assert main(["audit", "--config", str(tmp_path / "none.json")]) == 2
    assert "none" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "segbias", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "simulate-error" in proc.stdout
