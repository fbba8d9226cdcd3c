import csv
import json
import math

import numpy as np
import pytest

from handpress import cli
from handpress import handmodel as hm
from handpress import synth
from handpress.camera import save_intrinsics


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert run("synth", "--n", 3, "--seed", 2, "--out", d) == 0
    return d


# ---------------------------------------------------------------- synth
def test_synth_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("synth", "--n", 10, "--seed", 7, "--out", a) == 0
    assert run("synth", "--n", 10, "--seed", 7, "--out", b) == 0
    ta = tree_bytes(a)
    assert ta == tree_bytes(b)
    assert len((a / "manifest.jsonl").read_text().splitlines()) == 10
    first = json.loads((a / "manifest.jsonl").read_text().splitlines()[0])
    assert json.loads(ta[first["obs"]])["seed"] == first["seed"]


def test_synth_rejects_zero_frames(tmp_path, capsys):
    assert run("synth", "--n", 0, "--out", tmp_path) == 1
    assert "--n" in capsys.readouterr().err


def test_bad_flags_are_usage_errors(tmp_path):
    assert run("synth", "--out", tmp_path) == 1
    assert run("synth", "--n", 1, "--threads", 0, "--out", tmp_path) == 1


# ---------------------------------------------------------------- fit
def test_fit_writes_reports_and_summary(synth_dir, tmp_path):
    lines = (synth_dir / "manifest.jsonl").read_text().splitlines()[:2]
    (synth_dir / "two.jsonl").write_text("\n".join(lines) + "\n")
    out = tmp_path / "fit"
    assert run("fit", synth_dir / "two.jsonl", "--out", out) == 0
    for line in lines:
        fid = json.loads(line)["frame_id"]
        rep = json.loads((out / "reports" / f"{fid}.json").read_text())
        assert {"markers", "mask", "render", "anat"} <= set(rep["terms"])
        assert rep["seed"] == json.loads(line)["seed"]
    rows = list(csv.DictReader((out / "summary.csv").open()))
    assert tuple(rows[0]) == cli.FIT_SUMMARY_COLUMNS and len(rows) == 2
    assert all(float(r["mpjpe_mm"]) < 2.0 for r in rows)


def test_fit_empty_manifest(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    assert run("fit", tmp_path / "m.jsonl", "--out", tmp_path) == 1


def test_fit_non_finite_reports_frame(synth_dir, tmp_path, capsys):
    entry = json.loads((synth_dir / "manifest.jsonl").read_text().splitlines()[0])
    obs_path = synth_dir / entry["obs"]
    obs = json.loads(obs_path.read_text())
    obs["init"]["theta"] = [math.nan] * hm.N_DOF
    bad = obs_path.parent / "obs_nan.json"
    bad.write_text(json.dumps(obs))
    entry["obs"] = str(bad.relative_to(synth_dir))
    (synth_dir / "nan.jsonl").write_text(json.dumps(entry) + "\n")
    assert run("fit", synth_dir / "nan.jsonl", "--out", tmp_path) == 3
    assert entry["frame_id"] in capsys.readouterr().err


# ---------------------------------------------------------------- calibrate-extrinsics
def _write_extrinsics_fixture(d, noise_px=0.0):
    f = synth.sample_scenario(3, synth.ScenarioConfig(kp_noise_px=noise_px, marker_noise_mm=0))
    (d / "kp.json").write_text(json.dumps({"keypoints_2d": f.keypoints_2d.tolist()}))
    (d / "joints.json").write_text(json.dumps({"joints": f.gt_joints_local().tolist()}))
    save_intrinsics(d / "fisheye.json", f.fisheye)
    return f


def test_calibrate_noiseless(tmp_path):
    f = _write_extrinsics_fixture(tmp_path)
    argv = ["calibrate-extrinsics", "--keypoints", tmp_path / "kp.json", "--joints", tmp_path / "joints.json"]
    assert run(*argv, "--intrinsics", tmp_path / "fisheye.json", "--out", tmp_path, "--seed", 5) == 0
    obj = json.loads((tmp_path / "extrinsics.json").read_text())
    assert obj["rms_px"] < 1e-8 and obj["seed"] == 5
    assert np.allclose(obj["trans"], f.extrinsics.trans, atol=1e-9)


def test_calibrate_malformed_json(tmp_path):
    _write_extrinsics_fixture(tmp_path)
    (tmp_path / "kp.json").write_text("{not json")
    argv = ["calibrate-extrinsics", "--keypoints", tmp_path / "kp.json", "--joints", tmp_path / "joints.json"]
    assert run(*argv, "--intrinsics", tmp_path / "fisheye.json", "--out", tmp_path) == 2


# ---------------------------------------------------------------- eval
def test_eval_identical_predictions(synth_dir, tmp_path):
    gt = synth_dir / "gt"
    assert run("eval", gt, gt, "--out", tmp_path) == 0
    rows = list(csv.DictReader((tmp_path / "pose.csv").open()))
    assert tuple(rows[0]) == cli.POSE_COLUMNS and len(rows) == 3
    assert all(float(r[c]) == 0.0 for r in rows for c in cli.POSE_COLUMNS[1:])
    press = list(csv.DictReader((tmp_path / "pressure.csv").open()))
    assert tuple(press[0]) == cli.PRESSURE_COLUMNS
    assert all(float(r["vol_iou"]) == 1.0 and float(r["mae_all_g"]) == 0.0 for r in press)
    assert tuple(next(csv.DictReader((tmp_path / "contact.csv").open()))) == cli.CONTACT_COLUMNS
    ext = list(csv.DictReader((tmp_path / "extrinsics.csv").open()))
    assert tuple(ext[0]) == cli.EXTRINSICS_COLUMNS
    assert json.loads((tmp_path / "summary.json").read_text())["frames"] == 3


def test_eval_translated_prediction(synth_dir, tmp_path):
    pred = tmp_path / "pred"
    pred.mkdir()
    for p in (synth_dir / "gt").glob("*.json"):
        obj = json.loads(p.read_text())
        obj["transform"]["trans"] = (np.asarray(obj["transform"]["trans"]) + [0.0, 0.002, 0.0]).tolist()
        (pred / p.name).write_text(json.dumps(obj))
    assert run("eval", pred, synth_dir / "gt", "--out", tmp_path) == 0
    for r in csv.DictReader((tmp_path / "pose.csv").open()):
        assert abs(float(r["mpjpe_mm"]) - 2.0) < 1e-9 and float(r["pa_mpjpe_mm"]) < 1e-9


def test_eval_unmatched_files(synth_dir, tmp_path):
    pred = tmp_path / "pred"
    pred.mkdir()
    src = sorted((synth_dir / "gt").glob("*.json"))[0]
    (pred / src.name).write_bytes(src.read_bytes())
    assert run("eval", pred, synth_dir / "gt", "--out", tmp_path) == 2


# ---------------------------------------------------------------- fitts
def _fitts_log(path, slope, intercept=150.0, columns=("D_mm", "W_mm", "MT_ms", "outcome")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for D in (20, 50, 100, 200):
            for W in (5, 10, 20):
                row = {"D_mm": D, "W_mm": W, "MT_ms": intercept + slope * math.log2(2 * D / W), "outcome": "succeeded"}
                w.writerow([row[c] for c in columns])


def test_fitts_fixture(tmp_path, capsys):
    _fitts_log(tmp_path / "log.csv", 387.3)
    assert run("fitts", tmp_path / "log.csv", "--out", tmp_path, "--seed", 1) == 0
    assert "throughput 2.6 bit/s" in capsys.readouterr().out
    res = json.loads((tmp_path / "fitts.json").read_text())
    assert abs(res["slope_ms_per_bit"] - 387.3) < 1e-9 and abs(res["intercept_ms"] - 150) < 1e-9
    assert res["seed"] == 1 and res["trials"] == 12


def test_fitts_missing_column(tmp_path, capsys):
    _fitts_log(tmp_path / "log.csv", 300.0, columns=("D_mm", "MT_ms"))
    assert run("fitts", tmp_path / "log.csv") == 2
    assert "W_mm" in capsys.readouterr().err


def test_fitts_degenerate(tmp_path):
    (tmp_path / "log.csv").write_text("D_mm,W_mm,MT_ms\n20,10,300\n40,20,350\n")
    assert run("fitts", tmp_path / "log.csv") == 1
