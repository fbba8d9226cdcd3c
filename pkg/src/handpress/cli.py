"""Command-line batch pipelines: synth, fit, calibrate-extrinsics, eval, fitts.

Exit codes: 0 success, 1 usage, 2 IO or parse failure, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import handmodel as hm
from . import interact, metrics, synth
from .annofit import AnnoParams, FrameObservations, OptimConfig, Rig, delta_transform, optimize_annotation
from .annofit import solve_extrinsics
from .camera import Image, load_intrinsics, read_png, save_intrinsics, write_png
from .errors import DegenerateRegression, DivergedSolve, HandPressError, NonFiniteLoss
from .geometry import RigidTransform
from .pressrender import load_pmap, save_pmap

log = logging.getLogger("handpress")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

POSE_COLUMNS = ("frame_id", "mpjpe_mm", "pa_mpjpe_mm", "pve_mm", "pa_pve_mm", "mjae_deg")
PRESSURE_COLUMNS = ("frame_id", "contact_iou", "vol_iou", "contact_acc", "mae_fg_g", "mae_all_g")
CONTACT_COLUMNS = ("acc", "prec", "rec", "f1")
EXTRINSICS_COLUMNS = ("frame_id", "rot_deg", "trans_mm", "reproj_px")
FIT_SUMMARY_COLUMNS = ("frame_id", "final_loss", "iterations", "mpjpe_mm", "tip_force_g", "gt_force_g", "wall_ms")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


# ---------------------------------------------------------------- file helpers
def _atomic(path, write):
    """Run ``write(tmp_path)`` and rename the result over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=path.suffix)
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_text(path, text):
    def w(tmp):
        with open(tmp, "w") as fh:
            fh.write(text)

    _atomic(path, w)


def _write_json(path, obj):
    _write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise InputError(f"{path}: {e}") from e


def _csv_text(columns, rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in columns})
    return buf.getvalue()


def _estimate_json(frame_id, seed, theta, beta, transform, pv, extrinsics=None):
    """Per-frame hand estimate; shared by ground truth and fitted results."""
    out = {
        "frame_id": frame_id,
        "seed": seed,
        "theta": np.asarray(theta).tolist(),
        "beta": np.asarray(beta).tolist(),
        "transform": transform.to_json(),
        "pv": np.asarray(pv).tolist(),
    }
    if extrinsics is not None:
        out["extrinsics"] = extrinsics.to_json()
    return out


def _load_config(path, cls):
    if path is None:
        return cls()
    obj = _read_json(path)
    try:
        return cls.from_dict(obj)
    except (TypeError, ValueError) as e:
        raise InputError(f"{path}: {e}") from e


# ---------------------------------------------------------------- synth
def cmd_synth(n_frames, seed, out, config_path=None):
    if n_frames < 1:
        raise UsageError("--n must be at least 1")
    cfg = _load_config(config_path, synth.ScenarioConfig)
    out = Path(out)
    lines = []
    for i in range(n_frames):
        frame_seed = seed * 100003 + i
        f = synth.sample_scenario(frame_seed, cfg)
        fid = f"frame_{i:04d}"
        d = out / "frames" / fid
        _atomic(d / "pressure.pmap", lambda p, f=f: save_pmap(p, f.p_gt, f.rig.sensor.pitch))
        if f.hand_mask is not None:
            img = Image((np.asarray(f.hand_mask) * 255).round().astype(np.uint8))
            _atomic(d / "mask.png", lambda p, img=img: write_png(p, img))
        _atomic(d / "fisheye.json", lambda p, f=f: save_intrinsics(p, f.fisheye))
        obs = {
            "frame_id": fid,
            "seed": frame_seed,
            "markers_world": f.markers_world.tolist(),
            "keypoints_2d": f.keypoints_2d.tolist(),
            "visibility": [True] * hm.N_JOINTS,
            "base_transform": f.base_transform.to_json(),
            "rig": f.rig.to_json(),
            "beta": f.beta.tolist(),
            "init": f.init.to_json(),
            "pressure": "pressure.pmap",
            "mask": "mask.png" if f.hand_mask is not None else None,
            "intrinsics": "fisheye.json",
        }
        _write_json(d / "obs.json", obs)
        gt = _estimate_json(fid, frame_seed, f.theta, f.beta, f.hand_to_world, f.pv, f.extrinsics)
        gt["joints_local"] = f.gt_joints_local().tolist()
        _write_json(out / "gt" / f"{fid}.json", gt)
        lines.append(
            json.dumps(
                {
                    "frame_id": fid,
                    "seed": frame_seed,
                    "obs": f"frames/{fid}/obs.json",
                    "gt": f"gt/{fid}.json",
                },
                sort_keys=True,
            )
        )
    _write_text(out / "manifest.jsonl", "\n".join(lines) + "\n")
    print(f"wrote {n_frames} frames to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- fit
def read_manifest(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise InputError(f"{path}: {e}") from e
    entries = []
    for k, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        try:
            e = json.loads(line)
        except json.JSONDecodeError as err:
            raise InputError(f"{path}:{k + 1}: {err}") from err
        if "obs" not in e or "frame_id" not in e:
            raise InputError(f"{path}:{k + 1}: entry needs 'frame_id' and 'obs'")
        entries.append(e)
    return entries


def load_observation(obs_path):
    """``(FrameObservations, init AnnoParams, shape beta, seed)`` from an ``obs.json``."""
    obs_path = Path(obs_path)
    o = _read_json(obs_path)
    d = obs_path.parent
    try:
        p_gt = load_pmap(d / o["pressure"]).grid
        mask = read_png(d / o["mask"]).as_mask() if o.get("mask") else None
        obs = FrameObservations(
            markers_world=np.asarray(o["markers_world"], dtype=float),
            keypoints_2d=np.asarray(o["keypoints_2d"], dtype=float),
            visibility=np.asarray(o["visibility"], dtype=bool),
            p_gt=p_gt,
            base_transform=RigidTransform.from_json(o["base_transform"]),
            rig=Rig.from_json(o["rig"]),
            hand_mask=mask,
            frame_id=o["frame_id"],
        )
        init = AnnoParams.from_json(o["init"])
        beta = np.asarray(o["beta"], dtype=float)
    except (KeyError, OSError, ValueError) as e:
        raise InputError(f"{obs_path}: {e}") from e
    return obs, init, beta, o.get("seed")


def _fit_one(args):
    obs_path, cfg = args
    obs, init, beta, seed = load_observation(obs_path)
    try:
        params, report = optimize_annotation(init, hm.HandShape(beta), obs, cfg)
    except NonFiniteLoss as e:
        return {"error": str(e), "frame_id": obs.frame_id}
    transform = delta_transform(obs.base_transform, params.delta_rot, params.delta_trans)
    rep = report.to_json()
    rep.update(frame_id=obs.frame_id, seed=seed, params=params.to_json())
    est = _estimate_json(obs.frame_id, seed, params.theta, beta, transform, params.pv)
    return {"report": rep, "estimate": est}


def cmd_fit(manifest, out, config_path=None, threads=1):
    entries = read_manifest(manifest)
    if not entries:
        raise UsageError(f"{manifest}: manifest lists no frames")
    cfg = _load_config(config_path, OptimConfig)
    root = Path(manifest).parent
    jobs = [(root / e["obs"], cfg) for e in entries]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_fit_one, jobs))
    else:
        results = [_fit_one(j) for j in jobs]
    out = Path(out)
    rows = []
    failed = []
    for e, r in zip(entries, results):
        fid = e["frame_id"]
        if "error" in r:
            failed.append(fid)
            print(f"non-finite loss in frame {fid}: {r['error']}", file=sys.stderr)
            continue
        _write_json(out / "reports" / f"{fid}.json", r["report"])
        _write_json(out / "estimates" / f"{fid}.json", r["estimate"])
        row = {k: "" for k in FIT_SUMMARY_COLUMNS}
        row.update(
            frame_id=fid,
            final_loss=f"{r['report']['final_loss']:.9g}",
            iterations=r["report"]["iterations"],
            wall_ms=f"{r['report']['wall_ms']:.1f}",
        )
        pv = np.asarray(r["estimate"]["pv"])
        row["tip_force_g"] = f"{pv[hm.FingertipRegions.default().union()].sum():.6g}"
        if "gt" in e:
            gt = _read_json(root / e["gt"])
            jg = RigidTransform.from_json(gt["transform"]).apply(hm.forward_kinematics(gt["theta"], gt["beta"]))
            est = r["estimate"]
            jp = RigidTransform.from_json(est["transform"]).apply(hm.forward_kinematics(est["theta"], est["beta"]))
            row["mpjpe_mm"] = f"{np.mean(np.linalg.norm(jp - jg, axis=1)) * 1000:.6g}"
            row["gt_force_g"] = f"{np.sum(gt['pv']):.6g}"
        rows.append(row)
    _write_text(out / "summary.csv", _csv_text(FIT_SUMMARY_COLUMNS, rows))
    if failed:
        return EXIT_NUMERIC
    mp = [float(r["mpjpe_mm"]) for r in rows if r["mpjpe_mm"] != ""]
    msg = f"fitted {len(rows)} frames"
    if mp:
        msg += f", mean MPJPE {np.mean(mp):.3f} mm"
    print(msg)
    return EXIT_OK


# ---------------------------------------------------------------- extrinsics
def _array_from(obj, key, shape, path):
    a = obj.get(key) if isinstance(obj, dict) else obj
    try:
        a = np.asarray(a, dtype=float)
    except (TypeError, ValueError) as e:
        raise InputError(f"{path}: {e}") from e
    if a.shape != shape:
        raise InputError(f"{path}: expected {key} of shape {shape}, got {a.shape}")
    return a


def cmd_calibrate_extrinsics(keypoints, joints, intrinsics, out, init=None, seed=0):
    u = _array_from(_read_json(keypoints), "keypoints_2d", (hm.N_JOINTS, 2), keypoints)
    X = _array_from(_read_json(joints), "joints", (hm.N_JOINTS, 3), joints)
    try:
        model = load_intrinsics(intrinsics)
    except (OSError, ValueError, KeyError) as e:
        raise InputError(f"{intrinsics}: {e}") from e
    if init is None:
        T0 = synth.default_mean_extrinsics()
    else:
        try:
            T0 = RigidTransform.from_json(_read_json(init))
        except (KeyError, ValueError) as e:
            raise InputError(f"{init}: {e}") from e
    T, rms = solve_extrinsics(X, u, model, T0)
    obj = T.to_json()
    obj.update(rms_px=rms, seed=seed)
    _write_json(Path(out) / "extrinsics.json", obj)
    print(f"rms {rms:.6g} px")
    return EXIT_OK


# ---------------------------------------------------------------- eval
def _prediction_files(d):
    d = Path(d)
    if not d.is_dir():
        raise InputError(f"{d}: not a directory")
    return {p.name: p for p in sorted(d.glob("*.json"))}


def cmd_eval(pred_dir, gt_dir, out, seed=0, intrinsics=None, threshold=metrics.CONTACT_THRESHOLD_G):
    pred = _prediction_files(pred_dir)
    gt = _prediction_files(gt_dir)
    if set(pred) != set(gt) or not pred:
        missing = sorted(set(pred) ^ set(gt))
        raise InputError(f"prediction and ground-truth files do not match: {missing or 'none found'}")
    model = load_intrinsics(intrinsics) if intrinsics else synth.default_fisheye()
    pose_rows, press_rows, ext_rows = [], [], []
    pred_flags, gt_flags = [], []
    for name in sorted(pred):
        p, g = _read_json(pred[name]), _read_json(gt[name])
        fid = g.get("frame_id", Path(name).stem)
        try:
            Tp = RigidTransform.from_json(p["transform"])
            Tg = RigidTransform.from_json(g["transform"])
            mp = hm.skin_mesh(p["theta"], p["beta"])
            mg = hm.skin_mesh(g["theta"], g["beta"])
            pvp, pvg = np.asarray(p["pv"], dtype=float), np.asarray(g["pv"], dtype=float)
        except (KeyError, ValueError) as e:
            raise InputError(f"{name}: {e}") from e
        pm = metrics.pose_metrics(
            Tp.apply(mp.joints), Tg.apply(mg.joints), Tp.apply(mp.vertices), Tg.apply(mg.vertices), p["theta"], g["theta"]
        )
        pose_rows.append(dict(zip(POSE_COLUMNS, (fid, pm.mpjpe, pm.pa_mpjpe, pm.pve, pm.pa_pve, pm.mjae))))
        qm = metrics.pressure_metrics(pvp, pvg, threshold)
        press_rows.append(
            dict(zip(PRESSURE_COLUMNS, (fid, qm.contact_iou, qm.vol_iou, qm.contact_acc, qm.mae_fg, qm.mae_all)))
        )
        pred_flags.append(bool(metrics.sample_contact_flags(pvp, threshold)[0]))
        gt_flags.append(bool(metrics.sample_contact_flags(pvg, threshold)[0]))
        if "extrinsics" in p and "extrinsics" in g:
            em = metrics.extrinsics_metrics(
                RigidTransform.from_json(p["extrinsics"]), RigidTransform.from_json(g["extrinsics"]), mg.joints, model
            )
            ext_rows.append(dict(zip(EXTRINSICS_COLUMNS, (fid,) + em)))
    contact = dict(zip(CONTACT_COLUMNS, metrics.contact_classification_metrics(pred_flags, gt_flags)))
    out = Path(out)
    _write_text(out / "pose.csv", _csv_text(POSE_COLUMNS, pose_rows))
    _write_text(out / "pressure.csv", _csv_text(PRESSURE_COLUMNS, press_rows))
    _write_text(out / "contact.csv", _csv_text(CONTACT_COLUMNS, [contact]))
    if ext_rows:
        _write_text(out / "extrinsics.csv", _csv_text(EXTRINSICS_COLUMNS, ext_rows))

    def means(rows, cols):
        return {c: float(np.mean([r[c] for r in rows])) for c in cols[1:]} if rows else {}

    summary = {
        "seed": seed,
        "frames": len(pose_rows),
        "pose": means(pose_rows, POSE_COLUMNS),
        "pressure": means(press_rows, PRESSURE_COLUMNS),
        "contact": contact,
        "extrinsics": means(ext_rows, EXTRINSICS_COLUMNS),
    }
    _write_json(out / "summary.json", summary)
    print(f"evaluated {len(pose_rows)} frames, mean MPJPE {summary['pose']['mpjpe_mm']:.3f} mm")
    return EXIT_OK


# ---------------------------------------------------------------- fitts
def cmd_fitts(log_path, out=None, seed=0):
    try:
        with open(log_path, newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            rows = list(reader)
    except OSError as e:
        raise InputError(f"{log_path}: {e}") from e
    for col in ("D_mm", "W_mm", "MT_ms"):
        if col not in header:
            raise InputError(f"{log_path}: missing column {col}")
    trials = []
    for k, r in enumerate(rows):
        if r.get("outcome", "success") not in ("success", "succeeded", "") or not r["MT_ms"]:
            continue
        try:
            trials.append({"D": float(r["D_mm"]) / 1000, "W": float(r["W_mm"]) / 1000, "MT": float(r["MT_ms"])})
        except ValueError as e:
            raise InputError(f"{log_path}: row {k + 2}: {e}") from e
    try:
        res = interact.fitts_analysis(trials)
    except DegenerateRegression as e:
        raise UsageError(str(e)) from e
    print(
        f"slope {res['slope_ms_per_bit']:.4g} ms/bit, intercept {res['intercept_ms']:.4g} ms, "
        f"throughput {res['throughput_bits_per_s']:.1f} bit/s"
    )
    if out is not None:
        res = dict(res, seed=seed, trials=len(trials))
        _write_json(Path(out) / "fitts.json", res)
    return EXIT_OK


# ---------------------------------------------------------------- entry point
def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--config", default=None, help="JSON file of configuration overrides")
    common.add_argument("--out", default=".", help="output directory")

    ap = argparse.ArgumentParser(prog="handpress", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="generate synthetic frames and a manifest")
    s.add_argument("--n", type=int, required=True, dest="n_frames")
    f = sub.add_parser("fit", parents=[common], help="fit annotation parameters for every manifest frame")
    f.add_argument("manifest")
    c = sub.add_parser("calibrate-extrinsics", parents=[common], help="solve wrist-camera extrinsics")
    c.add_argument("--keypoints", required=True)
    c.add_argument("--joints", required=True)
    c.add_argument("--intrinsics", required=True)
    c.add_argument("--init", default=None)
    e = sub.add_parser("eval", parents=[common], help="metric tables for predictions against ground truth")
    e.add_argument("pred_dir")
    e.add_argument("gt_dir")
    e.add_argument("--intrinsics", default=None)
    t = sub.add_parser("fitts", parents=[common], help="Fitts regression over a trial log")
    t.add_argument("log")
    return ap


def _setup_logging():
    level = os.environ.get("HANDPRESS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _setup_logging()
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        if args.command == "synth":
            return cmd_synth(args.n_frames, args.seed, args.out, args.config)
        if args.command == "fit":
            return cmd_fit(args.manifest, args.out, args.config, args.threads)
        if args.command == "calibrate-extrinsics":
            return cmd_calibrate_extrinsics(args.keypoints, args.joints, args.intrinsics, args.out, args.init, args.seed)
        if args.command == "eval":
            return cmd_eval(args.pred_dir, args.gt_dir, args.out, args.seed, args.intrinsics)
        if args.command == "fitts":
            return cmd_fitts(args.log, args.out, args.seed)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except (DivergedSolve, NonFiniteLoss) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except HandPressError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
