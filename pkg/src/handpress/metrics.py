"""Evaluation metrics and the per-vertex contact/pressure training losses.

Lengths are taken in metres and reported in millimetres; pressures are in
gram-force.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit, log_expit

from . import handmodel as hm
from .errors import EmptyInput, ShapeMismatch
from .geometry import geodesic_distance, umeyama_align

CONTACT_THRESHOLD_G = 10.0


@dataclass(frozen=True)
class PoseMetrics:
    mpjpe: float
    pa_mpjpe: float
    pve: float
    pa_pve: float
    mjae: float


@dataclass(frozen=True)
class PressureMetrics:
    contact_iou: float
    vol_iou: float
    contact_acc: float
    mae_fg: float
    mae_all: float


def _pair(a, b, shape, what):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or (shape is not None and a.shape != shape):
        raise ShapeMismatch(f"{what}: shapes {a.shape} and {b.shape}, expected {shape}")
    return a, b


def _mean_error(p, g):
    return float(np.mean(np.linalg.norm(p - g, axis=-1))) * 1000.0


def _pa_error(p, g):
    s, T = umeyama_align(p, g, with_scale=True)
    return _mean_error(s * p @ T.rot.T + T.trans, g)


def pose_metrics(pred_joints, gt_joints, pred_verts, gt_verts, pred_theta, gt_theta) -> PoseMetrics:
    """Joint/vertex errors in mm, raw and after similarity alignment; MJAE in degrees."""
    pj, gj = _pair(pred_joints, gt_joints, (hm.N_JOINTS, 3), "joints")
    pv, gv = _pair(pred_verts, gt_verts, (hm.N_VERTS, 3), "vertices")
    pt, gt = _pair(pred_theta, gt_theta, (hm.N_DOF,), "theta")
    mpjpe = _mean_error(pj, gj)
    pve = _mean_error(pv, gv)
    # alignment is optimal in the squared sense; never report it above the raw error
    pa_mpjpe = min(_pa_error(pj, gj), mpjpe)
    pa_pve = min(_pa_error(pv, gv), pve)
    mjae = float(np.rad2deg(np.mean(np.abs(pt - gt))))
    return PoseMetrics(mpjpe, pa_mpjpe, pve, pa_pve, mjae)


def pressure_metrics(pred_pv, gt_pv, contact_threshold=CONTACT_THRESHOLD_G) -> PressureMetrics:
    p, g = _pair(pred_pv, gt_pv, (hm.N_VERTS,), "pressure")
    if contact_threshold <= 0:
        raise ValueError("contact_threshold must be positive")
    a = p > contact_threshold
    b = g > contact_threshold
    union = np.count_nonzero(a | b)
    contact_iou = np.count_nonzero(a & b) / union if union else 1.0
    hi = np.maximum(p, g).sum()
    vol_iou = float(np.minimum(p, g).sum() / hi) if hi > 0 else 1.0
    contact_acc = 100.0 * np.count_nonzero(a == b) / a.size
    fg = g > 0
    mae_fg = float(np.mean(np.abs(p[fg] - g[fg]))) if fg.any() else 0.0
    mae_all = float(np.mean(np.abs(p - g)))
    return PressureMetrics(float(contact_iou), vol_iou, float(contact_acc), mae_fg, mae_all)


def sample_contact_flags(pv_batch, contact_threshold=CONTACT_THRESHOLD_G):
    """A sample is in contact when any of its vertices exceeds the threshold."""
    return np.max(np.atleast_2d(np.asarray(pv_batch, dtype=float)), axis=1) > contact_threshold


def contact_classification_metrics(pred_flags, gt_flags):
    """``(acc, prec, rec, f1)`` in percent; precision/recall are 0 on an empty denominator."""
    p = np.asarray(pred_flags, dtype=bool).ravel()
    g = np.asarray(gt_flags, dtype=bool).ravel()
    if p.size == 0 or g.size == 0:
        raise EmptyInput("need at least one sample")
    if p.shape != g.shape:
        raise ShapeMismatch(f"{p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    acc = 100.0 * np.count_nonzero(p == g) / p.size
    prec = 100.0 * tp / (tp + fp) if tp + fp else 0.0
    rec = 100.0 * tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * prec * rec / (prec + rec) if prec + rec else 0.0
    return float(acc), float(prec), float(rec), float(f1)


def extrinsics_metrics(pred, gt, joints, model):
    """``(rot_deg, trans_mm, reproj_px)`` for a hand-local -> camera transform."""
    rot = float(np.rad2deg(geodesic_distance(pred.rot, gt.rot)))
    trans = float(np.linalg.norm(pred.trans - gt.trans)) * 1000.0
    u_pred = model.project(pred.apply(joints))
    u_gt = model.project(gt.apply(joints))
    reproj = float(np.mean(np.linalg.norm(u_pred - u_gt, axis=1)))
    return rot, trans, reproj


# ---------------------------------------------------------------- training losses
def contact_target(gt_pv, h_max=1000.0, tau=CONTACT_THRESHOLD_G):
    """Positive-contact mask: the normalised target scaled back to grams exceeds ``tau``."""
    p_star = np.asarray(gt_pv, dtype=float) / h_max
    return p_star * h_max > tau


def focal_contact_loss(logits, gt_pv, h_max=1000.0, tau=CONTACT_THRESHOLD_G, alpha=0.25, gamma=2.0, return_grad=False):
    """Mean focal BCE over vertices; ``alpha`` weights positives and ``1 - alpha`` negatives."""
    if not 0.0 <= alpha <= 1.0 or gamma < 0:
        raise ValueError("alpha must lie in [0, 1] and gamma must be non-negative")
    z = np.asarray(logits, dtype=float)
    c = contact_target(gt_pv, h_max, tau)
    if z.shape != c.shape:
        raise ShapeMismatch(f"logits {z.shape} vs targets {c.shape}")
    s = np.where(c, 1.0, -1.0)
    log_pt = log_expit(s * z)
    q = expit(-s * z)  # 1 - p_t without cancellation
    a = np.where(c, alpha, 1.0 - alpha)
    mod = q**gamma
    n = z.size
    value = float(np.sum(-a * mod * log_pt) / n)
    if not return_grad:
        return value
    # dq/dz = -s p_t q and d(log p_t)/dz = s q
    pt = np.exp(log_pt)
    grad = -a * s * mod * (q - gamma * pt * log_pt) / n
    return value, grad


def gated_pressure_loss(
    logits, raw_pressure, gt_pv, gate_gamma=1.0, lambda_bg=1.0, h_max=1000.0, tau=CONTACT_THRESHOLD_G, return_grad=False
):
    """Gated non-negative pressure regression against the normalised target ``gt / h_max``.

    ``p~ = sigmoid(m)^gate_gamma * softplus(p)``; the loss is the mean squared
    error over contact vertices plus ``lambda_bg`` times the mean ``|p~|``
    over the rest. Either part is 0 when its set is empty.
    """
    if lambda_bg < 0:
        raise ValueError("lambda_bg must be non-negative")
    m = np.asarray(logits, dtype=float)
    p = np.asarray(raw_pressure, dtype=float)
    target = np.asarray(gt_pv, dtype=float) / h_max
    if not m.shape == p.shape == target.shape:
        raise ShapeMismatch(f"shapes {m.shape}, {p.shape}, {target.shape}")
    fg = contact_target(gt_pv, h_max, tau)
    bg = ~fg
    g = expit(m)
    sp = np.logaddexp(0.0, p)
    gate = g**gate_gamma
    pt = gate * sp
    nf, nb = int(fg.sum()), int(bg.sum())
    l_fg = float(np.mean((pt[fg] - target[fg]) ** 2)) if nf else 0.0
    l_bg = float(np.mean(np.abs(pt[bg]))) if nb else 0.0
    value = l_fg + lambda_bg * l_bg
    if not return_grad:
        return value
    d_pt = np.zeros_like(pt)
    if nf:
        d_pt[fg] = 2.0 * (pt[fg] - target[fg]) / nf
    if nb:
        d_pt[bg] = lambda_bg * np.sign(pt[bg]) / nb
    g_m = d_pt * gate_gamma * gate * (1.0 - g) * sp
    g_p = d_pt * gate * expit(p)
    return value, g_m, g_p


# ---------------------------------------------------------------- reports
def metrics_to_json(**groups):
    """Serialise named metric groups (dataclasses, tuples or dicts) as one JSON object."""
    out = {}
    for name, m in groups.items():
        out[name] = asdict(m) if hasattr(m, "__dataclass_fields__") else m
    return json.dumps(out, indent=2, sort_keys=True)


def csv_rows(records, fields=None):
    """CSV text with one row per metric record (a dataclass or flat dict)."""
    rows = [asdict(r) if hasattr(r, "__dataclass_fields__") else dict(r) for r in records]
    if fields is None:
        fields = list(rows[0]) if rows else []
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
