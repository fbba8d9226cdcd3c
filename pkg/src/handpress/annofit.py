"""Annotation fitting: per-frame pose/pressure optimisation, shape calibration, camera extrinsics.

Per-frame parameters are ``theta`` (20 DOFs), a rotation delta ``omega``
(axis-angle, right-multiplied onto the marker-derived rotation), a
translation delta and the 778 per-vertex pressures. World vertices are

    V_w = (R0 exp(omega)) V_l + (T0 + dT)

where ``[R0 | T0]`` maps hand-local to world coordinates and comes from
the markers. Every loss term has a hand-written VJP; the whole objective is
checked against finite differences in the tests.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.optimize import minimize
from scipy.special import expit

from . import handmodel as hm
from .camera import FisheyeModel, PinholeModel
from .errors import (
    BehindCamera,
    DivergedSolve,
    InsufficientFrames,
    NonFiniteLoss,
    OutOfFieldOfView,
)
from .geometry import RigidTransform, exp_so3, orthonormalize, right_jacobian_so3, rot6d_to_matrix, skew
from .pressrender import GridSplat, OrthoCamera, Splat, render_losses, render_losses_grad

log = logging.getLogger(__name__)

N_PARAMS = hm.N_DOF + 3 + 3 + hm.N_VERTS


# ---------------------------------------------------------------- data
@dataclass(frozen=True)
class AnnoParams:
    theta: np.ndarray
    delta_rot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    delta_trans: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pv: np.ndarray = field(default_factory=lambda: np.zeros(hm.N_VERTS))

    def __post_init__(self):
        object.__setattr__(self, "theta", np.array(hm.as_theta(self.theta), dtype=float))
        object.__setattr__(self, "delta_rot", np.array(self.delta_rot, dtype=float).reshape(3))
        object.__setattr__(self, "delta_trans", np.array(self.delta_trans, dtype=float).reshape(3))
        object.__setattr__(self, "pv", np.array(self.pv, dtype=float).reshape(hm.N_VERTS))

    def to_vector(self):
        return np.concatenate([self.theta, self.delta_rot, self.delta_trans, self.pv])

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(x[:20], x[20:23], x[23:26], x[26:])

    def to_json(self):
        return {
            "theta": self.theta.tolist(),
            "delta_rot": self.delta_rot.tolist(),
            "delta_trans": self.delta_trans.tolist(),
            "pv": self.pv.tolist(),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(obj["theta"], obj["delta_rot"], obj["delta_trans"], obj["pv"])


@dataclass(frozen=True)
class SilhouetteParams:
    """Splat-occupancy silhouette: blur the projected vertex density, then ``1 - exp(-gain * D)``."""

    sigma_px: float = 1.2
    gain: float = 100.0


@dataclass(frozen=True)
class Rig:
    """Capture geometry shared by a recording session."""

    sensor: OrthoCamera
    kinect: RigidTransform  # world -> third-person camera
    kinect_intrinsics: PinholeModel
    mask_size: tuple = (160, 120)  # (W, H)
    silhouette: SilhouetteParams = SilhouetteParams()

    def to_json(self):
        s = self.sensor
        k = self.kinect_intrinsics
        return {
            "sensor": {
                "origin": s.origin.tolist(),
                "u_axis": s.u_axis.tolist(),
                "v_axis": s.v_axis.tolist(),
                "grid": list(s.grid),
                "pitch": s.pitch,
            },
            "kinect": self.kinect.to_json(),
            "kinect_intrinsics": [k.fx, k.fy, k.cx, k.cy],
            "mask_size": list(self.mask_size),
            "silhouette": asdict(self.silhouette),
        }

    @classmethod
    def from_json(cls, obj):
        s = obj["sensor"]
        return cls(
            OrthoCamera(s["origin"], s["u_axis"], s["v_axis"], tuple(s["grid"]), s["pitch"]),
            RigidTransform.from_json(obj["kinect"]),
            PinholeModel(*obj["kinect_intrinsics"]),
            tuple(obj["mask_size"]),
            SilhouetteParams(**obj.get("silhouette", {})),
        )


@dataclass(frozen=True)
class FrameObservations:
    markers_world: np.ndarray  # (21, 3)
    keypoints_2d: np.ndarray  # (21, 2) fisheye pixels
    visibility: np.ndarray  # (21,) bool
    p_gt: np.ndarray  # (H, W) grams
    base_transform: RigidTransform  # hand-local -> world, from the markers
    rig: Rig
    hand_mask: np.ndarray | None = None  # (H, W) in [0, 1], third-person view
    frame_id: str = ""

    def __post_init__(self):
        m = np.array(self.markers_world, dtype=float)
        if m.shape != (hm.N_JOINTS, 3):
            raise ValueError(f"expected {hm.N_JOINTS} markers, got {m.shape}")
        p = np.array(self.p_gt, dtype=float)
        if p.shape != self.rig.sensor.grid:
            raise ValueError(f"pressure map {p.shape} does not match sensor grid {self.rig.sensor.grid}")
        object.__setattr__(self, "markers_world", m)
        object.__setattr__(self, "p_gt", p)
        object.__setattr__(self, "keypoints_2d", np.array(self.keypoints_2d, dtype=float).reshape(hm.N_JOINTS, 2))
        object.__setattr__(self, "visibility", np.array(self.visibility, dtype=bool).reshape(hm.N_JOINTS))
        if self.hand_mask is not None:
            object.__setattr__(self, "hand_mask", np.array(self.hand_mask, dtype=float))


@dataclass(frozen=True)
class OptimConfig:
    w_press: float = 1.0
    w_hand: float = 0.1
    w_3d: float = 1e4
    w_2d: float = 1e-2
    w_mask: float = 1.0
    w_anat: float = 10.0
    w_reg: float = 1e-3
    # weights of the wrist-camera network losses (keypoints, rotation, translation)
    lambda_kp: float = 1.0
    lambda_R: float = 1.0
    lambda_t: float = 1.0
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0
    # renderer
    delta: float = 0.1
    epsilon: float = 0.002
    tau: float = 0.001
    gamma: float = 5.0
    kappa: float = 1e-3
    h_max: float = 1000.0
    # pressure carried by vertices away from the plane (the splat has no occlusion)
    w_support: float = 0.1
    pv_param: str = "bounded"  # or "softplus"
    pv_scale: float = 100.0  # grams per optimiser unit
    # solver
    max_iter: int = 400
    gtol: float = 1e-9
    ftol: float = 1e-12
    restarts: int = 3
    schedule: str = "staged"  # "staged", "joint" or "alternate"
    alternate_rounds: int = 2
    support_margin: float = 0.01  # height above which a vertex cannot carry load
    support_boost: float = 100.0  # support weight multiplier in the pressure-only stage
    # optimiser units: rotation delta in 0.1 rad, translation delta in 10 mm
    rot_scale: float = 10.0
    trans_scale: float = 100.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k.startswith(("w_", "lambda_")) and v < 0:
                raise ValueError(f"{k} must be non-negative")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FitReport:
    final_loss: float
    iterations: int
    terms: dict
    details: dict
    losses: list
    wall_ms: float = 0.0
    converged: bool = True
    message: str = ""

    def to_json(self):
        return {
            "final_loss": self.final_loss,
            "terms": self.terms,
            "details": self.details,
            "iterations": self.iterations,
            "wall_ms": self.wall_ms,
            "converged": self.converged,
            "message": self.message,
        }


# ---------------------------------------------------------------- helpers
def localize(points_world, transform: RigidTransform):
    return transform.inverse().apply(points_world)


def delta_transform(base: RigidTransform, delta_rot, delta_trans):
    """``[R0 exp(omega) | T0 + dT]``."""
    return RigidTransform(base.rot @ exp_so3(delta_rot), base.trans + np.asarray(delta_trans, dtype=float))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return np.where(y > 30, y, np.log(np.expm1(np.minimum(y, 30))))


def bce_prob(pred, target, eps=1e-7):
    """Mean binary cross entropy of probabilities, with ``eps`` guarding the log."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    return float(-np.mean(target * np.log(pred + eps) + (1 - target) * np.log(1 - pred + eps)))


def dice_coefficient(a, b):
    """``2 |A n B| / (|A| + |B|)`` for soft or hard masks; 1 when both are empty."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    den = a.sum() + b.sum()
    if den <= 0:
        return 1.0
    return float(2.0 * np.sum(a * b) / den)


def render_silhouette(points_cam, intrinsics: PinholeModel, size, params: SilhouetteParams = SilhouetteParams()):
    """Soft occupancy image of camera-frame points; returns ``(occ, cache)``."""
    W, H = size
    uv, Jp = intrinsics.project(points_cam, return_jacobian=True)
    splat = GridSplat(uv[:, 0], uv[:, 1], (H, W))
    density = gaussian_filter(splat.splat(np.ones(splat.n)), params.sigma_px, mode="constant", truncate=3.0)
    e = np.exp(-params.gain * density)
    occ = 1.0 - e
    return occ, (splat, Jp, density, e, params)


def silhouette_vjp(cache, g_occ):
    """Gradient w.r.t. camera-frame points."""
    splat, Jp, density, e, params = cache
    g_density = g_occ * params.gain * e
    g_s = gaussian_filter(g_density, params.sigma_px, mode="constant", truncate=3.0)
    _, g_u, g_v = splat.splat_vjp(np.ones(splat.n), g_s)
    return np.einsum("ni,nij->nj", np.stack([g_u, g_v], 1), Jp)


def mask_loss(occ, target, lambda_bce=1.0, lambda_dice=1.0, eps=1e-7):
    """BCE + (1 - soft Dice) between a soft silhouette and a target mask; returns ``(value, grad, parts)``."""
    occ = np.asarray(occ, dtype=float)
    t = np.asarray(target, dtype=float)
    n = occ.size
    bce = bce_prob(occ, t, eps)
    g_bce = -(t / (occ + eps) - (1 - t) / (1 - occ + eps)) / n
    inter = np.sum(occ * t)
    den = occ.sum() + t.sum()
    if den > 0:
        dice = 2.0 * inter / den
        g_dice = 2.0 * (t * den - inter) / den**2
    else:
        dice, g_dice = 1.0, np.zeros_like(occ)
    value = lambda_bce * bce + lambda_dice * (1.0 - dice)
    grad = lambda_bce * g_bce - lambda_dice * g_dice
    return value, grad, {"mask_bce": bce, "mask_dice": float(dice)}


# ---------------------------------------------------------------- losses
def marker_losses(theta, shape, transform: RigidTransform, obs: FrameObservations, pinhole=None, kinect=None):
    """``(L3d, L2d)``: mean squared 3-D distance (third-person camera frame) and mean squared pixel distance."""
    pinhole = pinhole or obs.rig.kinect_intrinsics
    kinect = kinect or obs.rig.kinect
    joints = transform.apply(hm.forward_kinematics(theta, shape))
    pred_c = kinect.apply(joints)
    gt_c = kinect.apply(obs.markers_world)
    l3d = float(np.mean(np.sum((pred_c - gt_c) ** 2, axis=1)))
    l2d = float(np.mean(np.sum((pinhole.project(pred_c) - pinhole.project(gt_c)) ** 2, axis=1)))
    return l3d, l2d


def _frame_terms(art, theta, omega, dT, pv, obs: FrameObservations, cfg: OptimConfig, with_render=True, with_grad=True):
    """Objective pieces for one frame.

    Returns ``(value, terms, details, grads)``; ``grads`` holds gradients
    w.r.t. local joints/vertices, ``omega``, ``dT``, ``pv`` and ``theta``
    (anatomy only; the position part is added by the caller).
    """
    rig = obs.rig
    base = obs.base_transform
    Rd = exp_so3(omega)
    R = base.rot @ Rd
    T = base.trans + dT
    Jl, Vl = art.joints, art.vertices
    Jw = Jl @ R.T + T
    Vw = Vl @ R.T + T
    g_Jw = np.zeros_like(Jw)
    g_Vw = np.zeros_like(Vw)
    terms = {"markers": 0.0, "mask": 0.0, "render": 0.0, "anat": 0.0}
    details = {}

    # markers, in the third-person camera frame
    K = rig.kinect
    Jc = K.apply(Jw)
    Mc = K.apply(obs.markers_world)
    diff = Jc - Mc
    l3d = float(np.mean(np.sum(diff**2, axis=1)))
    uv, Jp = rig.kinect_intrinsics.project(Jc, return_jacobian=True)
    uv_gt = rig.kinect_intrinsics.project(Mc)
    duv = uv - uv_gt
    l2d = float(np.mean(np.sum(duv**2, axis=1)))
    terms["markers"] = cfg.w_3d * l3d + cfg.w_2d * l2d
    details.update(l3d=l3d, l2d=l2d)
    if with_grad:
        n = Jc.shape[0]
        g_c = cfg.w_3d * 2.0 * diff / n + cfg.w_2d * np.einsum("ni,nij->nj", 2.0 * duv / n, Jp)
        g_Jw += g_c @ K.rot

    # silhouette in the third-person view
    if obs.hand_mask is not None and cfg.w_mask > 0:
        Vc = K.apply(Vw)
        occ, cache = render_silhouette(Vc, rig.kinect_intrinsics, rig.mask_size, rig.silhouette)
        lm, g_occ, parts = mask_loss(occ, obs.hand_mask, cfg.lambda_bce, cfg.lambda_dice)
        terms["mask"] = cfg.w_mask * lm
        details.update(parts)
        if with_grad:
            g_Vw += (cfg.w_mask * silhouette_vjp(cache, g_occ)) @ K.rot

    g_pv = np.zeros(hm.N_VERTS)
    if with_render:
        cam = replace(rig.sensor, offset=cfg.delta)
        splat = Splat(cam, Vw)
        P = splat.pressure(pv)
        D, _ = splat.depth(cfg.kappa)
        args = (cfg.gamma, cfg.delta, cfg.epsilon, cfg.tau, (cfg.w_press, cfg.w_hand))
        rl = render_losses(P, D, obs.p_gt, *args)
        # pressure on vertices well clear of the sensor is penalised
        hover = expit((splat.height - cfg.support_margin) / cfg.tau)
        support = float(np.mean(pv * hover))
        terms["render"] = rl.total + cfg.w_support * support
        details.update(press=rl.press, hand=rl.hand, support=support)
        if with_grad:
            g_P, g_D = render_losses_grad(P, D, obs.p_gt, *args)
            g_pv, g_V1 = splat.pressure_vjp(pv, g_P)
            g_Vw += g_V1
            if cfg.w_hand > 0:
                g_Vw += splat.depth_vjp(g_D)
            if cfg.w_support > 0:
                n = pv.size
                g_pv = g_pv + cfg.w_support * hover / n
                g_h = cfg.w_support * pv * hover * (1.0 - hover) / cfg.tau / n
                g_Vw += g_h[:, None] * cam.normal

    anat, g_anat = hm.anatomical_penalty(theta, cfg.w_anat, return_grad=True)
    terms["anat"] = anat
    value = float(sum(terms.values()))
    if not with_grad:
        return value, terms, details, None

    g_Vl = g_Vw @ R
    g_Jl = g_Jw @ R
    g_T = g_Vw.sum(0) + g_Jw.sum(0)
    # d(R0 exp(w) x)/dw = -R0 exp(w) [x]x Jr(w)
    s = np.sum(np.cross(Vl, g_Vl), axis=0) + np.sum(np.cross(Jl, g_Jl), axis=0)
    g_omega = right_jacobian_so3(omega).T @ s
    grads = {"joints": g_Jl, "verts": g_Vl, "omega": g_omega, "trans": g_T, "pv": g_pv, "theta_anat": g_anat}
    return value, terms, details, grads


def total_objective(params: AnnoParams, shape, obs: FrameObservations, cfg: OptimConfig = OptimConfig(), with_grad=True):
    """Objective and its gradient over ``[theta(20), delta_rot(3), delta_trans(3), pv(778)]``.

    Returns ``(value, gradient, terms)`` where ``terms`` has keys
    ``markers, mask, render, anat``.
    """
    art = hm.model_for(shape).articulate(params.theta)
    with_render = cfg.w_press > 0 or cfg.w_hand > 0 or cfg.w_support > 0
    value, terms, details, g = _frame_terms(
        art, params.theta, params.delta_rot, params.delta_trans, params.pv, obs, cfg, with_render, with_grad
    )
    terms = dict(terms, **{"details": details})
    if not with_grad:
        return value, None, terms
    g_theta = art.pose_vjp(g["joints"], g["verts"]) + g["theta_anat"]
    grad = np.concatenate([g_theta, g["omega"], g["trans"], g["pv"]])
    return value, grad, terms


# ---------------------------------------------------------------- optimisation
POSE = slice(0, 26)
PV = slice(26, None)


def _pv_from_raw(raw, cfg):
    if cfg.pv_param == "bounded":
        return cfg.pv_scale * np.maximum(raw, 0.0)
    return cfg.pv_scale * _softplus(raw)


def _dpv_draw(raw, cfg):
    if cfg.pv_param == "bounded":
        return np.full_like(raw, cfg.pv_scale)
    return cfg.pv_scale * expit(raw)


def _to_x(p: AnnoParams, cfg):
    if cfg.pv_param == "bounded":
        raw = np.maximum(p.pv, 0.0) / cfg.pv_scale
    else:
        raw = _softplus_inv(np.maximum(p.pv, 1e-9) / cfg.pv_scale)
    return np.concatenate([p.theta, p.delta_rot * cfg.rot_scale, p.delta_trans * cfg.trans_scale, raw])


def _from_x(x, cfg):
    return AnnoParams(x[:20], x[20:23] / cfg.rot_scale, x[23:26] / cfg.trans_scale, _pv_from_raw(x[26:], cfg))


class _Objective:
    """Objective over the scaled optimiser vector, restricted to the ``free`` entries.

    The optimiser vector is ``[theta, omega * rot_scale, dT * trans_scale,
    raw pv]``. ``loss_cfg`` may differ from ``cfg`` (warm-start stages);
    the parameterisation always follows ``cfg``.
    """

    def __init__(self, shape, obs, cfg, free=None, fixed=None, loss_cfg=None):
        self.shape, self.obs, self.cfg = shape, obs, cfg
        self.loss_cfg = loss_cfg or cfg
        self.free = free
        self.fixed = fixed
        self.cache = {}

    def full(self, z):
        if self.free is None:
            return np.asarray(z, dtype=float).copy()
        x = self.fixed.copy()
        x[self.free] = z
        return x

    def restrict(self, x):
        return x.copy() if self.free is None else x[self.free].copy()

    def __call__(self, z):
        x = self.full(z)
        key = x.tobytes()
        if key in self.cache:
            return self.cache[key]
        cfg = self.cfg
        p = _from_x(x, cfg)
        value, grad, terms = total_objective(p, self.shape, self.obs, self.loss_cfg)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            report = {
                "frame_id": self.obs.frame_id,
                "terms": {k: v for k, v in terms.items() if k != "details"},
                "theta_norm": float(np.linalg.norm(p.theta)),
                "delta_trans": p.delta_trans.tolist(),
            }
            raise NonFiniteLoss(f"non-finite objective in frame {self.obs.frame_id!r}", report)
        gx = grad.copy()
        gx[20:23] /= cfg.rot_scale
        gx[23:26] /= cfg.trans_scale
        gx[26:] *= _dpv_draw(x[26:], cfg)
        out = (value, self.restrict(gx) if self.free is not None else gx)
        self.cache = {key: out}
        return out


def _lbfgs(obj, x, cfg, record=None):
    """L-BFGS-B on the free entries of ``x``, restarted after line-search stalls.

    Bilinear splatting makes the objective piecewise smooth; a fresh
    curvature model usually gets past the kink that stopped the previous run.
    """
    z = obj.restrict(x)
    bounds = None
    if cfg.pv_param == "bounded":
        lower = np.full(x.size, -np.inf)
        lower[PV] = 0.0
        lower = obj.restrict(lower)
        bounds = [(lo if np.isfinite(lo) else None, None) for lo in lower]
    f = obj(z)[0]
    iterations = 0
    res = None
    for _ in range(cfg.restarts + 1):
        res = minimize(
            obj,
            z,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            callback=record,
            options={"maxiter": max(cfg.max_iter - iterations, 1), "gtol": cfg.gtol, "ftol": cfg.ftol, "maxcor": 20},
        )
        iterations += int(res.nit)
        gain = f - float(res.fun)
        if float(res.fun) <= f:
            z, f = res.x, float(res.fun)
        if res.success or res.nit == 0 or gain <= 1e-9 * max(1.0, abs(f)) or iterations >= cfg.max_iter:
            break
    return obj.full(z), iterations, res


def initial_pressure(obs: FrameObservations):
    """Spread the measured total force uniformly over the vertices."""
    total = float(np.sum(obs.p_gt)) if obs.p_gt is not None else 0.0
    return np.full(hm.N_VERTS, max(total, 0.0) / hm.N_VERTS)


def optimize_annotation(init: AnnoParams, shape, obs: FrameObservations, cfg: OptimConfig = OptimConfig()):
    """Minimise :func:`total_objective`; returns ``(AnnoParams, FitReport)``.

    Default schedule ("staged"): a pose-only warm start on the marker, mask
    and anatomy terms, a pressure-only solve with the pose held (convex in
    ``pv``), then a joint refinement of everything. The warm start is kept
    only if it lowers the full objective, and each L-BFGS-B iterate passes a
    sufficient-decrease test, so the recorded loss sequence never rises.
    """
    if cfg.pv_param not in ("softplus", "bounded"):
        raise ValueError(f"unknown pv_param {cfg.pv_param!r}")
    if cfg.schedule not in ("staged", "joint", "alternate"):
        raise ValueError(f"unknown schedule {cfg.schedule!r}")
    t0 = time.perf_counter()
    x = _to_x(init, cfg)
    if not np.all(np.isfinite(x)):
        raise NonFiniteLoss("initial parameters are not finite", {"frame_id": obs.frame_id})

    def full_loss(x):
        return _Objective(shape, obs, cfg)(x)[0]

    losses = [full_loss(x)]
    iterations = 0
    res = None
    pose = np.zeros(x.size, dtype=bool)
    pose[POSE] = True

    if cfg.schedule == "staged":
        warm_cfg = replace(cfg, w_press=0.0, w_hand=0.0, w_support=0.0)
        obj = _Objective(shape, obs, cfg, free=pose, fixed=x, loss_cfg=warm_cfg)
        x1, n, res = _lbfgs(obj, x, cfg)
        iterations += n
        f1 = full_loss(x1)
        if f1 <= losses[-1]:
            x = x1
            losses.append(f1)
        blocks = [(~pose, replace(cfg, w_support=cfg.w_support * cfg.support_boost)), (None, None)] * cfg.alternate_rounds
    elif cfg.schedule == "alternate":
        blocks = [(pose, None), (~pose, None)] * cfg.alternate_rounds
    else:
        blocks = [(None, None)]

    for free, stage_cfg in blocks:
        obj = _Objective(shape, obs, cfg, free=free, fixed=x, loss_cfg=stage_cfg)
        if stage_cfg is None:

            def record(zk, obj=obj):
                losses.append(obj(zk)[0])

            x, n, res = _lbfgs(obj, x, cfg, record)
        else:
            x1, n, res = _lbfgs(obj, x, cfg)
            f1 = full_loss(x1)
            if f1 <= losses[-1]:
                x = x1
                losses.append(f1)
        iterations += n

    params = _from_x(x, cfg)
    value, _, terms = total_objective(params, shape, obs, cfg, with_grad=False)
    if not np.isfinite(value):
        raise NonFiniteLoss(f"non-finite objective in frame {obs.frame_id!r}", {"frame_id": obs.frame_id})
    details = terms.pop("details")
    report = FitReport(
        final_loss=value,
        iterations=iterations,
        terms=terms,
        details=details,
        losses=losses,
        wall_ms=(time.perf_counter() - t0) * 1000.0,
        converged=bool(res.success) if res is not None else True,
        message=str(res.message) if res is not None else "",
    )
    log.debug("frame %s: loss %.6g after %d iterations", obs.frame_id, value, iterations)
    return params, report


# ---------------------------------------------------------------- shape calibration
def calibrate_shape(frames, init_beta=None, init_thetas=None, cfg: OptimConfig = OptimConfig(), return_report=False):
    """Recover ``beta`` jointly with per-frame pose and extrinsic deltas.

    Uses marker, silhouette, anatomy and magnitude-regularisation terms (no
    pressure rendering). ``beta`` stays inside its bounds by construction of
    the bounded solver.
    """
    frames = list(frames)
    if len(frames) < 3:
        raise InsufficientFrames(f"need at least 3 frames, got {len(frames)}")
    nf = len(frames)
    beta0 = hm.as_beta(init_beta).copy() if init_beta is not None else np.ones(hm.N_BETA)
    if init_thetas is None:
        init_thetas = [np.zeros(hm.N_DOF)] * nf
    per = hm.N_DOF + 6
    x0 = np.zeros(hm.N_BETA + nf * per)
    x0[: hm.N_BETA] = beta0
    for i, th in enumerate(init_thetas):
        x0[hm.N_BETA + i * per : hm.N_BETA + i * per + hm.N_DOF] = hm.as_theta(th)
    s = cfg.trans_scale

    def fun(x):
        beta = x[: hm.N_BETA]
        model = hm.HandModel(beta)
        reg = float(np.mean((beta - 1.0) ** 2))
        total = cfg.w_reg * reg * nf
        g = np.zeros_like(x)
        g[: hm.N_BETA] += cfg.w_reg * 2.0 * (beta - 1.0) / hm.N_BETA * nf
        for i, obs in enumerate(frames):
            o = hm.N_BETA + i * per
            theta = x[o : o + hm.N_DOF]
            omega = x[o + hm.N_DOF : o + hm.N_DOF + 3]
            dT = x[o + hm.N_DOF + 3 : o + per] / s
            art = model.articulate(theta)
            value, _, _, gr = _frame_terms(art, theta, omega, dT, None, obs, cfg, with_render=False)
            th_reg = cfg.w_reg * float(np.mean(theta**2))
            total += value + th_reg
            g[o : o + hm.N_DOF] = art.pose_vjp(gr["joints"], gr["verts"]) + gr["theta_anat"]
            g[o : o + hm.N_DOF] += cfg.w_reg * 2.0 * theta / hm.N_DOF
            g[o + hm.N_DOF : o + hm.N_DOF + 3] = gr["omega"]
            g[o + hm.N_DOF + 3 : o + per] = gr["trans"] / s
            g[: hm.N_BETA] += hm.shape_vjp(theta, beta, gr["joints"], gr["verts"])
        if not np.isfinite(total):
            raise NonFiniteLoss("non-finite calibration objective", {"beta": beta.tolist()})
        return total, g

    bounds = [hm.BETA_BOUNDS] * hm.N_BETA + [(None, None)] * (nf * per)
    x0[: hm.N_BETA] = np.clip(x0[: hm.N_BETA], *hm.BETA_BOUNDS)
    res = minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": cfg.max_iter, "gtol": cfg.gtol, "ftol": cfg.ftol, "maxcor": 30},
    )
    beta = np.clip(res.x[: hm.N_BETA], *hm.BETA_BOUNDS)
    shape = hm.HandShape(beta)
    if return_report:
        thetas = [res.x[hm.N_BETA + i * per : hm.N_BETA + i * per + hm.N_DOF].copy() for i in range(nf)]
        return shape, {"final_loss": float(res.fun), "iterations": int(res.nit), "thetas": thetas, "message": str(res.message)}
    return shape


# ---------------------------------------------------------------- extrinsics
def _reproj(model: FisheyeModel, R, t, X, u):
    Y = X @ R.T + t
    uv = model.project(Y)
    return Y, (uv - u).ravel()


def solve_extrinsics(
    x_hand, u_px, model: FisheyeModel, init: RigidTransform, max_iter=100, lambda_init=1e-3, lambda_cap=1e10
):
    """Levenberg-Marquardt for ``min sum |pi(R X + t) - u|^2``.

    Rotation updates are ``R <- exp(dw) R`` (left perturbation chart).
    Returns ``(transform, rms_px)``.
    """
    X = np.asarray(x_hand, dtype=float)
    u = np.asarray(u_px, dtype=float)
    R, t = init.rot.copy(), init.trans.copy()
    try:
        Y, r = _reproj(model, R, t, X, u)
    except (OutOfFieldOfView, BehindCamera) as exc:
        raise DivergedSolve(f"initial transform puts points outside the field of view: {exc}") from exc
    cost0 = cost = float(r @ r)
    lam = lambda_init
    for _ in range(max_iter):
        _, Jp = model.project(Y, return_jacobian=True)
        RX = X @ R.T
        Jrows = np.zeros((X.shape[0], 2, 6))
        for i in range(X.shape[0]):
            Jrows[i, :, :3] = -Jp[i] @ skew(RX[i])
            Jrows[i, :, 3:] = Jp[i]
        J = Jrows.reshape(-1, 6)
        JtJ = J.T @ J
        g = J.T @ r
        if np.max(np.abs(g)) < 1e-14 * max(1.0, cost) or cost < 1e-28:
            break
        improved = False
        while lam <= lambda_cap:
            A = JtJ + lam * np.diag(np.diag(JtJ) + 1e-12)
            step = -np.linalg.solve(A, g)
            R_new = exp_so3(step[:3]) @ R
            t_new = t + step[3:]
            try:
                Y_new, r_new = _reproj(model, R_new, t_new, X, u)
                c_new = float(r_new @ r_new)
            except (OutOfFieldOfView, BehindCamera):
                c_new = np.inf
            if c_new < cost:
                done = cost - c_new <= 1e-14 * cost
                R, t, Y, r, cost = R_new, t_new, Y_new, r_new, c_new
                lam = max(lam / 3.0, 1e-12)
                improved = True
                break
            lam *= 4.0
        if not improved:
            if cost > cost0 * (1 - 1e-12) and np.max(np.abs(g)) > 1e-6 * max(1.0, np.sqrt(cost)):
                raise DivergedSolve(f"no descent step found with damping up to {lambda_cap:g}")
            break
        if done:
            break
    R = orthonormalize(R)
    rms = float(np.sqrt(cost / X.shape[0]))
    return RigidTransform(R, t), rms


def compose_residual_extrinsics(base: RigidTransform, d_rot, d_t):
    """``R = dR R_base``, ``t = t_base + dt``; ``d_rot`` is axis-angle (3) or 6-D (6)."""
    d_rot = np.asarray(d_rot, dtype=float).ravel()
    if d_rot.size == 3:
        dR = exp_so3(d_rot)
    elif d_rot.size == 6:
        dR = rot6d_to_matrix(d_rot)
    else:
        raise ValueError("rotation delta must have 3 (axis-angle) or 6 (6-D) components")
    return RigidTransform(dR @ base.rot, base.trans + np.asarray(d_t, dtype=float).reshape(3))
