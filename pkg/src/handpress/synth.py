"""Synthetic capture sessions with exact ground truth.

World frame: the pressure sensor lies in ``z = 0`` with its grid centred on
the origin; the hand is held palm-down above it and presses with the
requested fingertips. A third-person pinhole camera looks at the scene and
a fisheye camera is strapped under the wrist.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import handmodel as hm
from .annofit import AnnoParams, FrameObservations, Rig, SilhouetteParams, initial_pressure, render_silhouette
from .camera import FisheyeModel, PinholeModel, default_fisheye
from .geometry import RigidTransform, exp_so3, hand_local_frame, log_so3
from .pressrender import OrthoCamera, render_pressure

CAMERA_HEIGHT = 0.028
CAMERA_TILT_DEG = 40.0


@dataclass(frozen=True)
class ScenarioConfig:
    marker_noise_mm: float = 0.5
    kp_noise_px: float = 5.0
    press_force_g: float = 200.0
    wrist_pitch_deg_range: tuple = (-10.0, 20.0)  # wrist flexion relative to the strap camera
    hand_pitch_deg_range: tuple = (0.0, 15.0)  # hand tilt relative to the table
    yaw_deg_range: tuple = (-20.0, 20.0)
    press_fingers: tuple = ("index",)
    penetration_mm: float = 1.5
    clearance_mm: float = 4.0
    shape_jitter: float = 0.05
    with_mask: bool = True
    init_theta_deg: float = 10.0
    init_trans_mm: float = 5.0

    def __post_init__(self):
        lo, hi = self.wrist_pitch_deg_range
        if lo > hi or self.marker_noise_mm < 0 or self.kp_noise_px < 0 or self.press_force_g < 0:
            raise ValueError("invalid scenario configuration")
        if not 0 <= self.shape_jitter < 0.5:
            raise ValueError("shape_jitter must lie in [0, 0.5)")
        for f in self.press_fingers:
            if f not in hm.FINGERS:
                raise ValueError(f"unknown finger {f!r}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("wrist_pitch_deg_range", "hand_pitch_deg_range", "yaw_deg_range", "press_fingers"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def default_mean_extrinsics():
    """Hand-local -> wrist-camera transform of the average wearer.

    The optical axis points forward along the palm, tilted towards it by
    ``CAMERA_TILT_DEG``; the wrist sits on the axis ``CAMERA_HEIGHT`` in front
    of the lens. Image ``x`` runs towards the little finger.
    """
    a = np.deg2rad(CAMERA_TILT_DEG)
    z_c = np.array([np.cos(a), 0.0, np.sin(a)])
    x_c = np.array([0.0, -1.0, 0.0])
    y_c = np.cross(z_c, x_c)
    R = np.stack([x_c, y_c, z_c])
    return RigidTransform(R, np.array([0.0, 0.0, CAMERA_HEIGHT]))


def _look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World -> camera transform for a camera at ``eye`` looking at ``target`` (image y down)."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return RigidTransform(R, -R @ eye)


def default_rig():
    sensor = OrthoCamera()
    kinect = _look_at((-0.30, -0.38, 0.48), (0.0, 0.0, 0.02))
    return Rig(sensor, kinect, PinholeModel(260.0, 260.0, 79.5, 59.5), (160, 120), SilhouetteParams())


def _rot_y(deg):
    return exp_so3(np.array([0.0, np.deg2rad(deg), 0.0]))


def _rot_z(deg):
    return exp_so3(np.array([0.0, 0.0, np.deg2rad(deg)]))


def _sample_theta(rng, press):
    lo = np.deg2rad(np.array([-5.0, -8.0, 5.0, 5.0]))
    hi = np.deg2rad(np.array([20.0, 8.0, 30.0, 20.0]))
    plo = np.deg2rad(np.array([35.0, -8.0, 25.0, 10.0]))
    phi = np.deg2rad(np.array([60.0, 8.0, 50.0, 30.0]))
    th = np.zeros((5, 4))
    for f, name in enumerate(hm.FINGERS):
        if name in press:
            th[f] = rng.uniform(plo, phi)
        else:
            th[f] = rng.uniform(lo, hi)
    return th.ravel()


@dataclass(frozen=True)
class SyntheticFrame:
    seed: int
    config: ScenarioConfig
    theta: np.ndarray
    beta: np.ndarray
    hand_to_world: RigidTransform
    extrinsics: RigidTransform  # hand-local -> wrist camera
    fisheye: FisheyeModel
    rig: Rig
    markers_world: np.ndarray
    keypoints_2d: np.ndarray
    pv: np.ndarray
    p_gt: np.ndarray
    hand_mask: np.ndarray | None
    init: AnnoParams = field(repr=False)
    base_transform: RigidTransform = field(repr=False)

    @property
    def shape(self):
        return hm.HandShape(self.beta)

    @property
    def obs(self):
        return FrameObservations(
            markers_world=self.markers_world,
            keypoints_2d=self.keypoints_2d,
            visibility=np.ones(hm.N_JOINTS, dtype=bool),
            p_gt=self.p_gt,
            base_transform=self.base_transform,
            rig=self.rig,
            hand_mask=self.hand_mask,
            frame_id=f"seed{self.seed}",
        )

    def gt_params(self):
        """Ground truth expressed as annotation parameters over this frame's marker base."""
        delta = self.base_transform.inverse() @ self.hand_to_world
        return AnnoParams(self.theta, log_so3(delta.rot), self.hand_to_world.trans - self.base_transform.trans, self.pv)

    def gt_joints_local(self):
        return hm.forward_kinematics(self.theta, self.beta)

    def gt_mesh_local(self):
        return hm.skin_mesh(self.theta, self.beta)


def sample_scenario(seed, config: ScenarioConfig = ScenarioConfig(), rig: Rig | None = None, fisheye=None, beta=None):
    """Draw one frame; ``beta`` overrides the jittered shape (for multi-frame calibration)."""
    rng = np.random.default_rng(seed)
    rig = rig or default_rig()
    fisheye = fisheye or default_fisheye()
    j = config.shape_jitter
    jitter = 1.0 + rng.uniform(-j, j, hm.N_BETA) if j > 0 else np.ones(hm.N_BETA)
    beta = jitter if beta is None else hm.as_beta(beta).copy()
    model = hm.HandModel(beta)
    regions = hm.FingertipRegions.default()
    press_idx = np.concatenate([regions[f] for f in config.press_fingers]) if config.press_fingers else np.array([], int)
    pen = config.penetration_mm / 1000.0

    for _ in range(1000):
        theta = _sample_theta(rng, config.press_fingers)
        art = model.articulate(theta)
        yaw = rng.uniform(*config.yaw_deg_range)
        pitch = rng.uniform(*config.hand_pitch_deg_range)
        R = _rot_z(yaw) @ _rot_y(pitch)
        V = art.vertices @ R.T
        # slide the hand so its middle MCP sits above the sensor centre, then lower it
        c = R @ art.joints[9]
        t = np.array([-c[0], -c[1], 0.0])
        if press_idx.size:
            t[2] = -pen - np.min(V[press_idx, 2])
        else:
            t[2] = 0.02 - np.min(V[:, 2])
        Vw = V + t
        others = np.setdiff1d(np.arange(hm.N_VERTS), press_idx)
        if np.min(Vw[others, 2]) < config.clearance_mm / 1000.0 - pen and press_idx.size:
            continue
        if press_idx.size:
            tip_ok = all(np.min(Vw[regions[f], 2]) < 0 for f in config.press_fingers)
            if not tip_ok:
                continue
        break
    else:
        raise RuntimeError("could not sample a contact configuration")
    hand_to_world = RigidTransform(R, t)

    pv = np.zeros(hm.N_VERTS)
    if press_idx.size:
        depth = np.maximum(0.0, -Vw[press_idx, 2])
        pv[press_idx] = depth
        if pv.sum() > 0:
            pv *= config.press_force_g / pv.sum()
    p_gt = render_pressure(Vw, pv, rig.sensor)

    joints_w = hand_to_world.apply(art.joints)
    markers = joints_w + rng.normal(0.0, config.marker_noise_mm / 1000.0, joints_w.shape)
    base = hand_local_frame(markers).inverse()

    mean = default_mean_extrinsics()
    for _ in range(100):
        pitch_w = rng.uniform(*config.wrist_pitch_deg_range)
        extr = RigidTransform(mean.rot @ _rot_y(pitch_w), mean.trans)
        X = extr.apply(art.joints)
        if np.all(np.arctan2(np.hypot(X[:, 0], X[:, 1]), X[:, 2]) < 0.95 * fisheye.theta_max):
            break
    else:
        raise RuntimeError("joints fall outside the fisheye field of view")
    kp = fisheye.project(extr.apply(art.joints))
    kp = kp + rng.normal(0.0, config.kp_noise_px, kp.shape)

    mask = None
    if config.with_mask:
        occ, _ = render_silhouette(rig.kinect.apply(Vw), rig.kinect_intrinsics, rig.mask_size, rig.silhouette)
        mask = (occ > 0.5).astype(float)

    sign = rng.choice([-1.0, 1.0], hm.N_DOF)
    theta_init = theta + sign * np.deg2rad(config.init_theta_deg)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    init = AnnoParams(theta_init, np.zeros(3), d * config.init_trans_mm / 1000.0, np.zeros(hm.N_VERTS))
    frame = SyntheticFrame(
        seed=int(seed),
        config=config,
        theta=theta,
        beta=beta,
        hand_to_world=hand_to_world,
        extrinsics=extr,
        fisheye=fisheye,
        rig=rig,
        markers_world=markers,
        keypoints_2d=kp,
        pv=pv,
        p_gt=p_gt,
        hand_mask=mask,
        init=init,
        base_transform=base,
    )
    return replace(frame, init=replace(init, pv=initial_pressure(frame.obs)))
