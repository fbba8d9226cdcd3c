"""Procedural articulated right hand used in place of MANO.

Layout (21 joints): 0 wrist; thumb 1-4; index 5-8; middle 9-12; ring 13-16;
pinky 17-20. The first joint of every finger (1, 5, 9, 13, 17) is rigidly
attached to the palm. Each finger has four DOFs, stored in ``theta`` as
``[4 f + 0] MCP flexion, [4 f + 1] MCP abduction, [4 f + 2] PIP flexion,
[4 f + 3] DIP flexion`` (the thumb uses the same layout on its CMC/MCP/IP
chain).

The mesh is 16 rigid parts (palm + 15 phalanges) built from elliptic tubes
and capsules, 778 vertices in total. Parts are skinned rigidly; the first
ring of every phalanx is blended half-and-half with its parent part.

Everything lives in the hand-local frame: the wrist is the origin, the
index MCP lies on +x and ``hand_local_frame(joints)`` is the identity.
Flexion curls the fingers towards -z (palmar side).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

N_JOINTS = 21
N_VERTS = 778
N_DOF = 20
N_BETA = 10
N_PARTS = 16

FINGERS = ("thumb", "index", "middle", "ring", "pinky")
FINGER_JOINTS = tuple(tuple(range(1 + 4 * f, 5 + 4 * f)) for f in range(5))
TIP_JOINTS = tuple(j[-1] for j in FINGER_JOINTS)
PARENTS = (-1,) + tuple(0 if (j - 1) % 4 == 0 else j - 1 for j in range(1, N_JOINTS))
FIRST_CHILD = tuple(
    next((c for c in range(N_JOINTS) if PARENTS[c] == j), -1) for j in range(N_JOINTS)
)

DOF_NAMES = tuple(
    f"{finger}_{dof}" for finger in FINGERS for dof in ("mcp_flex", "mcp_abd", "pip_flex", "dip_flex")
)

# joint limits in degrees: MCP flexion, MCP abduction, PIP flexion, DIP flexion
_LIMITS_DEG = np.array([[-10.0, 110.0], [-25.0, 25.0], [0.0, 110.0], [0.0, 110.0]])
JOINT_LIMITS = np.deg2rad(np.tile(_LIMITS_DEG, (5, 1)))

BETA_BOUNDS = (0.5, 2.0)

# ---------------------------------------------------------------- template
_BASE = np.array(
    [
        [0.024, 0.020, -0.012],  # thumb CMC
        [0.088, 0.000, 0.000],  # index MCP (on +x by construction)
        [0.086, -0.021, 0.000],
        [0.080, -0.040, 0.000],
        [0.071, -0.057, 0.000],
    ]
)
_LENGTHS = np.array(
    [
        [0.038, 0.032, 0.027],
        [0.042, 0.025, 0.022],
        [0.046, 0.029, 0.024],
        [0.043, 0.028, 0.023],
        [0.034, 0.021, 0.020],
    ]
)
_RADII = np.array([0.0105, 0.0085, 0.0088, 0.0082, 0.0072])
_TAPER = np.array([1.0, 0.92, 0.85])

_PALM_X = (-0.004, 0.082)
_PALM_CENTER_YZ = (-0.024, -0.003)
_PALM_HALF = (0.043, 0.0125)  # half width (y), half thickness (z)
_PALM_RINGS, _PALM_AROUND = 7, 19
_RINGS, _AROUND = 5, 8

FINGERTIP_RADIUS = 0.015


def _finger_frames():
    frames = np.zeros((5, 3, 3))
    palmar = np.array([0.0, 0.0, -1.0])
    for f, deg in zip(range(1, 5), (3.0, -2.0, -8.0, -15.0)):
        a = np.deg2rad(deg)
        e1 = np.array([np.cos(a), np.sin(a), 0.0])
        frames[f] = np.column_stack([e1, np.cross(palmar, e1), palmar])
    e1 = np.array([0.6, 0.72, -0.3])
    e1 /= np.linalg.norm(e1)
    g = np.array([-0.2, -1.0, -0.5])
    e3 = g - (g @ e1) * e1
    e3 /= np.linalg.norm(e3)
    frames[0] = np.column_stack([e1, np.cross(e3, e1), e3])
    return frames


FRAMES = _finger_frames()


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    R = np.zeros(a.shape + (3, 3))
    R[..., 0, 0], R[..., 0, 1] = c, -s
    R[..., 1, 0], R[..., 1, 1] = s, c
    R[..., 2, 2] = 1.0
    return R


def _rflex(t):
    """Rotation about local -y: maps +x towards +z (the palmar axis of a finger frame)."""
    c, s = np.cos(t), np.sin(t)
    R = np.zeros(t.shape + (3, 3))
    R[..., 0, 0], R[..., 0, 2] = c, -s
    R[..., 1, 1] = 1.0
    R[..., 2, 0], R[..., 2, 2] = s, c
    return R


# ---------------------------------------------------------------- types
@dataclass(frozen=True)
class HandShape:
    """Bone-scale multipliers.

    0 global scale, 1-5 per-finger length (thumb..pinky), 6 palm width,
    7 palm length, 8 palm thickness, 9 finger thickness.
    """

    beta: np.ndarray

    def __post_init__(self):
        b = np.array(self.beta, dtype=float).reshape(N_BETA)
        if np.any(b < BETA_BOUNDS[0]) or np.any(b > BETA_BOUNDS[1]) or not np.all(np.isfinite(b)):
            raise ValueError(f"beta outside {BETA_BOUNDS}: {b}")
        object.__setattr__(self, "beta", b)

    @classmethod
    def neutral(cls):
        return cls(np.ones(N_BETA))


@dataclass(frozen=True)
class HandPose:
    theta: np.ndarray

    def __post_init__(self):
        t = np.array(self.theta, dtype=float).reshape(N_DOF)
        object.__setattr__(self, "theta", t)

    @classmethod
    def rest(cls):
        return cls(np.zeros(N_DOF))


@dataclass(frozen=True)
class HandMesh:
    vertices: np.ndarray
    faces: np.ndarray
    joints: np.ndarray

    def transformed(self, transform):
        return HandMesh(transform.apply(self.vertices), self.faces, transform.apply(self.joints))


def as_theta(pose):
    theta = pose.theta if isinstance(pose, HandPose) else np.asarray(pose, dtype=float)
    return theta.reshape(N_DOF)


def as_beta(shape):
    if shape is None:
        return np.ones(N_BETA)
    beta = shape.beta if isinstance(shape, HandShape) else np.asarray(shape, dtype=float)
    return beta.reshape(N_BETA)


# ---------------------------------------------------------------- topology
@dataclass(frozen=True)
class _Topology:
    faces: np.ndarray
    own_part: np.ndarray  # (778,)
    parent_part: np.ndarray  # (778,)
    own_weight: np.ndarray  # (778,)
    finger_slices: tuple  # per (finger, part k): slice into the vertex array
    dof_parts: np.ndarray  # (20, 16) 0/1 mask: DOF moves part
    joint_part: np.ndarray  # (21,)


@lru_cache(maxsize=1)
def topology():
    faces = []
    own = np.zeros(N_VERTS, dtype=int)
    parent = np.zeros(N_VERTS, dtype=int)
    weight = np.ones(N_VERTS)

    def tube(start, n_rings, n_around, cap_start=True, cap_end=True):
        for r in range(n_rings - 1):
            for j in range(n_around):
                a = start + r * n_around + j
                b = start + r * n_around + (j + 1) % n_around
                faces.append((a, b, b + n_around))
                faces.append((a, b + n_around, a + n_around))
        if cap_start:
            for j in range(1, n_around - 1):
                faces.append((start, start + j + 1, start + j))
        if cap_end:
            e = start + (n_rings - 1) * n_around
            for j in range(1, n_around - 1):
                faces.append((e, e + j, e + j + 1))

    tube(0, _PALM_RINGS, _PALM_AROUND)
    idx = _PALM_RINGS * _PALM_AROUND
    slices = []
    for f in range(5):
        row = []
        for k in range(3):
            n = _RINGS * _AROUND + (_AROUND + 1 if k == 2 else 0)
            part = 1 + 3 * f + k
            own[idx : idx + n] = part
            parent[idx : idx + n] = 0 if k == 0 else part - 1
            weight[idx : idx + _AROUND] = 0.5
            if k < 2:
                tube(idx, _RINGS, _AROUND)
            else:
                tube(idx, _RINGS + 1, _AROUND, cap_end=False)
                apex = idx + n - 1
                last = idx + _RINGS * _AROUND
                for j in range(_AROUND):
                    faces.append((last + j, last + (j + 1) % _AROUND, apex))
            row.append(slice(idx, idx + n))
            idx += n
        slices.append(tuple(row))
    assert idx == N_VERTS
    parent[own == 0] = 0

    dof_parts = np.zeros((N_DOF, N_PARTS))
    for f in range(5):
        for k in range(3):
            dof_parts[4 * f + 0, 1 + 3 * f + k] = 1
            dof_parts[4 * f + 1, 1 + 3 * f + k] = 1
        dof_parts[4 * f + 2, 1 + 3 * f + 1 : 1 + 3 * f + 3] = 1
        dof_parts[4 * f + 3, 1 + 3 * f + 2] = 1
    joint_part = np.zeros(N_JOINTS, dtype=int)
    for f, js in enumerate(FINGER_JOINTS):
        for k, j in enumerate(js[1:]):
            joint_part[j] = 1 + 3 * f + k
    return _Topology(np.array(faces, dtype=int), own, parent, weight, tuple(slices), dof_parts, joint_part)


# ---------------------------------------------------------------- model
class HandModel:
    """Rest geometry for one shape; :meth:`articulate` poses it."""

    def __init__(self, shape=None):
        b = as_beta(shape)
        self.beta = b.copy()
        topo = topology()
        s0 = b[0]
        base = _BASE * s0
        base[1:, 0] *= b[7]
        base[1:, 1] *= b[6]
        base[0, 2] *= b[8]
        self.base = base
        self.lengths = _LENGTHS * s0 * b[1:6, None]
        radii = _RADII * s0 * b[9]

        verts = np.zeros((N_VERTS, 3))
        # palm: elliptic tube along x
        x0, x1 = (np.array(_PALM_X) * s0 * b[7])
        cy, cz = _PALM_CENTER_YZ[0] * s0 * b[6], _PALM_CENTER_YZ[1] * s0 * b[8]
        hw, ht = _PALM_HALF[0] * s0 * b[6], _PALM_HALF[1] * s0 * b[8]
        phi = 2 * np.pi * np.arange(_PALM_AROUND) / _PALM_AROUND
        xs = np.linspace(x0, x1, _PALM_RINGS)
        ring = np.stack([np.zeros_like(phi), cy + hw * np.cos(phi), cz + ht * np.sin(phi)], 1)
        verts[: _PALM_RINGS * _PALM_AROUND] = (ring[None] + xs[:, None, None] * np.array([1.0, 0, 0])).reshape(-1, 3)

        phi = 2 * np.pi * np.arange(_AROUND) / _AROUND
        circ = np.stack([np.cos(phi), np.sin(phi)], 1)
        pivots_rest = np.zeros((5, 3, 3))
        for f in range(5):
            e1, e2, e3 = FRAMES[f].T
            L = self.lengths[f]
            start = 0.0
            for k in range(3):
                r = radii[f] * _TAPER[k]
                pivots_rest[f, k] = base[f] + start * e1
                if k < 2:
                    s = L[k] * np.arange(_RINGS) / _RINGS
                    rad = np.full(_RINGS, r)
                else:
                    s = (L[k] - r) * np.arange(_RINGS) / (_RINGS - 1)
                    s = np.append(s, L[k] - 0.35 * r)
                    rad = np.append(np.full(_RINGS, r), 0.72 * r)
                pts = (
                    base[f]
                    + (start + s)[:, None, None] * e1
                    + rad[:, None, None] * (circ[None, :, 0:1] * e2 + circ[None, :, 1:2] * e3)
                ).reshape(-1, 3)
                if k == 2:
                    pts = np.vstack([pts, base[f] + (start + L[k]) * e1])
                verts[topo.finger_slices[f][k]] = pts
                start += L[k]
        self.rest_vertices = verts
        self.pivots_rest = pivots_rest  # (finger, part k) proximal joint at rest

    @property
    def faces(self):
        return topology().faces

    def articulate(self, pose):
        return Articulation(self, as_theta(pose))


class Articulation:
    """Posed joints and vertices plus the data needed for analytic pose gradients."""

    def __init__(self, model: HandModel, theta):
        topo = topology()
        self.model = model
        self.theta = np.array(theta, dtype=float)
        th = self.theta.reshape(5, 4)
        F = FRAMES
        FRz = F @ _rz(th[:, 1])
        O0 = FRz @ _rflex(th[:, 0])
        O1 = O0 @ _rflex(th[:, 2])
        O2 = O1 @ _rflex(th[:, 3])
        O = np.stack([O0, O1, O2], 1)  # (5, 3, 3, 3)
        L = model.lengths
        base = model.base
        j2 = base + L[:, 0, None] * O0[:, :, 0]
        j3 = j2 + L[:, 1, None] * O1[:, :, 0]
        tip = j3 + L[:, 2, None] * O2[:, :, 0]

        joints = np.zeros((N_JOINTS, 3))
        for f, js in enumerate(FINGER_JOINTS):
            joints[js[0]], joints[js[1]], joints[js[2]], joints[js[3]] = base[f], j2[f], j3[f], tip[f]
        self.joints = joints

        # rigid part transforms: y = A (x - q_rest) + q
        A = np.tile(np.eye(3), (N_PARTS, 1, 1))
        q = np.zeros((N_PARTS, 3))
        q_rest = np.zeros((N_PARTS, 3))
        A[1:] = (O @ np.swapaxes(F, 1, 2)[:, None]).reshape(15, 3, 3)
        q[1:] = np.stack([base, j2, j3], 1).reshape(15, 3)
        q_rest[1:] = model.pivots_rest.reshape(15, 3)
        self.A, self.q, self.q_rest = A, q, q_rest

        x = model.rest_vertices
        y_own = np.einsum("nij,nj->ni", A[topo.own_part], x - q_rest[topo.own_part]) + q[topo.own_part]
        y_par = np.einsum("nij,nj->ni", A[topo.parent_part], x - q_rest[topo.parent_part]) + q[topo.parent_part]
        w = topo.own_weight[:, None]
        self.vertices = w * y_own + (1.0 - w) * y_par
        self._y_own, self._y_par = y_own, y_par

        axes = np.zeros((5, 4, 3))
        pivots = np.zeros((5, 4, 3))
        axes[:, 0] = -FRz[:, :, 1]
        axes[:, 1] = F[:, :, 2]
        axes[:, 2] = -O0[:, :, 1]
        axes[:, 3] = -O1[:, :, 1]
        pivots[:, 0] = pivots[:, 1] = base
        pivots[:, 2] = j2
        pivots[:, 3] = j3
        self.dof_axes = axes.reshape(N_DOF, 3)
        self.dof_pivots = pivots.reshape(N_DOF, 3)

    def mesh(self):
        return HandMesh(self.vertices, self.model.faces, self.joints)

    def pose_vjp(self, g_joints=None, g_verts=None):
        """Gradient w.r.t. ``theta`` given gradients w.r.t. joints and vertices.

        Any point attached to part ``b`` moves as ``a_k x (y - p_k)`` under
        DOF ``k`` when ``k`` drives ``b``.
        """
        topo = topology()
        Acc = np.zeros((N_PARTS, 3))
        Bcc = np.zeros((N_PARTS, 3))
        if g_verts is not None:
            g = np.asarray(g_verts, dtype=float)
            w = topo.own_weight[:, None]
            for part, y, wt in ((topo.own_part, self._y_own, w), (topo.parent_part, self._y_par, 1.0 - w)):
                gw = wt * g
                np.add.at(Acc, part, np.cross(y, gw))
                np.add.at(Bcc, part, gw)
        if g_joints is not None:
            g = np.asarray(g_joints, dtype=float)
            np.add.at(Acc, topo.joint_part, np.cross(self.joints, g))
            np.add.at(Bcc, topo.joint_part, g)
        SA = topo.dof_parts @ Acc
        SB = topo.dof_parts @ Bcc
        return np.einsum("kc,kc->k", self.dof_axes, SA - np.cross(self.dof_pivots, SB))


@lru_cache(maxsize=64)
def _model_for(beta_key):
    return HandModel(np.array(beta_key))


def model_for(shape=None):
    """Memoised :class:`HandModel` for a shape."""
    return _model_for(tuple(float(b) for b in as_beta(shape)))


def forward_kinematics(pose, shape=None):
    return model_for(shape).articulate(pose).joints


def skin_mesh(pose, shape=None):
    return model_for(shape).articulate(pose).mesh()


def shape_vjp(pose, shape, g_joints=None, g_verts=None, h=1e-4):
    """Gradient w.r.t. ``beta`` given position gradients.

    Posed positions are multilinear in the shape multipliers (no multiplier
    appears squared in any product), so symmetric differences along one
    coordinate are exact up to round-off.
    """
    beta = as_beta(shape)
    theta = as_theta(pose)
    out = np.zeros(N_BETA)
    for k in range(N_BETA):
        bp, bm = beta.copy(), beta.copy()
        bp[k] += h
        bm[k] -= h
        ap = HandModel(bp).articulate(theta)
        am = HandModel(bm).articulate(theta)
        if g_joints is not None:
            out[k] += np.sum(g_joints * (ap.joints - am.joints)) / (2 * h)
        if g_verts is not None:
            out[k] += np.sum(g_verts * (ap.vertices - am.vertices)) / (2 * h)
    return out


# ---------------------------------------------------------------- anatomy
def anatomical_penalty(pose, weight=1.0, return_grad=False):
    """Quadratic hinge on the joint limits; zero inside them."""
    theta = as_theta(pose)
    lo, hi = JOINT_LIMITS[:, 0], JOINT_LIMITS[:, 1]
    below = np.minimum(theta - lo, 0.0)
    above = np.maximum(theta - hi, 0.0)
    value = weight * float(np.sum(below**2) + np.sum(above**2))
    if return_grad:
        return value, 2.0 * weight * (below + above)
    return value


@lru_cache(maxsize=1)
def _fingertip_regions():
    topo = topology()
    art = model_for(None).articulate(np.zeros(N_DOF))
    regions = []
    for f in range(5):
        sl = topo.finger_slices[f][2]
        idx = np.arange(sl.start, sl.stop)
        d = np.linalg.norm(art.vertices[idx] - art.joints[TIP_JOINTS[f]], axis=1)
        regions.append(idx[d <= FINGERTIP_RADIUS])
    return tuple(regions)


@dataclass(frozen=True)
class FingertipRegions:
    indices: tuple

    @classmethod
    def default(cls):
        return cls(_fingertip_regions())

    def __getitem__(self, finger):
        if isinstance(finger, str):
            finger = FINGERS.index(finger)
        return self.indices[finger]

    def union(self, fingers=FINGERS):
        return np.concatenate([self[f] for f in fingers])


# ---------------------------------------------------------------- files
def save_pose_shape(path, pose, shape):
    with open(path, "w") as fh:
        json.dump({"theta": as_theta(pose).tolist(), "beta": as_beta(shape).tolist()}, fh)


def load_pose_shape(path):
    with open(path) as fh:
        obj = json.load(fh)
    theta, beta = obj["theta"], obj["beta"]
    if len(theta) != N_DOF or len(beta) != N_BETA:
        raise ValueError(f"expected {N_DOF} theta and {N_BETA} beta values")
    return HandPose(theta), HandShape(beta)


def write_obj(path, mesh: HandMesh):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for a, b, c in mesh.faces:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")
