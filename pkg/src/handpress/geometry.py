"""Rotations, rigid transforms, canonical hand frame and alignment helpers.

Conventions: rotation matrices act on column vectors, point arrays are
``(N, 3)`` and transformed as ``points @ R.T + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateConfiguration,
    DegenerateInput,
    DegenerateLandmarks,
    InvalidRotation,
)

ROTATION_TOL = 1e-6

# joint indices used by the canonical frame (21-joint layout, see handmodel)
WRIST, INDEX_MCP, MIDDLE_MCP, PINKY_MCP = 0, 5, 9, 17


def skew(v):
    """Cross-product matrix ``[v]x`` such that ``skew(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(omega):
    """Rodrigues formula: axis-angle vector (radians) to rotation matrix."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-8:
        # second-order series, exact to double precision at this size
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def matrix_to_quaternion(R):
    """Shepperd's method; returns ``(w, x, y, z)`` with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    diag = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    k = int(np.argmax(diag))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + 2.0 * R[0, 0] - tr)
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + 2.0 * R[1, 1] - tr)
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + 2.0 * R[2, 2] - tr)
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def log_so3(R):
    """Matrix logarithm as an axis-angle vector with norm in ``[0, pi]``.

    Goes through the unit quaternion, which stays well conditioned at
    angles near pi where the Rodrigues inverse breaks down.
    """
    q = matrix_to_quaternion(R)
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-12:
        return 2.0 * v / q[0]
    angle = 2.0 * np.arctan2(s, q[0])
    return angle * v / s


def right_jacobian_so3(omega):
    """Right Jacobian: ``exp(w + dw) ~= exp(w) exp(Jr(w) dw)``."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    t2 = theta * theta
    return np.eye(3) - (1.0 - np.cos(theta)) / t2 * K + (theta - np.sin(theta)) / (t2 * theta) * K @ K


def orthonormalize(R):
    """Nearest rotation matrix in Frobenius norm."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def check_rotation(R, tol=ROTATION_TOL):
    """Validate ``R`` and return its re-orthonormalized copy.

    Deviations below ``tol`` (file-format rounding) are repaired, anything
    larger raises :class:`InvalidRotation`.
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidRotation(f"expected a finite 3x3 matrix, got shape {R.shape}")
    err = np.linalg.norm(R.T @ R - np.eye(3))
    if err > tol or np.linalg.det(R) < 0:
        raise InvalidRotation(f"not a rotation: |R^T R - I| = {err:.3g}, det = {np.linalg.det(R):.6f}")
    if err > 1e-12:
        R = orthonormalize(R)
    return R


@dataclass(frozen=True)
class RigidTransform:
    """``x -> rot @ x + trans``."""

    rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rot", np.array(self.rot, dtype=float).reshape(3, 3))
        object.__setattr__(self, "trans", np.array(self.trans, dtype=float).reshape(3))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rot
        T[:3, 3] = self.trans
        return T

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.rot.T + self.trans

    def inverse(self):
        Rt = self.rot.T
        return RigidTransform(Rt, -Rt @ self.trans)

    def compose(self, other):
        """``self @ other``: apply ``other`` first."""
        return RigidTransform(self.rot @ other.rot, self.rot @ other.trans + self.trans)

    __matmul__ = compose

    def to_json(self):
        return {"rot": self.rot.tolist(), "trans": self.trans.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(check_rotation(obj["rot"]), obj["trans"])


def rot6d_to_matrix(r6):
    """Gram-Schmidt on the two stored columns; third column is their cross product."""
    r6 = np.asarray(r6, dtype=float).reshape(6)
    a, b = r6[:3], r6[3:]
    na = np.linalg.norm(a)
    if na <= 1e-12:
        raise DegenerateInput("first 6D column has (near) zero norm")
    c1 = a / na
    b_perp = b - (b @ c1) * c1
    nb = np.linalg.norm(b_perp)
    if nb <= 1e-12:
        raise DegenerateInput("6D columns are parallel")
    c2 = b_perp / nb
    c3 = np.cross(c1, c2)
    return np.column_stack([c1, c2, c3])


def matrix_to_rot6d(R):
    R = np.asarray(R, dtype=float)
    return np.concatenate([R[:, 0], R[:, 1]])


def geodesic_distance(r1, r2):
    """Rotation angle of ``r2^T r1`` in radians, in ``[0, pi]``."""
    r1 = check_rotation(r1)
    r2 = check_rotation(r2)
    q = matrix_to_quaternion(r2.T @ r1)
    return float(2.0 * np.arctan2(np.linalg.norm(q[1:]), abs(q[0])))


def umeyama_align(source, target, with_scale=True):
    """Least-squares similarity (or rigid) transform mapping ``source`` onto ``target``.

    Returns ``(s, T)`` minimising ``sum |s R x_i + t - y_i|^2``; the rotation
    part of ``T`` already excludes the scale, i.e. the aligned points are
    ``s * source @ T.rot.T + T.trans``.
    """
    X = np.asarray(source, dtype=float)
    Y = np.asarray(target, dtype=float)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise DegenerateConfiguration(f"shape mismatch {X.shape} vs {Y.shape}")
    n = X.shape[0]
    if n < 3:
        raise DegenerateConfiguration("need at least 3 correspondences")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    var_x = (Xc**2).sum() / n
    sv = np.linalg.svd(Xc, compute_uv=False)
    if var_x < 1e-24 or sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise DegenerateConfiguration("source points are coincident or collinear")
    cov = Yc.T @ Xc / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_x) if with_scale else 1.0
    t = my - s * R @ mx
    return s, RigidTransform(R, t)


def hand_local_frame(joints):
    """World-to-hand-local transform from the wrist, index-MCP and pinky-MCP joints.

    Origin at the wrist, +x towards the index MCP, z along the normal of the
    wrist-index / wrist-pinky plane. The normal is flipped when it disagrees
    with ``(wrist->middle) x (wrist->index)`` so that every subject ends up
    with the same orientation.
    """
    J = np.asarray(joints, dtype=float)
    w = J[WRIST]
    a = J[INDEX_MCP] - w
    p = J[PINKY_MCP] - w
    m = J[MIDDLE_MCP] - w
    la, lp = np.linalg.norm(a), np.linalg.norm(p)
    if la < 1e-9 or lp < 1e-9 or np.linalg.norm(J[INDEX_MCP] - J[PINKY_MCP]) < 1e-9:
        raise DegenerateLandmarks("wrist, index MCP and pinky MCP must be distinct")
    n = np.cross(a, p)
    nn = np.linalg.norm(n)
    if nn < 1e-9 * la * lp:
        raise DegenerateLandmarks("wrist, index MCP and pinky MCP are collinear")
    x = a / la
    z = n / nn
    if z @ np.cross(m, a) < 0:
        z = -z
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return RigidTransform(R, -R @ w)


@dataclass(frozen=True)
class TouchPlane:
    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    n: np.ndarray

    def to_plane_coords(self, point):
        d = np.asarray(point, dtype=float) - self.origin
        return np.array([d @ self.u, d @ self.v])

    def signed_distance(self, points):
        return (np.asarray(points, dtype=float) - self.origin) @ self.n


def fit_plane_svd(points, cam_x=(1.0, 0.0, 0.0), cam_z=(0.0, 0.0, 1.0)):
    """Least-squares plane through camera-frame points.

    The normal faces the camera (``n . -z_cam >= 0``), ``u`` is the negative
    camera x-axis projected onto the plane and ``v = n x u``.
    """
    P = np.asarray(points, dtype=float)
    if P.ndim != 2 or P.shape[1] != 3 or P.shape[0] < 3:
        raise DegenerateConfiguration("need at least 3 points of dimension 3")
    origin = P.mean(0)
    _, S, Vt = np.linalg.svd(P - origin)
    if S[1] <= 1e-9 * max(S[0], 1e-300):
        raise DegenerateConfiguration("points are collinear or coincident")
    n = Vt[2]
    cam_x = np.asarray(cam_x, dtype=float)
    cam_z = np.asarray(cam_z, dtype=float)
    if n @ -cam_z < 0:
        n = -n
    u = -cam_x - (-cam_x @ n) * n
    if np.linalg.norm(u) < 1e-9:
        # plane facing along the camera x-axis; camera y is the next best reference
        y = np.cross(cam_z, cam_x)
        u = y - (y @ n) * n
    u = u / np.linalg.norm(u)
    v = np.cross(n, u)
    return TouchPlane(origin, u, v, n)
