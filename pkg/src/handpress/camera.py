"""Fisheye (polynomial incidence-angle model) and pinhole cameras, panorama backgrounds.

Points are in the camera frame with +z along the optical axis. Pixel
coordinates are ``(u, v)`` with ``u`` along image columns.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from .errors import BehindCamera, OutOfFieldOfView, RadiusOutOfRange, SizeMismatch


@dataclass(frozen=True)
class FisheyeModel:
    """``rho(theta) = sum a_k theta^k`` followed by a center/affine stage.

    ``affine = (c, d, e)`` gives ``[[c, d], [e, 1]]`` applied to the ideal
    image-plane offset ``rho * (cos phi, sin phi)``.
    """

    poly: tuple
    center: tuple
    affine: tuple = (1.0, 0.0, 0.0)
    size: tuple = (512, 512)
    theta_max: float = np.pi / 2

    def __post_init__(self):
        object.__setattr__(self, "poly", tuple(float(a) for a in self.poly))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "affine", tuple(float(a) for a in self.affine))
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))
        if self.theta_max < np.pi / 2 - 1e-12 or self.theta_max >= np.pi:
            raise ValueError("theta_max must lie in [pi/2, pi)")
        t = np.linspace(0.0, self.theta_max, 2049)
        if np.any(self.drho(t) <= 0):
            raise ValueError("rho(theta) must be strictly increasing on [0, theta_max]")
        c, d, e = self.affine
        if abs(c - d * e) < 1e-9:
            raise ValueError("affine stage is singular")

    # polynomial pieces
    def rho(self, theta):
        return np.polynomial.polynomial.polyval(theta, self.poly)

    def drho(self, theta):
        a = np.asarray(self.poly)
        return np.polynomial.polynomial.polyval(theta, a[1:] * np.arange(1, len(a)))

    @property
    def rho_max(self):
        return float(self.rho(self.theta_max))

    @property
    def A(self):
        c, d, e = self.affine
        return np.array([[c, d], [e, 1.0]])

    def project(self, points, return_jacobian=False):
        """``(N, 3)`` camera points to ``(N, 2)`` pixels (optionally with ``(N, 2, 3)`` Jacobians)."""
        X = np.atleast_2d(np.asarray(points, dtype=float))
        x, y, z = X[:, 0], X[:, 1], X[:, 2]
        r = np.hypot(x, y)
        theta = np.arctan2(r, z)
        if np.any(np.linalg.norm(X, axis=1) == 0):
            raise OutOfFieldOfView("zero vector has no direction")
        if np.any(theta > self.theta_max + 1e-12):
            raise OutOfFieldOfView(f"incidence angle {np.degrees(theta.max()):.2f} deg beyond field of view")
        axis = r <= 1e-15 * np.maximum(np.abs(z), 1e-300)
        rs = np.where(axis, 1.0, r)
        # g = rho(theta) / r; on the optical axis use the limit a1 / z
        a1 = self.poly[1] if len(self.poly) > 1 else 0.0
        g = np.where(axis, a1 / np.where(z == 0, 1.0, z), self.rho(theta) / rs)
        m = np.stack([g * x, g * y], 1)
        m[axis] = 0.0
        uv = m @ self.A.T + np.array(self.center)
        if not return_jacobian:
            return uv
        n2 = r * r + z * z
        dth_dr = z / n2
        dth_dz = -r / n2
        dr = self.drho(theta)
        dg_dr = np.where(axis, 0.0, (dr * dth_dr * rs - self.rho(theta)) / rs**2)
        dg_dz = np.where(axis, -a1 / np.where(z == 0, 1.0, z) ** 2, dr * dth_dz / rs)
        dg = np.stack([dg_dr * x / rs, dg_dr * y / rs, dg_dz], 1)  # (N, 3)
        J = np.zeros((X.shape[0], 2, 3))
        J[:, 0, 0] = g
        J[:, 1, 1] = g
        J[:, 0] += x[:, None] * dg
        J[:, 1] += y[:, None] * dg
        return uv, np.einsum("ij,njk->nik", self.A, J)

    def radius_to_theta(self, rho_m, tol=1e-10):
        """Monotone root-find of ``rho(theta) = rho_m`` (safeguarded Newton)."""
        rho_m = np.asarray(rho_m, dtype=float)
        if np.any(rho_m > self.rho_max + 1e-9):
            raise RadiusOutOfRange(f"radius {rho_m.max():.3f} px exceeds rho(theta_max) = {self.rho_max:.3f} px")
        lo = np.zeros_like(rho_m)
        hi = np.full_like(rho_m, self.theta_max)
        th = rho_m / max(self.rho_max, 1e-300) * self.theta_max
        for _ in range(100):
            f = self.rho(th) - rho_m
            if np.all(np.abs(f) < tol):
                break
            lo = np.where(f < 0, th, lo)
            hi = np.where(f > 0, th, hi)
            step = th - f / self.drho(th)
            bad = (step <= lo) | (step >= hi) | ~np.isfinite(step)
            th = np.where(bad, 0.5 * (lo + hi), step)
        return np.clip(th, 0.0, self.theta_max)

    def unproject(self, pixels):
        """``(N, 2)`` pixels to ``(N, 3)`` unit rays."""
        P = np.atleast_2d(np.asarray(pixels, dtype=float))
        m = np.linalg.solve(self.A, (P - np.array(self.center)).T).T
        rho_m = np.hypot(m[:, 0], m[:, 1])
        theta = self.radius_to_theta(rho_m)
        phi = np.arctan2(m[:, 1], m[:, 0])
        s = np.sin(theta)
        return np.stack([s * np.cos(phi), s * np.sin(phi), np.cos(theta)], 1)

    def in_view(self, pixels):
        """Mask of pixels whose radius is inside the image circle."""
        P = np.atleast_2d(np.asarray(pixels, dtype=float))
        m = np.linalg.solve(self.A, (P - np.array(self.center)).T).T
        return np.hypot(m[:, 0], m[:, 1]) <= self.rho_max

    def to_json(self):
        return {
            "poly": list(self.poly),
            "center": list(self.center),
            "affine": list(self.affine),
            "size": list(self.size),
            "theta_max": self.theta_max,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            obj["poly"],
            obj["center"],
            obj.get("affine", (1.0, 0.0, 0.0)),
            obj.get("size", (512, 512)),
            obj.get("theta_max", np.pi / 2),
        )


def default_fisheye():
    """180 degree lens on a 512 x 512 sensor (image circle radius ~244 px)."""
    return FisheyeModel(poly=(0.0, 165.0, 0.0, -4.0), center=(255.5, 255.5), affine=(1.0, 0.0, 0.0), size=(512, 512))


def fisheye_project(model: FisheyeModel, x_cam):
    uv = model.project(np.reshape(x_cam, (-1, 3)))
    return uv[0] if np.ndim(x_cam) == 1 else uv


def fisheye_unproject(model: FisheyeModel, pixel):
    d = model.unproject(np.reshape(pixel, (-1, 2)))
    return d[0] if np.ndim(pixel) == 1 else d


def load_intrinsics(path):
    with open(path) as fh:
        return FisheyeModel.from_json(json.load(fh))


def save_intrinsics(path, model: FisheyeModel):
    with open(path, "w") as fh:
        json.dump(model.to_json(), fh)


@dataclass(frozen=True)
class PinholeModel:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def project(self, points, return_jacobian=False):
        X = np.atleast_2d(np.asarray(points, dtype=float))
        z = X[:, 2]
        if np.any(z <= 1e-9):
            raise BehindCamera(f"{int(np.sum(z <= 1e-9))} point(s) at or behind the camera plane")
        u = self.fx * X[:, 0] / z + self.cx
        v = self.fy * X[:, 1] / z + self.cy
        uv = np.stack([u, v], 1)
        if not return_jacobian:
            return uv
        J = np.zeros((X.shape[0], 2, 3))
        J[:, 0, 0] = self.fx / z
        J[:, 0, 2] = -self.fx * X[:, 0] / z**2
        J[:, 1, 1] = self.fy / z
        J[:, 1, 2] = -self.fy * X[:, 1] / z**2
        return uv, J


def pinhole_project(model: PinholeModel, x_cam):
    uv = model.project(np.reshape(x_cam, (-1, 3)))
    return uv[0] if np.ndim(x_cam) == 1 else uv


# ---------------------------------------------------------------- images
@dataclass(frozen=True)
class Image:
    """8-bit image stored as an ``(H, W, C)`` array."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim == 2:
            a = a[:, :, None]
        object.__setattr__(self, "data", np.ascontiguousarray(a, dtype=np.uint8))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    def tobytes(self):
        return self.data.tobytes()

    def as_mask(self):
        """First channel scaled to ``[0, 1]``."""
        return self.data[:, :, 0].astype(float) / 255.0


def read_png(path):
    return Image(np.array(PILImage.open(path)))


def write_png(path, image):
    a = image.data if isinstance(image, Image) else np.asarray(image, dtype=np.uint8)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    PILImage.fromarray(a).save(path, format="PNG")


def _pixels(arr):
    return arr.data if isinstance(arr, Image) else np.asarray(arr)


def panorama_sample_coords(model: FisheyeModel, r_view, out_size, pano_size):
    """Equirectangular lookup coordinates for every output pixel.

    Returns ``(u_pano, v_pano, valid)``, each ``(H, W)``; ``valid`` is False
    outside the image circle.
    """
    W, H = out_size
    Wp, Hp = pano_size
    uu, vv = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    pix = np.stack([uu.ravel(), vv.ravel()], 1)
    valid = model.in_view(pix)
    rays = np.zeros((pix.shape[0], 3))
    rays[valid] = model.unproject(pix[valid])
    d = rays @ np.asarray(r_view, dtype=float).T
    norm = np.maximum(np.linalg.norm(d, axis=1), 1e-300)
    lam = np.arctan2(d[:, 0], d[:, 2])
    phi = np.arcsin(np.clip(d[:, 1] / norm, -1.0, 1.0))
    u_p = (lam / (2 * np.pi) + 0.5) * (Wp - 1)
    v_p = (0.5 - phi / np.pi) * (Hp - 1)
    return u_p.reshape(H, W), v_p.reshape(H, W), valid.reshape(H, W)


def warp_panorama_to_fisheye(pano, model: FisheyeModel, r_view, out_size):
    """Render an equirectangular panorama as seen through the fisheye lens."""
    P = _pixels(pano)
    if P.ndim == 2:
        P = P[:, :, None]
    Hp, Wp = P.shape[:2]
    u_p, v_p, valid = panorama_sample_coords(model, r_view, out_size, (Wp, Hp))
    u0 = np.floor(u_p).astype(int)
    v0 = np.floor(v_p).astype(int)
    fu = (u_p - u0)[..., None]
    fv = (v_p - v0)[..., None]
    ua, ub = u0 % Wp, (u0 + 1) % Wp
    va, vb = np.clip(v0, 0, Hp - 1), np.clip(v0 + 1, 0, Hp - 1)
    Pf = P.astype(float)
    out = (
        Pf[va, ua] * (1 - fu) * (1 - fv)
        + Pf[va, ub] * fu * (1 - fv)
        + Pf[vb, ua] * (1 - fu) * fv
        + Pf[vb, ub] * fu * fv
    )
    out[~valid] = 0.0
    return Image(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def composite_background(bg, hand, hand_mask):
    """Keep the hand where the mask is 1, the background where it is 0."""
    B = _pixels(bg)
    F = _pixels(hand)
    if isinstance(hand_mask, Image):
        M = hand_mask.as_mask()
    else:
        M = np.asarray(hand_mask, dtype=float)
        if M.ndim == 3:
            M = M[:, :, 0]
    if B.ndim == 2:
        B = B[:, :, None]
    if F.ndim == 2:
        F = F[:, :, None]
    if B.shape != F.shape or M.shape != B.shape[:2]:
        raise SizeMismatch(f"bg {B.shape}, hand {F.shape}, mask {M.shape}")
    M = M[:, :, None]
    out = F.astype(float) * M + B.astype(float) * (1.0 - M)
    return Image(np.clip(np.rint(out), 0, 255).astype(np.uint8))
