"""Orthographic splat renderer for pressure and depth over the sensor plane.

Vertices are projected onto the plane, and each one deposits into its four
neighbouring cells with bilinear weights. Grid row 0 of every returned map
is at the +v edge of the plane (the vertical flip of the sensor
convention), so maps compare directly with sensor frames.

Gradients are closed form; see :class:`Splat`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .errors import ShapeMismatch

SENSOR_GRID = (105, 185)  # rows, cols
SENSOR_PITCH = 0.00125


@dataclass(frozen=True)
class OrthoCamera:
    """Plane frame ``(origin, u_axis, v_axis)``; heights are measured along ``u x v``.

    ``offset`` is added to rendered depth, i.e. the virtual camera sits that
    far below the plane.
    """

    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    u_axis: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    v_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    grid: tuple = SENSOR_GRID
    pitch: float = SENSOR_PITCH
    offset: float = 0.0

    def __post_init__(self):
        u = np.array(self.u_axis, dtype=float)
        v = np.array(self.v_axis, dtype=float)
        if abs(np.linalg.norm(u) - 1) > 1e-9 or abs(np.linalg.norm(v) - 1) > 1e-9 or abs(u @ v) > 1e-9:
            raise ValueError("plane axes must be orthonormal")
        H, W = (int(g) for g in self.grid)
        if H < 1 or W < 1 or self.pitch <= 0:
            raise ValueError("grid must be at least 1x1 with positive pitch")
        object.__setattr__(self, "origin", np.array(self.origin, dtype=float))
        object.__setattr__(self, "u_axis", u)
        object.__setattr__(self, "v_axis", v)
        object.__setattr__(self, "grid", (H, W))

    @property
    def normal(self):
        return np.cross(self.u_axis, self.v_axis)

    def grid_coords(self, points):
        """Fractional (col, row) before the flip, and height above the plane."""
        d = np.asarray(points, dtype=float) - self.origin
        H, W = self.grid
        col = d @ self.u_axis / self.pitch + (W - 1) / 2
        row = d @ self.v_axis / self.pitch + (H - 1) / 2
        return col, row, d @ self.normal

    def cell_center(self, row, col):
        """World point of the (flipped) output cell ``(row, col)``."""
        H, W = self.grid
        raw_row = H - 1 - row
        return (
            self.origin
            + (col - (W - 1) / 2) * self.pitch * self.u_axis
            + (raw_row - (H - 1) / 2) * self.pitch * self.v_axis
        )


def flip_vertical(grid):
    return np.asarray(grid)[::-1].copy()


def _points(mesh_or_points):
    v = getattr(mesh_or_points, "vertices", mesh_or_points)
    return np.atleast_2d(np.asarray(v, dtype=float))


class GridSplat:
    """Bilinear deposit of values at fractional ``(col, row)`` grid coordinates.

    Corners falling outside the grid are dropped. With ``flip`` the output row
    order is reversed (row 0 of the result is raw row ``H - 1``).
    """

    def __init__(self, col, row, shape, flip=False):
        H, W = shape
        self.shape = (H, W)
        col = np.asarray(col, dtype=float)
        row = np.asarray(row, dtype=float)
        self.n = col.shape[0]
        c0 = np.floor(col)
        r0 = np.floor(row)
        fc = (col - c0)[:, None]
        fr = (row - r0)[:, None]
        dc = np.array([0, 1, 0, 1])
        dr = np.array([0, 0, 1, 1])
        cc = c0.astype(np.int64)[:, None] + dc
        rr = r0.astype(np.int64)[:, None] + dr
        wc = np.where(dc == 1, fc, 1 - fc)
        wr = np.where(dr == 1, fr, 1 - fr)
        valid = (cc >= 0) & (cc < W) & (rr >= 0) & (rr < H)
        self.valid = valid
        self.w = np.where(valid, wc * wr, 0.0)
        self.dw_dcol = np.where(valid, np.where(dc == 1, 1.0, -1.0) * wr, 0.0)
        self.dw_drow = np.where(valid, np.where(dr == 1, 1.0, -1.0) * wc, 0.0)
        out_row = H - 1 - rr if flip else rr
        self.idx = np.where(valid, out_row * W + cc, 0)

    def splat(self, values):
        values = np.asarray(values, dtype=float).reshape(self.n)
        H, W = self.shape
        out = np.bincount(self.idx.ravel(), weights=(self.w * values[:, None]).ravel(), minlength=H * W)
        return out.reshape(H, W)

    def splat_vjp(self, values, G):
        """Return ``(g_values, g_col, g_row)`` for upstream gradient ``G``."""
        values = np.asarray(values, dtype=float).reshape(self.n)
        g = np.asarray(G, dtype=float).ravel()[self.idx]
        g_values = np.sum(self.w * g, axis=1)
        g_col = values * np.sum(self.dw_dcol * g, axis=1)
        g_row = values * np.sum(self.dw_drow * g, axis=1)
        return g_values, g_col, g_row


class Splat(GridSplat):
    """Splat of world points onto an :class:`OrthoCamera`, with pressure and depth VJPs."""

    def __init__(self, cam: OrthoCamera, points):
        self.cam = cam
        col, row, height = cam.grid_coords(_points(points))
        self.height = height
        super().__init__(col, row, cam.grid, flip=True)

    # -------------------------------------------------- pressure
    def pressure(self, pv):
        return self.splat(pv)

    def pressure_vjp(self, pv, G):
        """Return ``(g_pv, g_points)`` for upstream gradient ``G`` on the pressure map."""
        g_pv, g_col, g_row = self.splat_vjp(pv, G)
        return g_pv, self._to_points(g_col, g_row, None)

    def _to_points(self, g_col, g_row, g_h):
        cam = self.cam
        out = (g_col[:, None] * cam.u_axis + g_row[:, None] * cam.v_axis) / cam.pitch
        if g_h is not None:
            out = out + g_h[:, None] * cam.normal
        return out

    # -------------------------------------------------- depth
    def depth(self, kappa=1e-3):
        """Weighted soft-min of heights per cell; ``+inf`` where nothing lands.

        Returns ``(depth, mask)``.
        """
        H, W = self.cam.grid
        idx = self.idx.ravel()
        w = self.w.ravel()
        h = np.repeat(self.height, 4)
        live = w > 0
        wsum = np.bincount(idx[live], weights=w[live], minlength=H * W)
        shift = np.full(H * W, np.inf)
        np.minimum.at(shift, idx[live], h[live])
        e = np.zeros_like(w)
        e[live] = np.exp(-(h[live] - shift[idx[live]]) / kappa)
        s = np.bincount(idx[live], weights=(w * e)[live], minlength=H * W)
        covered = wsum > 0
        D = np.full(H * W, np.inf)
        D[covered] = shift[covered] - kappa * np.log(s[covered] / wsum[covered]) + self.cam.offset
        self._depth_cache = (kappa, e.reshape(self.w.shape), s, wsum, covered)
        return D.reshape(H, W), covered.reshape(H, W)

    def depth_vjp(self, G):
        """Gradient w.r.t. points for upstream ``G`` on covered depth cells (call :meth:`depth` first)."""
        kappa, e, s, wsum, covered = self._depth_cache
        g = np.where(covered, np.asarray(G, dtype=float).ravel(), 0.0)
        gi = g[self.idx]
        si = np.where(self.valid, s[self.idx], 1.0)
        wi = np.where(self.valid, wsum[self.idx], 1.0)
        si = np.where(si > 0, si, 1.0)
        wi = np.where(wi > 0, wi, 1.0)
        g_h = np.sum(gi * self.w * e / si, axis=1)
        dD_dw = -kappa * (e / si - 1.0 / wi)
        g_w = gi * dD_dw
        g_col = np.sum(g_w * self.dw_dcol, axis=1)
        g_row = np.sum(g_w * self.dw_drow, axis=1)
        return self._to_points(g_col, g_row, g_h)


def render_pressure(mesh_world, pv, cam: OrthoCamera):
    return Splat(cam, mesh_world).pressure(pv)


def render_depth(mesh_world, cam: OrthoCamera, kappa=1e-3):
    """Soft-min depth map and the covered-cell mask."""
    return Splat(cam, mesh_world).depth(kappa)


@dataclass(frozen=True)
class ContactParams:
    delta: float = 0.1
    epsilon: float = 0.002
    tau: float = 0.001
    gamma: float = 5.0  # grams; ground-truth contact threshold
    kappa: float = 1e-3


def contact_logits(depth, delta, epsilon, tau):
    return (epsilon - (np.asarray(depth, dtype=float) - delta)) / tau


def soft_contact(depth, delta=0.1, epsilon=0.002, tau=0.001):
    """``sigmoid((epsilon - (depth - delta)) / tau)``; 0 on uncovered cells."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    with np.errstate(over="ignore"):
        return expit(contact_logits(depth, delta, epsilon, tau))


def soft_contact_vjp(depth, G, delta=0.1, epsilon=0.002, tau=0.001):
    c = soft_contact(depth, delta, epsilon, tau)
    g = np.asarray(G) * c * (1.0 - c) * (-1.0 / tau)
    return np.where(np.isfinite(depth), g, 0.0)


class RenderLosses(NamedTuple):
    total: float
    press: float
    hand: float


def _softplus(z):
    return np.logaddexp(0.0, z)


def _check_shapes(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ShapeMismatch(f"map shapes differ: {sorted(shapes)}")


def render_losses(pred_p, pred_d, p_gt, gamma=5.0, delta=0.1, epsilon=0.002, tau=0.001, weights=(1.0, 0.1)):
    """Pixel MSE on pressure plus masked BCE-with-logits on contact.

    The hand term averages over the covered cells of ``pred_d`` and is 0
    when nothing is covered.
    """
    _check_shapes(pred_p, pred_d, p_gt)
    pred_p = np.asarray(pred_p, dtype=float)
    p_gt = np.asarray(p_gt, dtype=float)
    pred_d = np.asarray(pred_d, dtype=float)
    l_press = float(np.mean((pred_p - p_gt) ** 2))
    mask = np.isfinite(pred_d)
    n = int(mask.sum())
    if n:
        z = contact_logits(pred_d[mask], delta, epsilon, tau)
        t = (p_gt[mask] > gamma).astype(float)
        l_hand = float(np.sum(_softplus(z) - t * z) / n)
    else:
        l_hand = 0.0
    w_press, w_hand = weights
    return RenderLosses(w_press * l_press + w_hand * l_hand, l_press, l_hand)


def render_losses_grad(pred_p, pred_d, p_gt, gamma=5.0, delta=0.1, epsilon=0.002, tau=0.001, weights=(1.0, 0.1)):
    """Gradient of ``render_losses(...).total`` w.r.t. ``(pred_p, pred_d)``.

    The covered mask is piecewise constant and treated as fixed.
    """
    _check_shapes(pred_p, pred_d, p_gt)
    pred_p = np.asarray(pred_p, dtype=float)
    p_gt = np.asarray(p_gt, dtype=float)
    pred_d = np.asarray(pred_d, dtype=float)
    w_press, w_hand = weights
    g_p = w_press * 2.0 * (pred_p - p_gt) / pred_p.size
    g_d = np.zeros_like(pred_d)
    mask = np.isfinite(pred_d)
    n = int(mask.sum())
    if n:
        z = contact_logits(pred_d[mask], delta, epsilon, tau)
        t = (p_gt[mask] > gamma).astype(float)
        g_d[mask] = w_hand * (expit(z) - t) * (-1.0 / tau) / n
    return g_p, g_d


# ---------------------------------------------------------------- files
@dataclass(frozen=True)
class PressureMap:
    grid: np.ndarray
    pitch: float = SENSOR_PITCH

    def __post_init__(self):
        g = np.array(self.grid, dtype=float)
        if g.ndim != 2 or not np.all(np.isfinite(g)) or np.any(g < 0):
            raise ValueError("pressure map must be a finite, non-negative 2-D grid")
        object.__setattr__(self, "grid", g)


def save_pmap(path, grid, pitch=SENSOR_PITCH):
    g = np.asarray(grid, dtype=float)
    H, W = g.shape
    lines = [f"PMAP v1 {H} {W} {pitch * 1000:.6g}"]
    lines += [" ".join(f"{x:.17g}" for x in row) for row in g]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_pmap(path):
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 5 or header[:2] != ["PMAP", "v1"]:
            raise ValueError(f"{path}: not a PMAP v1 file")
        H, W, pitch_mm = int(header[2]), int(header[3]), float(header[4])
        rows = [line.split() for line in fh if line.strip()]
    g = np.array(rows, dtype=float)
    if g.shape != (H, W):
        raise ValueError(f"{path}: header says {H}x{W}, body is {g.shape}")
    return PressureMap(g, pitch_mm / 1000.0)
