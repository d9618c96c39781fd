"""Camera projection, stereo frustums, oriented boxes and rotated IoU.

Coordinates follow the KITTI rectified-camera convention: x right, y down,
z forward. A :class:`Box3D` is anchored at the centre of its BOTTOM face and
rotated by ``theta`` about the camera y axis; its length runs along the local
x axis and its width along the local z axis.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.spatial import ConvexHull, QhullError

INSIDE_TOL = 1e-9
CLIP_EPS = 1e-9
MIN_DEPTH = 1e-6


class GeometryError(ValueError):
    """Degenerate or invalid geometric input."""


def normalize_angle(theta: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    t = math.fmod(theta + math.pi, 2.0 * math.pi)
    if t < 0:
        t += 2.0 * math.pi
    t -= math.pi
    # fmod can land exactly on +pi after rounding
    return -math.pi if t >= math.pi else t


def rot_y(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


# --------------------------------------------------------------------------
# calibration and projection


@dataclass(frozen=True)
class CameraCalib:
    P_left: np.ndarray
    P_right: np.ndarray
    R0_rect: np.ndarray
    Tr_velo_to_cam: np.ndarray

    def __post_init__(self):
        for name, shape in (("P_left", (3, 4)), ("P_right", (3, 4)), ("R0_rect", (3, 3)), ("Tr_velo_to_cam", (3, 4))):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.shape != shape:
                raise GeometryError(f"{name} must be {shape}, got {m.shape}")
            object.__setattr__(self, name, m)
        for name in ("P_left", "P_right"):
            if np.linalg.matrix_rank(getattr(self, name)) < 3:
                raise GeometryError(f"{name} is rank deficient")

    def projection(self, view: str) -> np.ndarray:
        if view == "left":
            return self.P_left
        if view == "right":
            return self.P_right
        raise GeometryError(f"unknown view {view!r}")

    def velo_to_rect(self, points: np.ndarray) -> np.ndarray:
        """LIDAR-frame N x 3 points to rectified camera coordinates."""
        pts = np.asarray(points, dtype=np.float64)[:, :3]
        cam = pts @ self.Tr_velo_to_cam[:, :3].T + self.Tr_velo_to_cam[:, 3]
        return cam @ self.R0_rect.T

    def rect_to_velo(self, points: np.ndarray) -> np.ndarray:
        cam = np.linalg.solve(self.R0_rect, np.asarray(points, dtype=np.float64).T).T
        R, t = self.Tr_velo_to_cam[:, :3], self.Tr_velo_to_cam[:, 3]
        return np.linalg.solve(R, (cam - t).T).T


def project_rect(P: np.ndarray, points_rect: np.ndarray):
    """Project rectified-camera points with a 3x4 matrix.

    Returns ``(uv, depth, valid)``; pixels of points with depth <= 1e-6 m
    are NaN and flagged invalid.
    """
    pts = np.asarray(points_rect, dtype=np.float64).reshape(-1, 3)
    hom = pts @ P[:, :3].T + P[:, 3]
    depth = pts[:, 2].copy()
    valid = (depth > MIN_DEPTH) & (hom[:, 2] > MIN_DEPTH)
    uv = np.full((len(pts), 2), np.nan)
    uv[valid] = hom[valid, :2] / hom[valid, 2:3]
    return uv, depth, valid


def project_points(calib: CameraCalib, view: str, points: np.ndarray):
    """LIDAR points to pixels of one camera; see :func:`project_rect`."""
    return project_rect(calib.projection(view), calib.velo_to_rect(points))


def backproject(P: np.ndarray, uv: np.ndarray, depth) -> np.ndarray:
    """Rectified-camera points that project to ``uv`` at rectified depth ``depth``."""
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    depth = np.broadcast_to(np.asarray(depth, dtype=np.float64), (len(uv),))
    M, p4 = P[:, :3], P[:, 3]
    rays = np.linalg.solve(M, np.column_stack([uv, np.ones(len(uv))]).T).T
    offset = np.linalg.solve(M, p4)
    lam = (depth + offset[2]) / rays[:, 2]
    return lam[:, None] * rays - offset


# --------------------------------------------------------------------------
# half-space regions


@dataclass(frozen=True)
class Frustum:
    """Closed convex region ``normals @ p + offsets >= 0`` with 8 corners."""

    normals: np.ndarray
    offsets: np.ndarray
    corners: np.ndarray

    @property
    def planes(self) -> np.ndarray:
        return np.column_stack([self.normals, self.offsets])

    def volume(self) -> float:
        return float(ConvexHull(self.corners).volume)


@dataclass(frozen=True)
class FusedRegion:
    """Intersection of the left and right frustums of one stereo proposal."""

    normals: np.ndarray
    offsets: np.ndarray
    vertices: np.ndarray

    @property
    def empty(self) -> bool:
        return len(self.vertices) == 0

    @property
    def planes(self) -> np.ndarray:
        return np.column_stack([self.normals, self.offsets])

    def volume(self) -> float:
        if self.empty:
            return 0.0
        try:
            return float(ConvexHull(self.vertices).volume)
        except QhullError:
            return 0.0


Region = Union[Frustum, FusedRegion]


def _plane(n, d):
    n = np.asarray(n, dtype=np.float64)
    norm = np.linalg.norm(n)
    return n / norm, d / norm


def frustum_from_box2d(calib: CameraCalib, view: str, box2d, depth_range) -> Frustum:
    u0, v0, u1, v1 = (float(v) for v in box2d)
    z0, z1 = (float(v) for v in depth_range)
    if not (u0 < u1 and v0 < v1):
        raise GeometryError(f"degenerate 2D box {box2d}")
    if not 0 < z0 < z1:
        raise GeometryError(f"invalid depth range {depth_range}")
    P = calib.projection(view)
    r1, r2, r3 = P[0], P[1], P[2]
    # u >= u0  <=>  (r1 - u0 r3) . X~ >= 0, valid while r3 . X~ > 0
    raw = [r1 - u0 * r3, u1 * r3 - r1, r2 - v0 * r3, v1 * r3 - r2]
    planes = [_plane(r[:3], r[3]) for r in raw]
    planes.append(((0.0, 0.0, 1.0), -z0))
    planes.append(((0.0, 0.0, -1.0), z1))
    normals = np.array([p[0] for p in planes], dtype=np.float64)
    offsets = np.array([p[1] for p in planes], dtype=np.float64)
    pix = np.array([[u0, v0], [u1, v0], [u1, v1], [u0, v1]])
    corners = np.vstack([backproject(P, pix, z0), backproject(P, pix, z1)])
    return Frustum(normals, offsets, corners)


def _dedupe_planes(normals, offsets, tol=1e-12):
    keep_n, keep_d = [], []
    for n, d in zip(normals, offsets):
        if any(np.all(np.abs(n - kn) <= tol) and abs(d - kd) <= tol for kn, kd in zip(keep_n, keep_d)):
            continue
        keep_n.append(n)
        keep_d.append(d)
    return np.array(keep_n), np.array(keep_d)


def polytope_vertices(normals: np.ndarray, offsets: np.ndarray, tol: float = 1e-7) -> np.ndarray:
    """Vertices of a bounded polytope by enumerating plane triples."""
    verts = []
    for i, j, k in itertools.combinations(range(len(normals)), 3):
        A = normals[[i, j, k]]
        if abs(np.linalg.det(A)) < 1e-12:
            continue
        p = np.linalg.solve(A, -offsets[[i, j, k]])
        if np.all(normals @ p + offsets >= -tol):
            verts.append(p)
    if not verts:
        return np.zeros((0, 3))
    verts = np.array(verts)
    # merge coincident vertices where more than three planes meet
    uniq = [verts[0]]
    for v in verts[1:]:
        if min(np.linalg.norm(v - u) for u in uniq) > 1e-9:
            uniq.append(v)
    return np.array(uniq)


def intersect_frustums(left: Region, right: Region) -> FusedRegion:
    normals = np.vstack([left.normals, right.normals])
    offsets = np.concatenate([left.offsets, right.offsets])
    normals, offsets = _dedupe_planes(normals, offsets)
    verts = polytope_vertices(normals, offsets)
    if len(verts) < 4:
        verts = np.zeros((0, 3))
    else:
        try:
            ConvexHull(verts)
        except QhullError:
            # flat or degenerate: no interior
            verts = np.zeros((0, 3))
    return FusedRegion(normals, offsets, verts)


def points_in_region(points: np.ndarray, region: Region) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)[:, :3]
    if isinstance(region, FusedRegion) and region.empty:
        return np.zeros(len(pts), dtype=bool)
    return np.all(pts @ region.normals.T + region.offsets >= -INSIDE_TOL, axis=1)


# --------------------------------------------------------------------------
# oriented boxes


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    w: float
    h: float
    l: float
    theta: float

    def __post_init__(self):
        vals = [self.x, self.y, self.z, self.w, self.h, self.l, self.theta]
        if not all(math.isfinite(float(v)) for v in vals):
            raise GeometryError(f"non-finite box parameters {vals}")
        if min(self.w, self.h, self.l) <= 0:
            raise GeometryError(f"box dimensions must be positive, got w={self.w} h={self.h} l={self.l}")
        for name in ("x", "y", "z", "w", "h", "l"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    @property
    def bottom_center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def center(self) -> np.ndarray:
        """Volumetric centre."""
        return np.array([self.x, self.y - self.h / 2.0, self.z])

    @property
    def volume(self) -> float:
        return self.w * self.h * self.l

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w, self.h, self.l, self.theta])

    @classmethod
    def from_array(cls, a) -> Box3D:
        return cls(*(float(v) for v in a))


# local (x, z) footprint, counter-clockwise seen from above (-y)
_FOOTPRINT = np.array([[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]])


def box_corners(box: Box3D) -> np.ndarray:
    """8 x 3 corners: bottom face then top face, same footprint order.

    The footprint starts at local (+l/2, +w/2) and runs counter-clockwise
    seen from above.
    """
    fx = _FOOTPRINT[:, 0] * box.l
    fz = _FOOTPRINT[:, 1] * box.w
    local = np.zeros((8, 3))
    local[:, 0] = np.tile(fx, 2)
    local[:, 2] = np.tile(fz, 2)
    local[4:, 1] = -box.h
    return local @ rot_y(box.theta).T + box.bottom_center


def bev_corners(box: Box3D) -> np.ndarray:
    """4 x 2 footprint in the (x, z) plane, counter-clockwise seen from above."""
    return box_corners(box)[:4, [0, 2]]


def to_box_frame(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Points expressed relative to the bottom centre, un-rotated by theta."""
    pts = np.asarray(points, dtype=np.float64)[:, :3]
    return (pts - box.bottom_center) @ rot_y(box.theta)


def points_in_box3d(points: np.ndarray, box: Box3D, tol: float = INSIDE_TOL) -> np.ndarray:
    local = to_box_frame(points, box)
    return (
        (np.abs(local[:, 0]) <= box.l / 2.0 + tol)
        & (np.abs(local[:, 2]) <= box.w / 2.0 + tol)
        & (local[:, 1] <= tol)
        & (local[:, 1] >= -box.h - tol)
    )


def resize_box(box: Box3D, xi: float) -> Box3D:
    """Grow (or shrink, for negative ``xi``) w, h and l by ``xi`` metres."""
    w, h, l = box.w + xi, box.h + xi, box.l + xi
    if min(w, h, l) <= 0:
        raise GeometryError(f"resizing by {xi} gives non-positive dimensions ({w:.3g}, {h:.3g}, {l:.3g})")
    return Box3D(box.x, box.y, box.z, w, h, l, box.theta)


# --------------------------------------------------------------------------
# rotated IoU


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _signed_area(poly):
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject: np.ndarray, clip: np.ndarray, eps: float = CLIP_EPS) -> np.ndarray:
    """Sutherland-Hodgman clipping of convex ``subject`` by convex ``clip``."""
    if _signed_area(clip) < 0:
        clip = clip[::-1]
    out = [np.asarray(p, dtype=np.float64) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        inp, out = out, []
        for j in range(len(inp)):
            cur, prev = inp[j], inp[j - 1]
            sc, sp = side(cur), side(prev)
            if sc >= -eps:
                if sp < -eps:
                    out.append(prev + (cur - prev) * (sp / (sp - sc)))
                out.append(cur)
            elif sp >= -eps:
                out.append(prev + (cur - prev) * (sp / (sp - sc)))
    return np.array(out).reshape(-1, 2)


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    pa, pb = bev_corners(a), bev_corners(b)
    area = polygon_area(clip_convex(pa, pb))
    return min(area, a.l * a.w, b.l * b.w)


def iou_bev(a: Box3D, b: Box3D) -> float:
    inter = bev_intersection_area(a, b)
    union = a.l * a.w + b.l * b.w - inter
    return float(min(max(inter / union, 0.0), 1.0))


def vertical_overlap(a: Box3D, b: Box3D) -> float:
    top = max(a.y - a.h, b.y - b.h)
    bottom = min(a.y, b.y)
    return max(0.0, bottom - top)


def iou_3d(a: Box3D, b: Box3D) -> float:
    dy = vertical_overlap(a, b)
    if dy <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * dy
    union = a.volume + b.volume - inter
    return float(min(max(inter / union, 0.0), 1.0))


# --------------------------------------------------------------------------
# box fitting


def fit_box(points: np.ndarray, min_dim: float = 0.05) -> Box3D:
    """Minimum-area yaw-aligned box around ``points`` (rectified camera frame).

    The footprint rectangle comes from rotating calipers over the BEV hull;
    the longer side is taken as the length. Height spans the vertical extent.
    """
    pts = np.asarray(points, dtype=np.float64)[:, :3]
    if len(pts) == 0:
        raise GeometryError("cannot fit a box to zero points")
    bev = pts[:, [0, 2]]
    try:
        hull = bev[ConvexHull(bev).vertices]
    except (QhullError, ValueError):
        hull = bev
    best = None
    for i in range(len(hull)):
        e = hull[(i + 1) % len(hull)] - hull[i]
        norm = math.hypot(e[0], e[1])
        if norm < 1e-12:
            continue
        u = e / norm
        v = np.array([-u[1], u[0]])
        pu, pv = hull @ u, hull @ v
        area = (pu.max() - pu.min()) * (pv.max() - pv.min())
        if best is None or area < best[0] - 1e-12:
            best = (area, u, v, pu.min(), pu.max(), pv.min(), pv.max())
    if best is None:
        u, v = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        pu, pv = bev @ u, bev @ v
        best = (0.0, u, v, pu.min(), pu.max(), pv.min(), pv.max())
    _, u, v, u0, u1, v0, v1 = best
    su, sv = u1 - u0, v1 - v0
    if sv > su:
        u, v, u0, u1, v0, v1, su, sv = v, -u, v0, v1, -u1, -u0, sv, su
    cx, cz = (u0 + u1) / 2.0 * u + (v0 + v1) / 2.0 * v
    # local x axis maps to (cos t, -sin t) in (x, z)
    theta = math.atan2(-u[1], u[0])
    y_top, y_bottom = pts[:, 1].min(), pts[:, 1].max()
    return Box3D(cx, y_bottom, cz, max(sv, min_dim), max(y_bottom - y_top, min_dim), max(su, min_dim), theta)
