"""Box regression targets relative to a proposal box.

Four parameterizations are supported. All positions are expressed in the
proposal's yaw frame (bottom centre at the origin, un-rotated by the
proposal's theta). Horizontal offsets are divided by the proposal's BEV
diagonal ``sqrt(l**2 + w**2)`` and vertical offsets by the proposal height,
so encodings are invariant to joint translation and to joint scaling.
Orientation is always carried separately as ``(cos theta, sin theta)``.

Per point the stored triple is ``(dx, dy, dz)`` in camera axes: ``dx`` runs
along the proposal's length axis, ``dz`` along its width axis and ``dy`` is
vertical (positive down).

=================  ===  ====================================================
scheme             dim  values
=================  ===  ====================================================
AXIS_ALIGNED         6  centre offset (3), dl, dw, dh
CORNERS8            24  offsets of all 8 corners
CORNERS4_HEIGHTS2   10  bottom-corner BEV offsets (4 x 2), bottom/top offsets
POINTS3_HEIGHTS2    11  c1, c2, c3 offsets (3 x 3), bottom/top offsets
=================  ===  ====================================================

For ``POINTS3_HEIGHTS2`` the three points lie on one space diagonal of the
box: ``c1`` is bottom corner 0, ``c3`` is the opposite top corner 6 and
``c2`` is the volumetric centre, so ``c2`` is the midpoint of ``c1`` and
``c3`` for every box.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box3D, GeometryError, box_corners, rot_y


class CodecError(ValueError):
    pass


class BoxEncodingScheme(enum.Enum):
    AXIS_ALIGNED = ("axis_aligned", 6)
    CORNERS8 = ("corners8", 24)
    CORNERS4_HEIGHTS2 = ("corners4_heights2", 10)
    POINTS3_HEIGHTS2 = ("points3_heights2", 11)

    @property
    def key(self) -> str:
        return self.value[0]

    @property
    def dim(self) -> int:
        return self.value[1]

    @property
    def label(self) -> str:
        return _LABELS[self.key]

    @classmethod
    def parse(cls, name: str) -> BoxEncodingScheme:
        norm = name.strip().lower().replace("-", "_").replace("+", "_")
        aliases = {"axis": "axis_aligned", "8corners": "corners8", "4corners_2heights": "corners4_heights2",
                   "3points_2heights": "points3_heights2"}
        norm = aliases.get(norm, norm)
        for s in cls:
            if s.key == norm or s.name.lower() == norm:
                return s
        raise CodecError(f"unknown encoding scheme {name!r}")


_LABELS = {"axis_aligned": "Axis", "corners8": "8 Corners", "corners4_heights2": "4 Corners+2 Heights",
           "points3_heights2": "3 Points+2 Heights"}


@dataclass(frozen=True)
class EncodedBox:
    scheme: BoxEncodingScheme
    values: np.ndarray
    orientation: tuple[float, float]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.size != self.scheme.dim:
            raise CodecError(f"{self.scheme.key} expects {self.scheme.dim} values, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise CodecError("encoded values must be finite")
        object.__setattr__(self, "values", v)


def encode_orientation(theta: float) -> tuple[float, float]:
    return (math.cos(theta), math.sin(theta))


def decode_orientation(pair) -> float:
    c, s = float(pair[0]), float(pair[1])
    norm = math.hypot(c, s)
    if norm <= 1e-6:
        raise CodecError(f"orientation pair {pair} is too close to zero to decode")
    return math.atan2(s / norm, c / norm)


def _check_proposal(p: Box3D) -> None:
    if min(p.w, p.h, p.l) <= 0:
        raise CodecError("degenerate proposal")


def _scales(p: Box3D) -> np.ndarray:
    d = math.hypot(p.l, p.w)
    return np.array([d, p.h, d])


def _to_local(points, p: Box3D) -> np.ndarray:
    return (np.atleast_2d(points) - p.bottom_center) @ rot_y(p.theta)


def _from_local(local, p: Box3D) -> np.ndarray:
    return np.atleast_2d(local) @ rot_y(p.theta).T + p.bottom_center


def _key_points(box: Box3D, scheme: BoxEncodingScheme) -> np.ndarray:
    corners = box_corners(box)
    if scheme is BoxEncodingScheme.CORNERS8:
        return corners
    if scheme is BoxEncodingScheme.CORNERS4_HEIGHTS2:
        return corners[:4]
    if scheme is BoxEncodingScheme.POINTS3_HEIGHTS2:
        return np.vstack([corners[0], box.center, corners[6]])
    return box.center[None, :]


def _height_offsets(gt: Box3D, p: Box3D) -> np.ndarray:
    # elevation (up-positive) of the gt bottom/top faces relative to the
    # proposal's bottom/top faces, in proposal heights
    return np.array([(p.y - gt.y) / p.h, ((p.y - p.h) - (gt.y - gt.h)) / p.h])


def encode(gt: Box3D, proposal: Box3D, scheme: BoxEncodingScheme) -> EncodedBox:
    _check_proposal(proposal)
    scales = _scales(proposal)
    diff = (_to_local(_key_points(gt, scheme), proposal) - _to_local(_key_points(proposal, scheme), proposal)) / scales
    if scheme is BoxEncodingScheme.AXIS_ALIGNED:
        d = scales[0]
        values = np.concatenate([diff[0], [(gt.l - proposal.l) / d, (gt.w - proposal.w) / d, (gt.h - proposal.h) / proposal.h]])
    elif scheme is BoxEncodingScheme.CORNERS8:
        values = diff.reshape(-1)
    elif scheme is BoxEncodingScheme.CORNERS4_HEIGHTS2:
        values = np.concatenate([diff[:, [0, 2]].reshape(-1), _height_offsets(gt, proposal)])
    else:
        values = np.concatenate([diff.reshape(-1), _height_offsets(gt, proposal)])
    return EncodedBox(scheme, values, encode_orientation(gt.theta))


def _footprint_dims(bottom: np.ndarray) -> tuple[float, float]:
    """Mean length and width of a 4-corner footprint in local (x, z)."""
    length = (np.linalg.norm(bottom[0] - bottom[1]) + np.linalg.norm(bottom[3] - bottom[2])) / 2.0
    width = (np.linalg.norm(bottom[0] - bottom[3]) + np.linalg.norm(bottom[1] - bottom[2])) / 2.0
    return float(length), float(width)


def decode(enc: EncodedBox, proposal: Box3D) -> Box3D:
    """Invert :func:`encode`; redundant size estimates are averaged."""
    _check_proposal(proposal)
    scheme = enc.scheme
    v = enc.values
    if v.size != scheme.dim:
        raise CodecError(f"{scheme.key} expects {scheme.dim} values, got {v.size}")
    theta = decode_orientation(enc.orientation)
    scales = _scales(proposal)
    d = scales[0]
    prop_pts = _to_local(_key_points(proposal, scheme), proposal)
    # gt yaw relative to the proposal frame
    rel = rot_y(theta - proposal.theta)

    if scheme is BoxEncodingScheme.AXIS_ALIGNED:
        centre = prop_pts[0] + v[:3] * scales
        l, w, h = proposal.l + v[3] * d, proposal.w + v[4] * d, proposal.h + v[5] * proposal.h
        bottom = centre + np.array([0.0, h / 2.0, 0.0])
    elif scheme is BoxEncodingScheme.CORNERS8:
        pts = prop_pts + v.reshape(8, 3) * scales
        l_b, w_b = _footprint_dims(pts[:4, [0, 2]])
        l_t, w_t = _footprint_dims(pts[4:, [0, 2]])
        l, w = (l_b + l_t) / 2.0, (w_b + w_t) / 2.0
        y_bottom, y_top = pts[:4, 1].mean(), pts[4:, 1].mean()
        h = y_bottom - y_top
        bottom = np.array([pts[:, 0].mean(), y_bottom, pts[:, 2].mean()])
    elif scheme is BoxEncodingScheme.CORNERS4_HEIGHTS2:
        bev = prop_pts[:, [0, 2]] + v[:8].reshape(4, 2) * scales[[0, 2]]
        l, w = _footprint_dims(bev)
        y_bottom = -v[8] * proposal.h
        y_top = -proposal.h - v[9] * proposal.h
        h = y_bottom - y_top
        cx, cz = bev.mean(axis=0)
        bottom = np.array([cx, y_bottom, cz])
    else:
        pts = prop_pts + v[:9].reshape(3, 3) * scales
        c1, c2, c3 = pts
        # c1 -> c3 spans (-l, -h, -w) in the gt's own frame
        diag = (c3 - c1) @ rel
        half1 = (c2 - c1) @ rel
        half2 = (c3 - c2) @ rel
        l = (abs(diag[0]) + 2 * abs(half1[0]) + 2 * abs(half2[0])) / 3.0
        w = (abs(diag[2]) + 2 * abs(half1[2]) + 2 * abs(half2[2])) / 3.0
        h_pts = (abs(diag[1]) + 2 * abs(half1[1]) + 2 * abs(half2[1])) / 3.0
        h_off = proposal.h * (1.0 - v[9] + v[10])
        h = (h_pts + h_off) / 2.0
        centre = (c2 + (c1 + c3) / 2.0) / 2.0
        y_bottom = ((centre[1] + h / 2.0) + (-v[9] * proposal.h)) / 2.0
        bottom = np.array([centre[0], y_bottom, centre[2]])

    world = _from_local(bottom, proposal)[0]
    try:
        return Box3D(world[0], world[1], world[2], w, h, l, theta)
    except GeometryError as exc:
        raise CodecError(f"decoded box is invalid: {exc}") from exc


def constraint_residuals(enc: EncodedBox) -> dict[str, np.ndarray]:
    """Disagreement between redundant size cues of a 3-point/2-height encoding.

    Groups: ``length`` and ``width`` compare the c1-c3 span with the two
    half spans through c2 (and the half spans with each other); ``height``
    compares the c1-c3 vertical span with the bottom/top offset span;
    ``half_height`` compares each half span with half that offset span.
    Exact encodings give zeros.
    """
    if enc.scheme is not BoxEncodingScheme.POINTS3_HEIGHTS2:
        raise CodecError(f"constraint residuals need points3_heights2, got {enc.scheme.key}")
    v = enc.values
    c1, c2, c3 = v[:3], v[3:6], v[6:9]
    dh = abs(v[10] - v[9])

    def span_group(axis):
        a, b, full = abs(c2[axis] - c1[axis]), abs(c3[axis] - c2[axis]), abs(c3[axis] - c1[axis])
        return np.array([abs(full - (a + b)), abs(a - b)])

    return {
        "length": span_group(0),
        "width": span_group(2),
        "height": np.array([abs(abs(c3[1] - c1[1]) - dh)]),
        "half_height": np.array([abs(abs(c2[1] - c1[1]) - dh / 2.0), abs(abs(c3[1] - c2[1]) - dh / 2.0)]),
    }
