"""Reproducible synthetic scenes standing in for KITTI frames.

A scene holds one car-sized box resting on the ground, points drawn
uniformly inside it, clutter drawn uniformly in a larger surrounding volume,
and a stereo proposal made by projecting the box corners into both cameras.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Box3D, CameraCalib, box_corners, points_in_box3d, project_rect, rot_y, to_box_frame
from .kitti_io import (LabelRecord, SceneSample, StereoProposal, write_calib, write_labels, write_proposals,
                       write_velodyne_bin)

CAMERA_HEIGHT = 1.65
CLUTTER_MARGIN = 1.5
CLUTTER_HEADROOM = 1.0
CLEARANCE = 0.3
CLUTTER_RATIO = 0.3


def kitti_like_calib() -> CameraCalib:
    f, cu, cv = 721.5377, 609.5593, 172.854
    baseline = 0.54
    P2 = np.array([[f, 0.0, cu, 0.06 * f], [0.0, f, cv, 0.0], [0.0, 0.0, 1.0, 0.0]])
    P3 = np.array([[f, 0.0, cu, (0.06 - baseline) * f], [0.0, f, cv, 0.0], [0.0, 0.0, 1.0, 0.0]])
    # velodyne x forward, y left, z up -> camera x right, y down, z forward
    Tr = np.array([[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, -0.08], [1.0, 0.0, 0.0, -0.27]])
    return CameraCalib(P2, P3, np.eye(3), Tr)


@dataclass
class SyntheticScene:
    frame: str
    points: np.ndarray  # N x 4, LIDAR frame
    points_rect: np.ndarray  # N x 3, rectified camera frame
    boxes: list[Box3D]
    labels: np.ndarray  # N, 1 = object
    proposals: list[StereoProposal]
    calib: CameraCalib
    records: list[LabelRecord]

    def to_sample(self) -> SceneSample:
        return SceneSample(self.frame, self.points, self.calib, list(self.proposals), list(self.records))


def box2d_from_corners(P: np.ndarray, corners: np.ndarray) -> tuple[float, float, float, float]:
    uv, _, valid = project_rect(P, corners)
    if not np.all(valid):
        raise ValueError("box corners behind the camera")
    return (float(uv[:, 0].min()), float(uv[:, 1].min()), float(uv[:, 0].max()), float(uv[:, 1].max()))


def _jitter(box, jitter_px: float, rng) -> tuple[float, float, float, float]:
    if jitter_px <= 0:
        return box
    d = rng.uniform(-jitter_px, jitter_px, size=4)
    u0, v0, u1, v1 = (b + e for b, e in zip(box, d))
    # keep the box non-degenerate
    if u1 - u0 < 2.0:
        u0, u1 = (u0 + u1) / 2 - 1.0, (u0 + u1) / 2 + 1.0
    if v1 - v0 < 2.0:
        v0, v1 = (v0 + v1) / 2 - 1.0, (v0 + v1) / 2 + 1.0
    return (float(u0), float(v0), float(u1), float(v1))


def stereo_proposal(frame: str, calib: CameraCalib, box: Box3D, jitter_px: float, depth_margin: float, rng,
                    score: float = 1.0, padding: float = 0.0) -> StereoProposal:
    """2D boxes of the (optionally padded) box in both views plus its depth range."""
    if padding:
        box = Box3D(box.x, box.y, box.z, box.w + padding, box.h + padding, box.l + padding, box.theta)
    corners = box_corners(box)
    left = _jitter(box2d_from_corners(calib.P_left, corners), jitter_px, rng)
    right = _jitter(box2d_from_corners(calib.P_right, corners), jitter_px, rng)
    z_near = max(float(corners[:, 2].min()) - depth_margin, 0.5)
    z_far = float(corners[:, 2].max()) + depth_margin
    return StereoProposal(frame, left, right, z_near, z_far, score)


def random_box(rng) -> Box3D:
    l, w, h = rng.uniform(3.4, 4.4), rng.uniform(1.5, 1.8), rng.uniform(1.4, 1.7)
    x, z = rng.uniform(-6.0, 6.0), rng.uniform(12.0, 35.0)
    return Box3D(x, CAMERA_HEIGHT, z, w, h, l, rng.uniform(-math.pi, math.pi))


def sample_in_box(box: Box3D, n: int, rng) -> np.ndarray:
    local = np.column_stack([
        rng.uniform(-box.l / 2, box.l / 2, n),
        rng.uniform(-box.h, 0.0, n),
        rng.uniform(-box.w / 2, box.w / 2, n),
    ])
    return local @ rot_y(box.theta).T + box.bottom_center


def sample_clutter(box: Box3D, n: int, rng, clearance: float = 0.0) -> np.ndarray:
    """Uniform over an axis-aligned volume around ``box``, minus a shell of
    ``clearance`` metres around it (rejection sampling)."""
    reach = box.l / 2 + CLUTTER_MARGIN
    lo = np.array([box.x - reach, box.y - box.h - CLUTTER_HEADROOM, box.z - reach])
    hi = np.array([box.x + reach, box.y, box.z + reach])
    out = np.zeros((0, 3))
    while len(out) < n:
        cand = rng.uniform(lo, hi, size=(2 * (n - len(out)) + 8, 3))
        if clearance > 0:
            local = to_box_frame(cand, box)
            near = ((np.abs(local[:, 0]) <= box.l / 2 + clearance) & (np.abs(local[:, 2]) <= box.w / 2 + clearance)
                    & (local[:, 1] >= -box.h - clearance))
            cand = cand[~near]
        out = np.vstack([out, cand])
    return out[:n]


def make_scene(seed: int, index: int, points_per_scene: int = 200, clutter_ratio: float = CLUTTER_RATIO,
               proposal_jitter_px: float = 0.0, depth_margin: float = 0.5, padding: float = 0.0,
               clearance: float = CLEARANCE, calib: CameraCalib | None = None) -> SyntheticScene:
    rng = np.random.default_rng([seed, index])
    calib = calib or kitti_like_calib()
    frame = f"{index:06d}"
    box = random_box(rng)
    n_clutter = int(round(points_per_scene * clutter_ratio))
    n_obj = points_per_scene - n_clutter
    pts = np.vstack([sample_in_box(box, n_obj, rng), sample_clutter(box, n_clutter, rng, clearance)])
    pts = pts[rng.permutation(len(pts))]
    velo = calib.rect_to_velo(pts)
    reflect = rng.uniform(0.0, 1.0, size=(len(pts), 1))
    points = np.hstack([velo, reflect]).astype(np.float32).astype(np.float64)
    # the stored cloud is float32; recompute camera coordinates and labels from it
    pts_rect = calib.velo_to_rect(points[:, :3])
    labels = points_in_box3d(pts_rect, box).astype(np.int64)
    prop = stereo_proposal(frame, calib, box, proposal_jitter_px, depth_margin, rng, padding=padding)
    bbox = box2d_from_corners(calib.P_left, box_corners(box))
    record = LabelRecord.from_box(box, "Car", bbox)
    return SyntheticScene(frame, points, pts_rect, [box], labels, [prop], calib, [record])


def gen_synthetic(seed: int, n_scenes: int, points_per_scene: int = 200, clutter_ratio: float = CLUTTER_RATIO,
                  proposal_jitter_px: float = 0.0, depth_margin: float = 0.5, padding: float = 0.0,
                  start: int = 0, clearance: float = CLEARANCE) -> list[SyntheticScene]:
    if n_scenes < 1 or points_per_scene < 1:
        raise ValueError("scene and point counts must be positive")
    if not 0 <= clutter_ratio < 1:
        raise ValueError(f"clutter_ratio must be in [0, 1), got {clutter_ratio}")
    if proposal_jitter_px < 0 or depth_margin < 0 or padding < 0 or clearance < 0:
        raise ValueError("jitter, depth margin, padding and clearance must be non-negative")
    return [make_scene(seed, start + i, points_per_scene, clutter_ratio, proposal_jitter_px, depth_margin, padding, clearance)
            for i in range(n_scenes)]


def write_dataset(scenes: list[SyntheticScene], root: Path) -> Path:
    """KITTI layout: velodyne/, calib/, label_2/ and a proposals.txt file."""
    root = Path(root)
    for sub in ("velodyne", "calib", "label_2"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    props = []
    for s in scenes:
        (root / "velodyne" / f"{s.frame}.bin").write_bytes(write_velodyne_bin(s.points))
        (root / "calib" / f"{s.frame}.txt").write_text(write_calib(s.calib))
        (root / "label_2" / f"{s.frame}.txt").write_text(write_labels(s.records))
        props.extend(s.proposals)
    (root / "proposals.txt").write_text(write_proposals(props))
    return root
