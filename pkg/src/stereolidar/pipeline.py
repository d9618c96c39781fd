"""Inference: stereo proposals -> fused regions -> segmentation -> refined boxes.

Per proposal the stages are

1. intersect the left and right viewing frustums into one convex region,
2. crop the scene points inside it and segment them with the network,
3. fit a rough box to the object points, looser than the object by
   ``proposal_margin`` like a first-stage proposal,
4. grow or shrink that box by ``xi`` and keep every scene point inside it,
5. regress the final box against the refined proposal through the
   configured encoding (a geometric fit by default, or a learned head).
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from . import segnet as S
from .box_codec import BoxEncodingScheme, decode, encode
from .config import PipelineConfig
from .geometry import (Box3D, CameraCalib, FusedRegion, GeometryError, box_corners, fit_box, frustum_from_box2d,
                       intersect_frustums, points_in_box3d, points_in_region, project_rect, resize_box, rot_y,
                       to_box_frame)
from .kitti_io import LabelRecord, SceneSample, StereoProposal

log = logging.getLogger(__name__)

MIN_OBJECT_POINTS = 4
LEVERAGE = 6.0  # only clear outliers are peeled from the rough fit


@dataclass
class SegmentedProposal:
    proposal: StereoProposal
    region: FusedRegion
    crop_idx: np.ndarray  # indices into the scene cloud
    object_idx: np.ndarray
    rough: Box3D | None


@dataclass
class ProposalResult:
    box: Box3D | None
    refined: Box3D | None = None
    kept_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    encoding: np.ndarray | None = None


def fused_region(calib: CameraCalib, prop: StereoProposal) -> FusedRegion:
    depth = (prop.z_near, prop.z_far)
    left = frustum_from_box2d(calib, "left", prop.left, depth)
    right = frustum_from_box2d(calib, "right", prop.right, depth)
    return intersect_frustums(left, right)


def centred(points: np.ndarray) -> np.ndarray:
    # sorted sums keep the centroid independent of point order
    return points - np.sort(points, axis=0).sum(axis=0) / len(points)


def segmentation_input(points: np.ndarray) -> np.ndarray:
    """Centre a crop and turn its dominant horizontal direction onto the x axis.

    The direction is the leading eigenvector of the BEV second-moment matrix,
    accumulated with sorted sums so the result ignores point order.
    """
    x = centred(points)
    sxx = np.sort(x[:, 0] * x[:, 0]).sum()
    sxz = np.sort(x[:, 0] * x[:, 2]).sum()
    szz = np.sort(x[:, 2] * x[:, 2]).sum()
    _, vecs = np.linalg.eigh(np.array([[sxx, sxz], [sxz, szz]]))
    u = vecs[:, 1]
    # rows @ rot_y(t) undo a yaw of t; t is the direction's yaw
    return x @ rot_y(math.atan2(-u[1], u[0]))


def crop_indices(points_rect: np.ndarray, region: FusedRegion) -> np.ndarray:
    if region.empty:
        return np.zeros(0, dtype=np.intp)
    return np.flatnonzero(points_in_region(points_rect, region))


def rough_box(object_points: np.ndarray, margin: float, min_dim: float) -> Box3D:
    fit = trimmed_fit(object_points)
    w, h, l = (max(d + margin, min_dim) for d in (fit.w, fit.h, fit.l))
    return Box3D(fit.x, fit.y, fit.z, w, h, l, fit.theta)


def segment_proposal(points_rect: np.ndarray, calib: CameraCalib, prop: StereoProposal, params, cfg: PipelineConfig,
                     ) -> SegmentedProposal:
    region = fused_region(calib, prop)
    crop_idx = crop_indices(points_rect, region)
    object_idx = np.zeros(0, dtype=np.intp)
    rough = None
    if len(crop_idx) > cfg.segnet.k:
        pred = S.predict(segmentation_input(points_rect[crop_idx]), params, cfg.segnet)
        object_idx = crop_idx[pred == 1]
    if len(object_idx) >= MIN_OBJECT_POINTS:
        rough = rough_box(points_rect[object_idx], cfg.proposal_margin, cfg.min_box_dim)
    return SegmentedProposal(prop, region, crop_idx, object_idx, rough)


def extent_corrected_fit(points: np.ndarray) -> Box3D:
    """Tightest box, widened for the range shortfall of a finite uniform sample.

    n uniform samples on an interval of length L span L (n - 1) / (n + 1) on
    average, so each dimension is scaled by (n + 1) / (n - 1) about the centre.
    """
    fit = fit_box(points)
    n = len(points)
    s = (n + 1) / (n - 1)
    cy = fit.y - fit.h / 2.0
    return Box3D(fit.x, cy + fit.h * s / 2.0, fit.z, fit.w * s, fit.h * s, fit.l * s, fit.theta)


def _box_volume(points: np.ndarray) -> float:
    b = fit_box(points)
    return b.w * b.h * b.l


def _peel_candidates(pts: np.ndarray, max_group: int) -> list[tuple[int, ...]]:
    """Single hull points plus, per face of the tight box, its 1..max_group
    outermost points (outliers often come in small clumps)."""
    groups = set()
    try:
        groups.update((int(i),) for i in ConvexHull(pts[:, [0, 2]]).vertices)
    except (QhullError, ValueError):
        groups.update((i,) for i in range(len(pts)))
    local = to_box_frame(pts, fit_box(pts))
    for axis in range(3):
        order = np.argsort(local[:, axis], kind="stable")
        for m in range(1, max_group + 1):
            groups.add(tuple(sorted(order[:m].tolist())))
            groups.add(tuple(sorted(order[-m:].tolist())))
    return sorted(groups)


def trimmed_fit(points: np.ndarray, leverage: float = LEVERAGE, max_group: int = 3, max_trim: float = 0.2) -> Box3D:
    """Extent-corrected fit after peeling isolated outer points.

    Dropping m of n uniform samples from the outside of the tight box shrinks
    its volume by a fraction of order m / n, so a group whose removal shrinks
    it by more than ``m * leverage / n`` is treated as outliers. The worst
    group (largest shrink per point) is removed and the test repeated, for at
    most ``max_trim`` of the points.
    """
    pts = np.asarray(points, dtype=np.float64)
    budget = int(max_trim * len(pts))
    while budget > 0:
        n = len(pts)
        if n <= MIN_OBJECT_POINTS + max_group:
            break
        vol = _box_volume(pts)
        if vol <= 0:
            break
        best, best_score = None, leverage / n
        for group in _peel_candidates(pts, max_group):
            score = (1.0 - _box_volume(np.delete(pts, group, axis=0)) / vol) / len(group)
            if score > best_score:
                best, best_score = group, score
        if best is None or len(best) > budget:
            break
        pts = np.delete(pts, best, axis=0)
        budget -= len(best)
    return extent_corrected_fit(pts)


def geometric_head(kept_points: np.ndarray, refined: Box3D, scheme: BoxEncodingScheme):
    """Extent-corrected fit of every kept point, passed through the codec.

    No outlier peeling here: what the refined box lets in is what the head
    sees, which is the trade-off ``xi`` controls.
    """
    target = extent_corrected_fit(kept_points) if len(kept_points) >= MIN_OBJECT_POINTS else refined
    enc = encode(target, refined, scheme)
    return decode(enc, refined), enc


def refine_proposal(seg: SegmentedProposal, points_rect: np.ndarray, cfg: PipelineConfig, xi: float | None = None,
                    head=None) -> ProposalResult:
    if seg.rough is None:
        return ProposalResult(None)
    xi = cfg.xi if xi is None else xi
    try:
        refined = resize_box(seg.rough, xi)
    except GeometryError as exc:
        log.warning("frame %s: %s", seg.proposal.frame, exc)
        return ProposalResult(None)
    kept_idx = np.flatnonzero(points_in_box3d(points_rect, refined))
    kept = points_rect[kept_idx]
    if head is None:
        box, enc = geometric_head(kept, refined, cfg.encoding)
    else:
        box, enc = head.predict(kept, refined)
    return ProposalResult(box, refined, kept_idx, np.concatenate([enc.values, enc.orientation]))


def detection_record(box: Box3D, calib: CameraCalib, score: float, type_: str = "Car") -> LabelRecord:
    uv, _, valid = project_rect(calib.P_left, box_corners(box))
    if np.all(valid):
        bbox = (float(uv[:, 0].min()), float(uv[:, 1].min()), float(uv[:, 0].max()), float(uv[:, 1].max()))
    else:
        bbox = (0.0, 0.0, 0.0, 0.0)
    return LabelRecord.from_box(box, type_, bbox, score=score)


def _box_dict(b: Box3D | None):
    return None if b is None else dict(zip(("x", "y", "z", "w", "h", "l", "theta"), map(float, b.as_array())))


def infer_frame(sample: SceneSample, params, cfg: PipelineConfig, head=None, debug: dict | None = None,
                ) -> list[LabelRecord]:
    points_rect = sample.calib.velo_to_rect(sample.points[:, :3])
    out = []
    for i, prop in enumerate(sample.proposals):
        seg = segment_proposal(points_rect, sample.calib, prop, params, cfg)
        res = refine_proposal(seg, points_rect, cfg, head=head)
        if res.box is not None:
            out.append(detection_record(res.box, sample.calib, prop.score))
        if debug is not None:
            debug.setdefault("proposals", []).append({
                "index": i,
                "region_planes": seg.region.planes.tolist(),
                "region_vertices": seg.region.vertices.tolist(),
                "crop_idx": seg.crop_idx.tolist(),
                "object_idx": seg.object_idx.tolist(),
                "rough": _box_dict(seg.rough),
                "refined": _box_dict(res.refined),
                "kept_idx": res.kept_idx.tolist(),
                "encoding": None if res.encoding is None else res.encoding.tolist(),
                "box": _box_dict(res.box),
            })
    return out


def run_inference(samples: list[SceneSample], params, cfg: PipelineConfig, workers: int = 1, head=None,
                  debug_dir: Path | None = None) -> dict[str, list[LabelRecord]]:
    """Detections per frame; the worker count never changes the result."""

    def one(sample):
        dbg = {"frame": sample.frame} if debug_dir is not None else None
        dets = infer_frame(sample, params, cfg, head, dbg)
        if dbg is not None:
            Path(debug_dir).mkdir(parents=True, exist_ok=True)
            (Path(debug_dir) / f"{sample.frame}.json").write_text(json.dumps(dbg, indent=1))
        return dets

    if workers <= 1:
        results = [one(s) for s in samples]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, samples))  # map preserves input order
    return {s.frame: r for s, r in zip(samples, results)}
