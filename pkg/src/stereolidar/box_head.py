"""Learned box head: ridge regression from kept-point statistics to an encoding.

Features are order statistics of the kept points in the refined proposal's
frame, normalised like the codec (horizontal by the BEV diagonal, vertical by
the height). Targets are the encoding of the ground-truth box against the
same refined proposal, so each scheme gets its own regressor. Orientation is
taken from the minimum-area rectangle of the kept points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .box_codec import BoxEncodingScheme, EncodedBox, decode, encode, encode_orientation
from .geometry import Box3D, fit_box, normalize_angle, to_box_frame
from .kitti_io import read_checkpoint, write_checkpoint

QUANTILES = (0.0, 0.02, 0.1, 0.25, 0.5, 0.75, 0.9, 0.98, 1.0)
MIN_POINTS = 4
RIDGE = 1e-4
_SCHEMES = list(BoxEncodingScheme)


def _scales(p: Box3D) -> np.ndarray:
    d = math.hypot(p.l, p.w)
    return np.array([d, p.h, d])


def features(kept: np.ndarray, refined: Box3D) -> np.ndarray:
    if len(kept) < MIN_POINTS:
        return np.concatenate([[1.0, 0.0], np.zeros(3 * len(QUANTILES))])
    local = to_box_frame(kept, refined) / _scales(refined)
    q = np.quantile(local, QUANTILES, axis=0)  # order-free: quantiles sort internally
    return np.concatenate([[1.0, math.log(len(kept))], q.T.reshape(-1)])


def aligned_yaw(kept: np.ndarray, refined: Box3D) -> float:
    """Yaw of the kept points' rectangle, flipped by pi to lie within 90 degrees of the proposal."""
    if len(kept) < MIN_POINTS:
        return refined.theta
    theta = fit_box(kept).theta
    if abs(normalize_angle(theta - refined.theta)) > math.pi / 2:
        theta = normalize_angle(theta + math.pi)
    return theta


def _aligned_gt(gt: Box3D, refined: Box3D) -> Box3D:
    if abs(normalize_angle(gt.theta - refined.theta)) > math.pi / 2:
        return Box3D(gt.x, gt.y, gt.z, gt.w, gt.h, gt.l, normalize_angle(gt.theta + math.pi))
    return gt


@dataclass
class BoxHead:
    scheme: BoxEncodingScheme
    weights: np.ndarray  # features x scheme.dim

    def predict(self, kept: np.ndarray, refined: Box3D) -> tuple[Box3D, EncodedBox]:
        values = features(kept, refined) @ self.weights
        enc = EncodedBox(self.scheme, values, encode_orientation(aligned_yaw(kept, refined)))
        return decode(enc, refined), enc

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"head/weights": self.weights, "head/scheme": np.array([float(_SCHEMES.index(self.scheme))])}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> BoxHead:
        if "head/weights" not in arrays or "head/scheme" not in arrays:
            raise ValueError("not a box-head checkpoint")
        scheme = _SCHEMES[int(arrays["head/scheme"][0])]
        w = np.asarray(arrays["head/weights"], dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != scheme.dim:
            raise ValueError(f"box-head weights have shape {w.shape}, expected (F, {scheme.dim})")
        return cls(scheme, w)


def fit_box_head(examples, scheme: BoxEncodingScheme, ridge: float = RIDGE) -> BoxHead:
    """Ridge fit on ``(kept_points, refined_box, gt_box)`` triples."""
    xs, ys = [], []
    for kept, refined, gt in examples:
        xs.append(features(kept, refined))
        ys.append(encode(_aligned_gt(gt, refined), refined, scheme).values)
    if not xs:
        raise ValueError("no examples to fit the box head")
    x, y = np.asarray(xs), np.asarray(ys)
    f = x.shape[1]
    a = np.vstack([x, math.sqrt(ridge * len(x)) * np.eye(f)])
    b = np.vstack([y, np.zeros((f, y.shape[1]))])
    w, *_ = np.linalg.lstsq(a, b, rcond=None)
    return BoxHead(scheme, w)


def head_path(checkpoint: str | Path) -> Path:
    return Path(str(checkpoint) + ".head")


def save_box_head(head: BoxHead, path: Path) -> None:
    Path(path).write_bytes(write_checkpoint(head.to_arrays()))


def load_box_head(cfg) -> BoxHead:
    path = head_path(cfg.checkpoint)
    head = BoxHead.from_arrays(read_checkpoint(path.read_bytes(), str(path)))
    if head.scheme is not cfg.encoding:
        raise ValueError(f"box head at {path} was trained for {head.scheme.key}, config asks for {cfg.encoding.key}")
    return head
