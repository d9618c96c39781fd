"""KITTI-style 3D detection evaluation: matching, PR curves and interpolated AP."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import iou_3d, iou_bev
from .kitti_io import LabelRecord

DEFAULT_THRESHOLDS = {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5}

# (min bbox height px, max occlusion, max truncation)
DIFFICULTY_LIMITS = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}
DIFFICULTIES = ("easy", "moderate", "hard")


class Flag(enum.Enum):
    TP = "TP"
    FP = "FP"
    IGNORED = "ignored"


@dataclass
class EvalConfig:
    iou_thresholds: dict = field(default_factory=lambda: dict(DEFAULT_THRESHOLDS))
    criterion: str = "iou3d"  # or "bev"
    interpolation: int = 40  # 11 or 40 recall points
    difficulty: str = "moderate"

    def __post_init__(self):
        for cls, t in self.iou_thresholds.items():
            if not 0 < t <= 1:
                raise ValueError(f"IoU threshold for {cls} must be in (0, 1], got {t}")
        if self.criterion not in ("iou3d", "bev"):
            raise ValueError(f"criterion must be 'iou3d' or 'bev', got {self.criterion!r}")
        if self.interpolation not in (11, 40):
            raise ValueError(f"interpolation must be 11 or 40, got {self.interpolation}")
        if self.difficulty not in DIFFICULTIES:
            raise ValueError(f"difficulty must be one of {DIFFICULTIES}")

    def threshold(self, cls: str) -> float:
        return self.iou_thresholds.get(cls, 0.5)


@dataclass
class MatchResult:
    det_flags: list[Flag]
    gt_matched: list[bool]
    scores: list[float]
    num_valid_gt: int


def difficulty_filter(label: LabelRecord) -> str:
    """Strictest difficulty a ground-truth box qualifies for, else ``ignored``."""
    height = label.bbox_height
    for name in DIFFICULTIES:
        min_h, max_occ, max_trunc = DIFFICULTY_LIMITS[name]
        if height >= min_h and 0 <= label.occluded <= max_occ and label.truncated <= max_trunc:
            return name
    return "ignored"


def _counts_for(level: str, slice_: str) -> bool:
    if level == "ignored":
        return False
    return DIFFICULTIES.index(level) <= DIFFICULTIES.index(slice_)


def pairwise_iou(dets: Sequence[LabelRecord], gts: Sequence[LabelRecord], criterion: str) -> np.ndarray:
    fn = iou_3d if criterion == "iou3d" else iou_bev
    out = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        db = d.to_box()
        for j, g in enumerate(gts):
            out[i, j] = fn(db, g.to_box())
    return out


def match_detections(dets: Sequence[LabelRecord], gts: Sequence[LabelRecord], cfg: EvalConfig,
                     iou: np.ndarray | None = None, gt_valid: Sequence[bool] | None = None) -> MatchResult:
    """Greedy matching in the given detection order (callers sort by score).

    Each detection claims the unmatched GT of highest IoU at or above the class
    threshold. Claiming a GT outside the difficulty slice marks the detection
    ignored; claiming nothing makes it a false positive.
    """
    if iou is None:
        iou = pairwise_iou(dets, gts, cfg.criterion)
    if gt_valid is None:
        gt_valid = [_counts_for(difficulty_filter(g), cfg.difficulty) for g in gts]
    matched = [False] * len(gts)
    flags = []
    for i, d in enumerate(dets):
        thr = cfg.threshold(d.type)
        best, best_j = -1.0, -1
        for j in range(len(gts)):
            if matched[j] or iou[i, j] < thr:
                continue
            if iou[i, j] > best:
                best, best_j = iou[i, j], j
        if best_j < 0:
            flags.append(Flag.FP)
            continue
        matched[best_j] = True
        flags.append(Flag.TP if gt_valid[best_j] else Flag.IGNORED)
    return MatchResult(flags, matched, [float(d.score or 0.0) for d in dets], int(sum(gt_valid)))


def _sorted_by_score(dets: Sequence[LabelRecord]) -> list[int]:
    # stable: equal scores keep input order
    return sorted(range(len(dets)), key=lambda i: -(dets[i].score or 0.0))


def evaluate_frame(dets: Sequence[LabelRecord], gts: Sequence[LabelRecord], cls: str, cfg: EvalConfig) -> MatchResult:
    d = [r for r in dets if r.type == cls]
    d = [d[i] for i in _sorted_by_score(d)]
    g = [r for r in gts if r.type == cls]
    return match_detections(d, g, cfg)


def precision_recall(results: Sequence[MatchResult]) -> tuple[np.ndarray, np.ndarray]:
    """PR points over all frames, detections ranked by score (ties: input order)."""
    entries = []
    for fi, r in enumerate(results):
        for di, (flag, score) in enumerate(zip(r.det_flags, r.scores)):
            if flag is not Flag.IGNORED:
                entries.append((-score, fi, di, flag is Flag.TP))
    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    n_gt = sum(r.num_valid_gt for r in results)
    tp = np.cumsum([e[3] for e in entries], dtype=np.float64) if entries else np.zeros(0)
    fp = np.arange(1, len(entries) + 1, dtype=np.float64) - tp
    recall = tp / n_gt if n_gt else np.zeros_like(tp)
    precision = tp / np.maximum(tp + fp, 1.0)
    return precision, recall


def recall_points(n: int) -> np.ndarray:
    if n == 11:
        return np.linspace(0.0, 1.0, 11)
    if n == 40:
        return np.arange(1, 41) / 40.0
    raise ValueError(f"unsupported interpolation {n}")


def interpolated_ap(precision: np.ndarray, recall: np.ndarray, n_points: int) -> float:
    total = 0.0
    for r in recall_points(n_points):
        mask = recall >= r - 1e-12
        total += float(precision[mask].max()) if np.any(mask) else 0.0
    return total / n_points


def average_precision(results: Sequence[MatchResult], n_points: int = 40) -> float | None:
    """Interpolated AP; ``None`` when the slice holds no valid ground truth."""
    if sum(r.num_valid_gt for r in results) == 0:
        return None
    precision, recall = precision_recall(results)
    return interpolated_ap(precision, recall, n_points)


@dataclass
class MetricRow:
    cls: str
    difficulty: str
    criterion: str
    interpolation: int
    ap: float | None
    num_gt: int
    num_det: int


def evaluate(gt: dict[str, list[LabelRecord]], det: dict[str, list[LabelRecord]], classes=("Car",),
             criteria=("iou3d", "bev"), difficulties=DIFFICULTIES, interpolation: int = 40,
             thresholds: dict | None = None) -> list[MetricRow]:
    """AP for every (class, difficulty, criterion) over the frames of ``gt``."""
    frames = sorted(gt)
    rows = []
    for cls in classes:
        for diff in difficulties:
            for crit in criteria:
                cfg = EvalConfig(dict(thresholds or DEFAULT_THRESHOLDS), crit, interpolation, diff)
                results = [evaluate_frame(det.get(f, []), gt[f], cls, cfg) for f in frames]
                rows.append(MetricRow(cls, diff, crit, interpolation, average_precision(results, interpolation),
                                      sum(r.num_valid_gt for r in results), sum(len(r.det_flags) for r in results)))
    return rows


def _ap_text(ap: float | None) -> str:
    return "absent" if ap is None else f"{ap:.6f}"


def format_report(rows: Sequence[MetricRow]) -> str:
    """``key: value`` lines followed by a comma-delimited table."""
    lines = [f"AP_{r.criterion}_{r.cls}_{r.difficulty}_R{r.interpolation}: {_ap_text(r.ap)}" for r in rows]
    lines.append("")
    lines.append("class,difficulty,criterion,interpolation,ap,num_gt,num_det")
    lines += [f"{r.cls},{r.difficulty},{r.criterion},{r.interpolation},{_ap_text(r.ap)},{r.num_gt},{r.num_det}"
              for r in rows]
    return "\n".join(lines) + "\n"
