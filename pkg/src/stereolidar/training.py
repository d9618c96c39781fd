"""Segmentation training loop, checkpoints and the train / held-out protocol.

Training samples are the points inside each proposal's fused region, in the
same canonical frame the pipeline feeds the network at inference, labelled
by containment in any ground-truth box. Training cycles through a fixed pool
of synthetic scenes, one per SGD step, so step ``s`` always sees sample
``s % pool``. Held-out scenes come from the same generator with frame
indices far from the training pool.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import segnet as S
from . import tensor as T
from .config import PipelineConfig
from .geometry import points_in_box3d
from .kitti_io import SceneSample, read_checkpoint, write_checkpoint
from .box_head import fit_box_head
from .pipeline import crop_indices, fused_region, refine_proposal, segment_proposal, segmentation_input
from .synthetic import SyntheticScene, gen_synthetic

log = logging.getLogger(__name__)

HOLDOUT_START = 100_000
STEP_KEY = "meta/step"
HEAD_START = 200_000
HEAD_SCENES = 200


def crop_sample(points_rect: np.ndarray, labels: np.ndarray, calib, proposal, min_points: int):
    idx = crop_indices(points_rect, fused_region(calib, proposal))
    if len(idx) <= min_points:
        return None
    return segmentation_input(points_rect[idx]), np.asarray(labels)[idx]


def segmentation_samples(scenes: list[SyntheticScene], min_points: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for s in scenes:
        for prop in s.proposals:
            sample = crop_sample(s.points_rect, s.labels, s.calib, prop, min_points)
            if sample is not None:
                out.append(sample)
    return out


def dataset_samples(samples: list[SceneSample], min_points: int = 10) -> list[tuple[np.ndarray, np.ndarray]]:
    """Crops of a KITTI-layout dataset; a point is object if it lies in any labelled box."""
    out = []
    for smp in samples:
        pts = smp.calib.velo_to_rect(smp.points[:, :3])
        labels = np.zeros(len(pts), dtype=np.int64)
        for rec in smp.labels:
            if rec.type != "DontCare":
                labels |= points_in_box3d(pts, rec.to_box()).astype(np.int64)
        for prop in smp.proposals:
            sample = crop_sample(pts, labels, smp.calib, prop, min_points)
            if sample is not None:
                out.append(sample)
    return out


def synthetic_split(cfg: PipelineConfig) -> tuple[list, list]:
    sc = cfg.synth
    kw = dict(points_per_scene=sc.points_per_scene, clutter_ratio=sc.clutter_ratio, clearance=sc.clearance)
    k = cfg.segnet.k
    train = segmentation_samples(gen_synthetic(cfg.seed, cfg.train.pool, **kw), k)
    held = segmentation_samples(gen_synthetic(cfg.seed, cfg.train.holdout, start=HOLDOUT_START, **kw), k) \
        if cfg.train.holdout else []
    return train, held


def params_to_arrays(params: S.Params, step: int) -> dict[str, np.ndarray]:
    out = {name: t.data.copy() for name, t in params.items()}
    out[STEP_KEY] = np.array([float(step)])
    return out


def arrays_to_params(arrays: dict[str, np.ndarray], config: S.SegNetConfig) -> tuple[S.Params, int]:
    """Load into freshly initialised parameters, checking names and shapes."""
    params = S.init_params(config, seed=config.seed)
    missing = [n for n in params if n not in arrays]
    if missing:
        raise ValueError(f"checkpoint lacks parameters {missing[:3]}{'...' if len(missing) > 3 else ''}")
    for name, t in params.items():
        if arrays[name].shape != t.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {arrays[name].shape}, expected {t.shape}")
        t.data = np.array(arrays[name], dtype=np.float64)
    step = int(arrays[STEP_KEY][0]) if STEP_KEY in arrays else 0
    return params, step


def save_checkpoint(path: Path, params: S.Params, step: int) -> None:
    Path(path).write_bytes(write_checkpoint(params_to_arrays(params, step)))


def load_checkpoint(path: Path, config: S.SegNetConfig) -> tuple[S.Params, int]:
    p = Path(path)
    return arrays_to_params(read_checkpoint(p.read_bytes(), str(p)), config)


@dataclass
class TrainResult:
    params: S.Params
    losses: list[float] = field(default_factory=list)
    step: int = 0
    aborted: bool = False


def train_segnet(samples, config: S.SegNetConfig, steps: int, lr: float, params: S.Params | None = None,
                 start_step: int = 0, checkpoint: Path | None = None, checkpoint_every: int = 0,
                 on_step=None) -> TrainResult:
    """Plain SGD, one sample per step. On a non-finite loss the last good
    parameters are written to ``checkpoint`` and the error propagates."""
    if not samples:
        raise ValueError("no training samples")
    params = params if params is not None else S.init_params(config, seed=config.seed)
    result = TrainResult(params, step=start_step)
    for step in range(start_step, start_step + steps):
        good = params_to_arrays(params, step)
        try:
            r = S.segnet_train_step([samples[step % len(samples)]], params, config, lr)
        except T.NonFiniteError:
            if checkpoint is not None:
                Path(checkpoint).write_bytes(write_checkpoint(good))
            result.aborted = True
            raise
        result.losses.append(r.loss)
        result.step = step + 1
        if on_step is not None:
            on_step(step, r)
        if checkpoint is not None and checkpoint_every and result.step % checkpoint_every == 0:
            save_checkpoint(checkpoint, params, result.step)
    if checkpoint is not None:
        save_checkpoint(checkpoint, params, result.step)
    return result


def accuracy(samples, params, config: S.SegNetConfig) -> float:
    return S.accuracy(samples, params, config) if samples else math.nan


def head_examples(scenes: list[SyntheticScene], params, cfg: PipelineConfig) -> list:
    """(kept points, refined proposal, GT box) triples from running the pipeline on labelled scenes."""
    out = []
    for s in scenes:
        for prop, gt in zip(s.proposals, s.boxes):
            seg = segment_proposal(s.points_rect, s.calib, prop, params, cfg)
            res = refine_proposal(seg, s.points_rect, cfg)
            if res.refined is not None:
                out.append((s.points_rect[res.kept_idx], res.refined, gt))
    return out


def train_box_head(params, cfg: PipelineConfig, scheme=None):
    """Fit the learned head on jittered, padded synthetic scenes disjoint from evaluation frames."""
    sc = cfg.synth
    scenes = gen_synthetic(cfg.seed, HEAD_SCENES, sc.points_per_scene, sc.clutter_ratio, sc.jitter_px,
                           sc.depth_margin, sc.padding, start=HEAD_START, clearance=sc.clearance)
    return fit_box_head(head_examples(scenes, params, cfg), scheme or cfg.encoding)
