"""Pipeline configuration: a plain-text ``key = value`` file plus overrides.

Precedence is command line over file over defaults. Keys are dotted paths
into :class:`PipelineConfig`, for example ``segnet.width = 64`` or
``eval.iou.Car = 0.7``. Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .box_codec import BoxEncodingScheme, CodecError
from .evaluation import EvalConfig
from .losses import LossWeights
from .segnet import SegNetConfig, SegNetError
from .synthetic import CLEARANCE, CLUTTER_RATIO


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 0.2
    pool: int = 16  # training scenes cycled one per step
    holdout: int = 20
    log_every: int = 1
    checkpoint_every: int = 50


@dataclass
class SynthConfig:
    n_scenes: int = 100
    points_per_scene: int = 200
    clutter_ratio: float = CLUTTER_RATIO
    jitter_px: float = 0.0
    depth_margin: float = 0.5
    padding: float = 0.0  # metres added to every GT dimension before projecting proposals
    clearance: float = CLEARANCE  # clutter-free shell around each object, metres


@dataclass
class PipelineConfig:
    data_root: str = "data"
    proposals: str = ""  # defaults to <data_root>/proposals.txt
    checkpoint: str = "segnet.ckpt"
    out_dir: str = "detections"
    xi: float = -0.5
    encoding: BoxEncodingScheme = BoxEncodingScheme.POINTS3_HEIGHTS2
    proposal_margin: float = 0.5
    min_box_dim: float = 1.6  # floor on rough proposal dims; bounds how far xi may shrink
    box_head: str = "geometric"  # or "learned"
    seed: int = 0
    workers: int = 1
    segnet: SegNetConfig = field(default_factory=SegNetConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        validate(self)

    @property
    def proposals_path(self) -> Path:
        return Path(self.proposals) if self.proposals else Path(self.data_root) / "proposals.txt"


def validate(cfg: PipelineConfig) -> None:
    if cfg.min_box_dim <= 0:
        raise ConfigError(f"min_box_dim must be positive, got {cfg.min_box_dim}")
    if cfg.min_box_dim + cfg.xi <= 0:
        raise ConfigError(f"xi={cfg.xi} would collapse boxes at the minimum dimension {cfg.min_box_dim}")
    if cfg.proposal_margin < 0:
        raise ConfigError("proposal_margin must be non-negative")
    if cfg.box_head not in ("geometric", "learned"):
        raise ConfigError(f"box_head must be 'geometric' or 'learned', got {cfg.box_head!r}")
    if cfg.workers < 1:
        raise ConfigError("workers must be at least 1")
    if cfg.train.steps < 0 or cfg.train.lr < 0 or cfg.train.pool < 1:
        raise ConfigError("train.steps and train.lr must be non-negative, train.pool positive")


_SECTIONS = {"segnet": SegNetConfig, "weights": LossWeights, "eval": EvalConfig, "train": TrainConfig,
             "synth": SynthConfig}
_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _coerce(key: str, raw: str, current):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            if raw.lower() not in _BOOL:
                raise ValueError(raw)
            return _BOOL[raw.lower()]
        if isinstance(current, BoxEncodingScheme):
            return BoxEncodingScheme.parse(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        return raw
    except (ValueError, CodecError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def apply_overrides(cfg: PipelineConfig, overrides: dict[str, str]) -> PipelineConfig:
    top = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    sections = {name: {f.name: getattr(top[name], f.name) for f in dataclasses.fields(kind)}
                for name, kind in _SECTIONS.items()}
    for key, raw in overrides.items():
        parts = key.split(".")
        if len(parts) == 1 and parts[0] in top and parts[0] not in _SECTIONS:
            top[parts[0]] = _coerce(key, raw, top[parts[0]])
        elif parts[0] == "eval" and len(parts) == 3 and parts[1] == "iou":
            sections["eval"]["iou_thresholds"] = {**sections["eval"]["iou_thresholds"], parts[2]: _coerce(key, raw, 0.5)}
        elif len(parts) == 2 and parts[0] in sections and parts[1] in sections[parts[0]]:
            cur = sections[parts[0]][parts[1]]
            if cur is None and parts[1] == "layer_dims":
                cur = ()
            sections[parts[0]][parts[1]] = _coerce(key, raw, cur)
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    try:
        for name, kind in _SECTIONS.items():
            values = sections[name]
            touched = {k for k in overrides if k.startswith("segnet.")}
            if kind is SegNetConfig and touched & {"segnet.width", "segnet.num_layers"} \
                    and "segnet.layer_dims" not in touched:
                # let width / num_layers overrides rebuild the per-layer widths
                values = {**values, "layer_dims": None}
            top[name] = kind(**values)
        return PipelineConfig(**top)
    except (SegNetError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {p}: {exc}") from exc
        cfg = apply_overrides(cfg, parse_config_text(text, str(p)))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def parse_set_args(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for sf in dataclasses.fields(v):
                sv = getattr(v, sf.name)
                if isinstance(sv, dict):
                    lines += [f"{f.name}.iou.{c} = {t!r}" for c, t in sorted(sv.items())]
                elif isinstance(sv, tuple):
                    lines.append(f"{f.name}.{sf.name} = {','.join(str(x) for x in sv)}")
                else:
                    lines.append(f"{f.name}.{sf.name} = {str(sv).lower() if isinstance(sv, bool) else sv}")
        elif isinstance(v, BoxEncodingScheme):
            lines.append(f"{f.name} = {v.key}")
        else:
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
