"""Readers and writers for KITTI-format files and the stereo proposal list.

Floats are written with ``repr`` so a write/parse cycle is bit exact.
Every parser raises :class:`FormatError` carrying the source name, the
1-based line number and the offending field.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box3D, CameraCalib, GeometryError

CALIB_KEYS = {"P0": 12, "P1": 12, "P2": 12, "P3": 12, "R0_rect": 9, "Tr_velo_to_cam": 12}
CHECKPOINT_MAGIC = b"SRDL"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    def __init__(self, message: str, source: str = "<text>", line: int | None = None, field: str | None = None):
        self.source = source
        self.line = line
        self.field = field
        where = source if line is None else f"{source}:{line}"
        if field:
            where += f" [{field}]"
        super().__init__(f"{where}: {message}")


def _float(tok: str, source: str, line: int, fname: str) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise FormatError(f"cannot parse {tok!r} as a number", source, line, fname) from None
    if not math.isfinite(v):
        raise FormatError(f"non-finite value {tok!r}", source, line, fname)
    return v


def _fmt(v: float) -> str:
    return repr(float(v))


# --------------------------------------------------------------------------
# calibration


def parse_calib(text: str, source: str = "<calib>", full: bool = False):
    """Parse a KITTI calib file; P2/P3 become the left/right cameras.

    With ``full=True`` the raw key -> matrix dict is returned alongside.
    """
    raw: dict[str, np.ndarray] = {}
    lines: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if ":" not in line:
            raise FormatError("expected 'KEY: values'", source, lineno)
        key, _, rest = line.partition(":")
        key = key.strip()
        toks = rest.split()
        vals = [_float(t, source, lineno, key) for t in toks]
        if key in CALIB_KEYS and len(vals) != CALIB_KEYS[key]:
            raise FormatError(f"{key} needs {CALIB_KEYS[key]} values, got {len(vals)}", source, lineno, key)
        raw[key] = np.array(vals, dtype=np.float64)
        lines[key] = lineno
    eof = len(text.splitlines())
    for key in ("P2", "P3", "R0_rect", "Tr_velo_to_cam"):
        if key not in raw:
            raise FormatError(f"missing key {key} (reached end of file)", source, eof, key)
    try:
        calib = CameraCalib(raw["P2"].reshape(3, 4), raw["P3"].reshape(3, 4), raw["R0_rect"].reshape(3, 3),
                            raw["Tr_velo_to_cam"].reshape(3, 4))
    except GeometryError as exc:
        key = "P3" if "P_right" in str(exc) else "P2"
        raise FormatError(str(exc), source, lines[key], key) from exc
    return (calib, raw) if full else calib


def write_calib(calib: CameraCalib, extra: dict | None = None) -> str:
    mats = {
        "P0": calib.P_left,
        "P1": calib.P_left,
        "P2": calib.P_left,
        "P3": calib.P_right,
        "R0_rect": calib.R0_rect,
        "Tr_velo_to_cam": calib.Tr_velo_to_cam,
    }
    if extra:
        mats.update(extra)
    return "".join(f"{k}: {' '.join(_fmt(v) for v in np.asarray(m).reshape(-1))}\n" for k, m in mats.items())


# --------------------------------------------------------------------------
# labels / detections


@dataclass
class LabelRecord:
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple[float, float, float, float]
    dimensions: tuple[float, float, float]  # h, w, l
    location: tuple[float, float, float]
    rotation_y: float
    score: float | None = None

    @property
    def bbox_height(self) -> float:
        return self.bbox[3] - self.bbox[1]

    def to_box(self) -> Box3D:
        h, w, l = self.dimensions
        return Box3D(*self.location, w, h, l, self.rotation_y)

    @classmethod
    def from_box(cls, box: Box3D, type_: str = "Car", bbox=(0.0, 0.0, 0.0, 0.0), score=None,
                 truncated=0.0, occluded=0) -> LabelRecord:
        alpha = box.theta - math.atan2(box.x, box.z)
        alpha = (alpha + math.pi) % (2 * math.pi) - math.pi
        return cls(type_, truncated, occluded, alpha, tuple(float(v) for v in bbox), (box.h, box.w, box.l),
                   (box.x, box.y, box.z), box.theta, score)


_LABEL_FIELDS = ["type", "truncated", "occluded", "alpha", "bbox_left", "bbox_top", "bbox_right", "bbox_bottom",
                 "height", "width", "length", "x", "y", "z", "rotation_y", "score"]


def parse_labels(text: str, source: str = "<labels>") -> list[LabelRecord]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        toks = line.split()
        if not toks:
            continue
        if len(toks) not in (15, 16):
            raise FormatError(f"expected 15 or 16 fields, got {len(toks)}", source, lineno)
        vals = [_float(t, source, lineno, name) for t, name in zip(toks[1:], _LABEL_FIELDS[1:])]
        occ = vals[1]
        if occ != int(occ) or not 0 <= occ <= 3:
            if not (toks[0] == "DontCare" and occ == -1):
                raise FormatError(f"occlusion must be an integer 0..3, got {toks[1]}", source, lineno, "occluded")
        bbox = tuple(vals[3:7])
        if bbox[0] > bbox[2] or bbox[1] > bbox[3]:
            raise FormatError("bbox corners out of order", source, lineno, "bbox")
        dims = tuple(vals[7:10])
        if toks[0] != "DontCare" and min(dims) <= 0:
            raise FormatError("dimensions must be positive", source, lineno, "dimensions")
        if abs(vals[13]) > math.pi + 1e-6 and toks[0] != "DontCare":
            raise FormatError(f"rotation_y {vals[13]} outside [-pi, pi]", source, lineno, "rotation_y")
        out.append(LabelRecord(toks[0], vals[0], int(occ), vals[2], bbox, dims, tuple(vals[10:13]), vals[13],
                               vals[14] if len(vals) == 15 else None))
    return out


def write_labels(records: Iterable[LabelRecord]) -> str:
    lines = []
    for r in records:
        fields = [r.type, _fmt(r.truncated), str(int(r.occluded)), _fmt(r.alpha), *map(_fmt, r.bbox),
                  *map(_fmt, r.dimensions), *map(_fmt, r.location), _fmt(r.rotation_y)]
        if r.score is not None:
            fields.append(_fmt(r.score))
        lines.append(" ".join(fields) + "\n")
    return "".join(lines)


def write_detections(records: Iterable[LabelRecord]) -> str:
    records = list(records)
    for r in records:
        if r.score is None:
            raise ValueError("detections need a score")
    return write_labels(records)


# --------------------------------------------------------------------------
# velodyne


def read_velodyne_bin(data: bytes, source: str = "<velodyne>") -> np.ndarray:
    if len(data) % 16:
        raise FormatError(f"{len(data)} bytes is not a whole number of 16-byte points (truncated file?)", source, field="length")
    return np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)


def write_velodyne_bin(points: np.ndarray) -> bytes:
    pts = np.asarray(points)
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise ValueError(f"velodyne points must be N x 4, got {pts.shape}")
    return pts.astype("<f4").tobytes()


# --------------------------------------------------------------------------
# stereo proposals


@dataclass(frozen=True)
class StereoProposal:
    frame: str
    left: tuple[float, float, float, float]
    right: tuple[float, float, float, float]
    z_near: float
    z_far: float
    score: float


_PROPOSAL_FIELDS = ["frame", "left_u_min", "left_v_min", "left_u_max", "left_v_max", "right_u_min", "right_v_min",
                    "right_u_max", "right_v_max", "z_near", "z_far", "score"]


def load_proposals(text: str, source: str = "<proposals>") -> dict[str, list[StereoProposal]]:
    """Stereo proposals grouped by frame, in file order."""
    out: dict[str, list[StereoProposal]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        toks = line.split()
        if not toks or toks[0].startswith("#"):
            continue
        if len(toks) != 12:
            raise FormatError(f"expected 12 fields, got {len(toks)}", source, lineno)
        v = [_float(t, source, lineno, name) for t, name in zip(toks[1:], _PROPOSAL_FIELDS[1:])]
        left, right = tuple(v[0:4]), tuple(v[4:8])
        for name, b in (("left", left), ("right", right)):
            if not (b[0] < b[2] and b[1] < b[3]):
                raise FormatError(f"{name} box is inverted or empty", source, lineno, name)
        if not 0 < v[8] < v[9]:
            raise FormatError(f"need 0 < z_near < z_far, got {v[8]}, {v[9]}", source, lineno, "z_near")
        out.setdefault(toks[0], []).append(StereoProposal(toks[0], left, right, v[8], v[9], v[10]))
    return out


def write_proposals(proposals: Iterable[StereoProposal]) -> str:
    return "".join(
        " ".join([p.frame, *map(_fmt, p.left), *map(_fmt, p.right), _fmt(p.z_near), _fmt(p.z_far), _fmt(p.score)]) + "\n"
        for p in proposals
    )


# --------------------------------------------------------------------------
# checkpoints


def write_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    """``SRDL`` magic, u32 version, then per tensor: u32 name length, name,
    u32 rank, u32 dims, little-endian float64 data."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype=np.float64)
        enc = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(enc)) + enc)
        chunks.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.astype("<f8").tobytes())
    return b"".join(chunks)


def read_checkpoint(data: bytes, source: str = "<checkpoint>") -> dict[str, np.ndarray]:
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad magic bytes", source, field="magic")
    if len(data) < 8:
        raise FormatError("truncated header", source, field="version")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported version {version}", source, field="version")
    pos, out = 8, {}

    def take(n, what, name):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated while reading {what}", source, field=name)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (nlen,) = struct.unpack("<I", take(4, "name length", f"tensor {len(out)}"))
        try:
            name = take(nlen, "name", f"tensor {len(out)}").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", source, field=f"tensor {len(out)}") from None
        (rank,) = struct.unpack("<I", take(4, "rank", name))
        if rank > 8:
            raise FormatError(f"implausible rank {rank}", source, field=name)
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims", name))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(8 * count, "data", name), dtype="<f8").astype(np.float64).reshape(dims)
        if name in out:
            raise FormatError("duplicate tensor name", source, field=name)
        out[name] = arr
    return out


# --------------------------------------------------------------------------
# scene bundles


@dataclass
class SceneSample:
    frame: str
    points: np.ndarray  # N x 4 LIDAR frame
    calib: CameraCalib
    proposals: list[StereoProposal] = field(default_factory=list)
    labels: list[LabelRecord] = field(default_factory=list)


def load_scene(root: Path, frame: str, proposals: Sequence[StereoProposal] = ()) -> SceneSample:
    root = Path(root)
    vpath = root / "velodyne" / f"{frame}.bin"
    cpath = root / "calib" / f"{frame}.txt"
    lpath = root / "label_2" / f"{frame}.txt"
    points = read_velodyne_bin(vpath.read_bytes(), str(vpath))
    calib = parse_calib(cpath.read_text(), str(cpath))
    labels = parse_labels(lpath.read_text(), str(lpath)) if lpath.exists() else []
    return SceneSample(frame, points, calib, list(proposals), labels)


def list_frames(root: Path) -> list[str]:
    return sorted(p.stem for p in (Path(root) / "velodyne").glob("*.bin"))
