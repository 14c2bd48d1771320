"""Point-group lane annotations: parsing, cubic fitting and mask rasterization.

Canonical per-frame annotation file::

    {"frame": 0,
     "lanes": [{"id": 1, "line_type": 0, "points": [[x, y], ...]}, ...],
     "scenarios": [0, 3]}          # optional, passed through to stats

Lane ids are ego-relative position labels: ``2i - 1`` is the i-th lane to
the left of the vehicle and ``2i`` the i-th lane to the right, ``i <= 4``.
An instance mask is a ``(H, W)`` ``uint8`` array holding those labels, with
0 for background.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateGeometryError, FrameError, ParseError, ValidationError

MAX_LABEL = 8
NUM_LINE_TYPES = 10
NUM_SCENARIOS = 10
REFERENCE_HEIGHT = 1080
REFERENCE_WIDTH_PX = 30


class LineType(enum.IntEnum):
    SINGLE_WHITE_SOLID = 0
    SINGLE_WHITE_DOTTED = 1
    SINGLE_YELLOW_SOLID = 2
    SINGLE_YELLOW_DOTTED = 3
    DOUBLE_WHITE_SOLID = 4
    DOUBLE_YELLOW_SOLID = 5
    DOUBLE_YELLOW_DOTTED = 6
    DOUBLE_WHITE_SOLID_DOTTED = 7
    DOUBLE_WHITE_DOTTED_SOLID = 8
    DOUBLE_SOLID_WHITE_YELLOW = 9

    @property
    def is_yellow(self) -> bool:
        return self in (2, 3, 5, 6, 9)

    @property
    def is_dotted(self) -> bool:
        return self in (1, 3, 6)


@dataclass
class ControlPointSet:
    """Center-line points of one lane in one frame, sorted by increasing y."""

    points: np.ndarray
    lane_id: int
    line_type: LineType = LineType.SINGLE_WHITE_SOLID

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValidationError(f"lane {self.lane_id}: points must be an (n, 2) array")
        if len(pts) < 4:
            raise ValidationError(
                f"lane {self.lane_id}: a cubic needs at least 4 points, got {len(pts)}")
        if not np.all(np.isfinite(pts)):
            raise ValidationError(f"lane {self.lane_id}: non-finite point coordinates")
        if not 1 <= int(self.lane_id) <= MAX_LABEL:
            raise ValidationError(f"lane_id {self.lane_id} outside 1..{MAX_LABEL}")
        self.lane_id = int(self.lane_id)
        try:
            self.line_type = LineType(int(self.line_type))
        except ValueError:
            raise ValidationError(f"line_type {self.line_type} outside 0..{NUM_LINE_TYPES - 1}")
        self.points = pts[np.argsort(pts[:, 1], kind="stable")]

    def check_monotonic(self) -> None:
        if np.any(np.diff(self.points[:, 1]) <= 0):
            raise ValidationError(f"lane {self.lane_id}: repeated y coordinate in point group")

    def check_bounds(self, frame_size: tuple[int, int]) -> None:
        w, h = frame_size
        x, y = self.points[:, 0], self.points[:, 1]
        if np.any((x < 0) | (x > w - 1) | (y < 0) | (y > h - 1)):
            raise ValidationError(f"lane {self.lane_id}: point outside {w}x{h} frame")

    def to_json(self) -> dict:
        return {"id": self.lane_id, "line_type": int(self.line_type),
                "points": self.points.tolist()}


@dataclass(frozen=True)
class LanePolynomial:
    """x(y) = a0 + a1*y + a2*y**2 + a3*y**3, valid on ``y_range``.

    ``coeffs`` are the raw power-basis coefficients. A fit also keeps its
    coefficients in the normalized variable ``(y - center) / scale``, which
    evaluates far more accurately on large frames.
    """

    coeffs: tuple[float, float, float, float]
    y_range: tuple[float, float]
    normalized: tuple[float, float, tuple[float, ...]] | None = None

    def __call__(self, y):
        y = np.asarray(y, dtype=np.float64)
        lo, hi = self.y_range
        if np.any((y < lo - 1e-9) | (y > hi + 1e-9)):
            raise ValueError(f"y outside fitted range [{lo}, {hi}]")
        if self.normalized is not None:
            center, scale, b = self.normalized
            s = (y - center) / scale
            return b[0] + s * (b[1] + s * (b[2] + s * b[3]))
        a0, a1, a2, a3 = self.coeffs
        return a0 + y * (a1 + y * (a2 + y * a3))


@dataclass
class DatasetStats:
    frames_per_lane_count: np.ndarray = field(
        default_factory=lambda: np.zeros(MAX_LABEL + 1, dtype=np.int64))
    line_type_counts: np.ndarray = field(
        default_factory=lambda: np.zeros(NUM_LINE_TYPES, dtype=np.int64))
    scenario_counts: np.ndarray = field(
        default_factory=lambda: np.zeros(NUM_SCENARIOS, dtype=np.int64))
    n_videos: int = 0
    n_frames: int = 0

    def to_json(self) -> dict:
        return {
            "n_videos": self.n_videos,
            "n_frames": self.n_frames,
            "frames_per_lane_count": self.frames_per_lane_count.tolist(),
            "line_type_counts": self.line_type_counts.tolist(),
            "scenario_counts": self.scenario_counts.tolist(),
        }


# -- parsing ---------------------------------------------------------------

def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(f"{where}: missing key '{key}'")
    return obj[key]


def _parse_frame(obj, where: str, frame_size=None) -> tuple[int, list[ControlPointSet]]:
    frame = _require(obj, "frame", where)
    if not isinstance(frame, int) or isinstance(frame, bool) or frame < 0:
        raise ParseError(f"{where}: key 'frame' must be a non-negative int")
    lanes = _require(obj, "lanes", where)
    if not isinstance(lanes, list):
        raise ParseError(f"{where}: key 'lanes' must be a list")
    out: list[ControlPointSet] = []
    seen: set[int] = set()
    for i, lane in enumerate(lanes):
        lw = f"{where}: lanes[{i}]"
        lane_id = _require(lane, "id", lw)
        line_type = _require(lane, "line_type", lw)
        points = _require(lane, "points", lw)
        if not isinstance(lane_id, int) or isinstance(lane_id, bool):
            raise ParseError(f"{lw}: key 'id' must be an int")
        if not isinstance(line_type, int) or isinstance(line_type, bool):
            raise ParseError(f"{lw}: key 'line_type' must be an int")
        if not isinstance(points, list) or not all(
                isinstance(p, (list, tuple)) and len(p) == 2 for p in points):
            raise ParseError(f"{lw}: key 'points' must be a list of [x, y] pairs")
        if lane_id in seen:
            raise ValidationError(f"{where}: duplicate lane id {lane_id} in frame {frame}")
        seen.add(lane_id)
        cps = ControlPointSet(np.asarray(points, dtype=np.float64), lane_id, line_type)
        cps.check_monotonic()
        if frame_size is not None:
            cps.check_bounds(frame_size)
        out.append(cps)
    return frame, out


def parse_annotation_file(path, frame_size=None) -> list[tuple[int, list[ControlPointSet]]]:
    """Parse a canonical annotation file.

    The file holds either one frame object or a list of them. Returns
    ``[(frame_index, [ControlPointSet, ...]), ...]``; points are sorted by
    increasing y. If ``frame_size=(W, H)`` is given, points are also checked
    against the frame bounds.
    """
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    frames = obj if isinstance(obj, list) else [obj]
    return [_parse_frame(f, str(path), frame_size) for f in frames]


def write_annotation_file(path, frame_index: int, lanes: Iterable[ControlPointSet],
                          scenarios: Sequence[int] | None = None) -> None:
    obj = {"frame": int(frame_index), "lanes": [c.to_json() for c in lanes]}
    if scenarios:
        obj["scenarios"] = [int(s) for s in scenarios]
    Path(path).write_text(json.dumps(obj))


def import_vil100_record(obj: dict, frame_index: int) -> dict:
    """Map one released VIL-100 per-frame JSON record onto the canonical form.

    The released files keep lanes under ``annotations.lane``; each lane has a
    ``lane_id`` (position label), an ``attribute`` (line type, 1-based) and
    ``points``. Lanes with fewer than two points are dropped.
    """
    lanes = []
    for lane in obj.get("annotations", {}).get("lane", []) or []:
        pts = lane.get("points") or []
        if len(pts) < 2:
            continue
        lanes.append({
            "id": int(lane.get("lane_id", lane.get("id"))),
            "line_type": max(0, int(lane.get("attribute", 1)) - 1),
            "points": [[float(p[0]), float(p[1])] for p in pts],
        })
    return {"frame": frame_index, "lanes": lanes}


# -- geometry --------------------------------------------------------------

def fit_lane_polynomial(pts: ControlPointSet | np.ndarray) -> LanePolynomial:
    """Unweighted least-squares cubic x(y) through the control points."""
    points = pts.points if isinstance(pts, ControlPointSet) else np.asarray(pts, dtype=np.float64)
    x, y = points[:, 0], points[:, 1]
    if len(np.unique(y)) < 4:
        raise DegenerateGeometryError(
            f"cubic fit needs 4 distinct y values, got {len(np.unique(y))}")
    # fit in a normalized variable; raw powers of y reach 1e9 on HD frames
    center = 0.5 * (y.max() + y.min())
    scale = 0.5 * (y.max() - y.min())
    s = (y - center) / scale
    vander = np.vander(s, 4, increasing=True)
    if np.linalg.matrix_rank(vander) < 4:
        raise DegenerateGeometryError("rank-deficient cubic fit")
    b, *_ = np.linalg.lstsq(vander, x, rcond=None)
    raw = np.polynomial.Polynomial(b)(np.polynomial.Polynomial([-center / scale, 1.0 / scale]))
    coeffs = np.zeros(4)
    coeffs[: len(raw.coef)] = raw.coef
    if not np.all(np.isfinite(coeffs)):
        raise DegenerateGeometryError("non-finite polynomial coefficients")
    return LanePolynomial(tuple(float(c) for c in coeffs), (float(y.min()), float(y.max())),
                          (float(center), float(scale), tuple(float(c) for c in b)))


def lane_width_px(height: int, reference_height: int = REFERENCE_HEIGHT,
                  reference_width: int = REFERENCE_WIDTH_PX) -> int:
    """Lane band width for a frame of ``height`` rows, scaled from the reference.

    Rounds half up and never goes below 2 px (the formula alone would give 0
    or 1 px bands below ~54 rows).
    """
    return max(2, math.floor(reference_width * height / reference_height + 0.5))


def rasterize_lane(poly: LanePolynomial, label: int, frame_size: tuple[int, int],
                   out: np.ndarray | None = None, width: int | None = None) -> np.ndarray:
    """Draw a fixed-width band around ``poly`` into ``out`` (created if None).

    Each row y in the polynomial's range gets columns
    ``ceil(x(y) - w/2) .. ceil(x(y) - w/2) + w - 1`` set to ``label``,
    clipped to the frame. Existing labels are overwritten.
    """
    if not 1 <= int(label) <= MAX_LABEL:
        raise ValidationError(f"label {label} outside 1..{MAX_LABEL}")
    w, h = frame_size
    if w <= 0 or h <= 0:
        raise ValidationError(f"frame size must be positive, got {frame_size}")
    if out is None:
        out = np.zeros((h, w), dtype=np.uint8)
    width = lane_width_px(h) if width is None else width
    y0 = max(0, math.ceil(poly.y_range[0] - 1e-9))
    y1 = min(h - 1, math.floor(poly.y_range[1] + 1e-9))
    if y1 < y0:
        return out
    rows = np.arange(y0, y1 + 1)
    xs = poly(rows)
    starts = np.ceil(xs - width / 2.0 - 1e-9).astype(np.int64)
    for r, s in zip(rows, starts):
        a, b = max(0, s), min(w, s + width)
        if a < b:
            out[r, a:b] = label
    return out


def frames_to_instance_masks(annotations: Sequence[tuple[int, Sequence[ControlPointSet]]],
                             frame_size: tuple[int, int],
                             n_frames: int | None = None) -> list[np.ndarray]:
    """Compose per-frame instance masks; frames without lanes stay all zero.

    Lanes are drawn in ascending id order so the higher id wins on overlap.
    """
    w, h = frame_size
    by_frame = {int(i): lanes for i, lanes in annotations}
    if n_frames is None:
        n_frames = max(by_frame, default=-1) + 1
    masks = []
    for i in range(n_frames):
        mask = np.zeros((h, w), dtype=np.uint8)
        try:
            for cps in sorted(by_frame.get(i, ()), key=lambda c: c.lane_id):
                rasterize_lane(fit_lane_polynomial(cps), cps.lane_id, frame_size, out=mask)
        except ValidationError as exc:
            raise FrameError(i, exc) from exc
        masks.append(mask)
    return masks


# -- statistics ------------------------------------------------------------

def _iter_frame_records(root: Path):
    """Yield (video, frame_obj) pairs from either supported layout."""
    native = root / "Json"
    if native.is_dir():
        for video in sorted(p for p in native.iterdir() if p.is_dir()):
            for i, f in enumerate(sorted(video.glob("*.json"))):
                yield video.name, import_vil100_record(json.loads(f.read_text()), i)
        return
    for video in sorted(p for p in root.iterdir() if p.is_dir()):
        anno = video / "anno"
        if not anno.is_dir():
            raise FileNotFoundError(f"{video}: missing annotation directory 'anno'")
        for f in sorted(anno.glob("*.json")):
            obj = json.loads(f.read_text())
            for rec in obj if isinstance(obj, list) else [obj]:
                yield video.name, rec


def compute_dataset_stats(root) -> DatasetStats:
    """Lane-count, line-type and scenario histograms over a dataset tree.

    Accepts the canonical ``root/<video>/anno/*.json`` layout and the
    released VIL-100 ``root/Json/<video>/*.json`` layout.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    stats = DatasetStats()
    videos = set()
    for video, rec in _iter_frame_records(root):
        videos.add(video)
        lanes = rec.get("lanes", [])
        stats.n_frames += 1
        stats.frames_per_lane_count[min(len(lanes), MAX_LABEL)] += 1
        for lane in lanes:
            t = int(lane.get("line_type", 0))
            if 0 <= t < NUM_LINE_TYPES:
                stats.line_type_counts[t] += 1
        for s in rec.get("scenarios", []) or []:
            if 0 <= int(s) < NUM_SCENARIOS:
                stats.scenario_counts[int(s)] += 1
    stats.n_videos = len(videos)
    return stats
