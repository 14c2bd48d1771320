"""Region, line and video metrics for instance lane masks.

Instances are compared by region, never by id: every metric first matches
predicted to ground-truth instances (maximum total IoU), so a consistent
relabeling of predicted ids leaves all scores unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, ShapeError, ValidationError


@dataclass
class InstanceMatching:
    pairs: list[tuple[int, int, float]]
    unmatched_pred: list[int]
    unmatched_gt: list[int]

    @property
    def n_pred(self) -> int:
        return len(self.pairs) + len(self.unmatched_pred)

    @property
    def n_gt(self) -> int:
        return len(self.pairs) + len(self.unmatched_gt)


@dataclass
class RegionScores:
    mIoU: float
    F1_05: float
    F1_08: float


@dataclass
class LineScores:
    accuracy: float
    FP: float
    FN: float


@dataclass
class VideoScores:
    M_J: float
    O_J: float
    M_F: float
    O_F: float
    M_T: float | None


def _labels(mask: np.ndarray) -> list[int]:
    """Instance labels ordered by their first pixel in raster order.

    Ordering by region rather than by id value keeps tie-breaking in the
    assignment independent of how instances happen to be numbered.
    """
    values, first = np.unique(np.asarray(mask).ravel(), return_index=True)
    return [int(values[i]) for i in np.argsort(first) if values[i] != 0]


def iou_matrix(pred: np.ndarray, gt: np.ndarray):
    """IoU between every predicted and every ground-truth instance."""
    pl, gl = _labels(pred), _labels(gt)
    ious = np.zeros((len(pl), len(gl)))
    for i, p in enumerate(pl):
        pm = pred == p
        for j, g in enumerate(gl):
            gm = gt == g
            inter = np.logical_and(pm, gm).sum()
            if inter:
                ious[i, j] = inter / np.logical_or(pm, gm).sum()
    return pl, gl, ious


def match_instances(pred: np.ndarray, gt: np.ndarray) -> InstanceMatching:
    """One-to-one assignment of instances maximizing total IoU.

    Pairs with zero overlap are discarded; pairs are sorted by gt label.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} differ in shape")
    pl, gl, ious = iou_matrix(pred, gt)
    pairs = []
    if ious.size:
        rows, cols = linear_sum_assignment(ious, maximize=True)
        pairs = [(pl[r], gl[c], float(ious[r, c])) for r, c in zip(rows, cols) if ious[r, c] > 0]
    pairs.sort(key=lambda p: p[1])
    mp = {p for p, _, _ in pairs}
    mg = {g for _, g, _ in pairs}
    return InstanceMatching(pairs, [p for p in pl if p not in mp], [g for g in gl if g not in mg])


def _f1(tp: int, n_pred: int, n_gt: int) -> float:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gt if n_gt else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def region_metrics(matchings: Sequence[InstanceMatching]) -> RegionScores:
    """mIoU and F1 at IoU thresholds 0.5 / 0.8, pooled over all frames.

    mIoU averages matched IoUs over all ground-truth instances; missed
    instances count as 0. A frame set with no instances on either side
    scores 1.
    """
    if not matchings:
        raise ValidationError("region_metrics needs at least one frame")
    n_gt = sum(m.n_gt for m in matchings)
    n_pred = sum(m.n_pred for m in matchings)
    ious = [iou for m in matchings for _, _, iou in m.pairs]
    if n_gt == 0:
        v = 1.0 if n_pred == 0 else 0.0
        return RegionScores(v, v, v)
    miou = sum(ious) / n_gt
    f05 = _f1(sum(i > 0.5 for i in ious), n_pred, n_gt)
    f08 = _f1(sum(i > 0.8 for i in ious), n_pred, n_gt)
    return RegionScores(miou, f05, f08)


# -- lines -----------------------------------------------------------------

def mask_to_line(mask: np.ndarray, label: int, row_stride: int = 10,
                 row_offset: int = 0) -> np.ndarray:
    """Centerline points (x, y) of one instance, one per sampled row.

    Rows ``row_offset, row_offset + row_stride, ...`` that contain the label
    yield x = mean column of the label's pixels in that row.
    """
    rows = np.arange(row_offset, mask.shape[0], row_stride)
    pts = []
    for y in rows:
        cols = np.flatnonzero(mask[y] == label)
        if cols.size:
            pts.append((cols.mean(), float(y)))
    return np.asarray(pts, dtype=np.float64).reshape(-1, 2)


def mask_to_lines(mask: np.ndarray, row_stride: int = 10, row_offset: int = 0) -> dict[int, np.ndarray]:
    return {lab: mask_to_line(mask, lab, row_stride, row_offset) for lab in _labels(mask)}


def _correct_points(pred: np.ndarray, gt: np.ndarray, threshold: float) -> int:
    if len(pred) == 0 or len(gt) == 0:
        return 0
    px = dict(zip(pred[:, 1].tolist(), pred[:, 0].tolist()))
    return sum(1 for x, y in gt.tolist() if y in px and abs(px[y] - x) < threshold)


@dataclass
class _LineCounts:
    correct: int = 0
    gt_points: int = 0
    fp: int = 0
    fn: int = 0
    n_pred: int = 0
    n_gt: int = 0


def _frame_line_counts(pred: Mapping[int, np.ndarray], gt: Mapping[int, np.ndarray],
                       threshold: float, gate: float) -> _LineCounts:
    # order lanes by their first point so ties resolve independently of ids
    pk = sorted((k for k, v in pred.items() if len(v)), key=lambda k: tuple(pred[k][0][::-1]))
    gk = sorted((k for k, v in gt.items() if len(v)), key=lambda k: tuple(gt[k][0][::-1]))
    c = _LineCounts(n_pred=len(pk), n_gt=len(gk),
                    gt_points=sum(len(gt[k]) for k in gk))
    if not pk or not gk:
        c.fp, c.fn = len(pk), len(gk)
        return c
    hits = np.array([[_correct_points(pred[p], gt[g], threshold) for g in gk] for p in pk])
    acc = hits / np.array([len(gt[g]) for g in gk])[None, :]
    rows, cols = linear_sum_assignment(acc, maximize=True)
    matched_pred, matched_gt = set(), set()
    for r, k in zip(rows, cols):
        c.correct += int(hits[r, k])
        if acc[r, k] >= gate:
            matched_pred.add(r)
            matched_gt.add(k)
    c.fp = len(pk) - len(matched_pred)
    c.fn = len(gk) - len(matched_gt)
    return c


def line_metrics(pred_lines: Sequence[Mapping[int, np.ndarray]],
                 gt_lines: Sequence[Mapping[int, np.ndarray]],
                 threshold: float = 20.0, lane_acc_gate: float = 0.85) -> LineScores:
    """Point accuracy and lane-level FP / FN over a set of frames.

    Each frame maps instance id -> (n, 2) points sampled on shared rows.
    Predicted and gt lanes are paired to maximize per-lane accuracy; a pair
    below ``lane_acc_gate`` leaves both its lanes unmatched. Unmatched
    predictions are false positives, unmatched gt lanes false negatives.
    """
    if threshold <= 0:
        raise ConfigError(f"line threshold must be positive, got {threshold}")
    if len(pred_lines) != len(gt_lines):
        raise ValidationError("pred and gt line sequences differ in length")
    tot = _LineCounts()
    for p, g in zip(pred_lines, gt_lines):
        c = _frame_line_counts(p, g, threshold, lane_acc_gate)
        for f in ("correct", "gt_points", "fp", "fn", "n_pred", "n_gt"):
            setattr(tot, f, getattr(tot, f) + getattr(c, f))
    if tot.gt_points == 0:
        accuracy = 1.0 if tot.n_pred == 0 else 0.0
    else:
        accuracy = tot.correct / tot.gt_points
    fp = tot.fp / tot.n_pred if tot.n_pred else 0.0
    fn = tot.fn / tot.n_gt if tot.n_gt else 0.0
    return LineScores(accuracy, fp, fn)


# -- boundaries ------------------------------------------------------------

def mask_boundary(binary: np.ndarray) -> np.ndarray:
    """Pixels of ``binary`` with a 4-neighbour outside it; the frame edge is not a transition."""
    binary = np.asarray(binary, dtype=bool)
    padded = np.pad(binary, 1, mode="edge")
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return binary & ~interior


def boundary_tolerance_px(shape, tolerance: float = 0.008) -> float:
    """Pixel radius: fractions (< 1) of the image diagonal are rounded up."""
    if tolerance < 1:
        return float(np.ceil(tolerance * np.hypot(*shape)))
    return float(tolerance)


def _binary_f(pred_b: np.ndarray, gt_b: np.ndarray, radius: float) -> float:
    np_, ng = pred_b.sum(), gt_b.sum()
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    dist_to_gt = ndimage.distance_transform_edt(~gt_b)
    dist_to_pred = ndimage.distance_transform_edt(~pred_b)
    precision = (dist_to_gt[pred_b] <= radius).mean()
    recall = (dist_to_pred[gt_b] <= radius).mean()
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def boundary_f_measure(pred: np.ndarray, gt: np.ndarray, tolerance: float = 0.008,
                       tolerance_px: float | None = None,
                       matching: InstanceMatching | None = None) -> float:
    """Mean boundary F over instances present in either mask.

    Instances are paired by ``match_instances``; each pair is scored on its
    boundaries within the pixel tolerance (``tolerance_px`` or the given
    fraction of the diagonal), unpaired instances score 0. Two empty masks
    score 1.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} differ in shape")
    radius = tolerance_px if tolerance_px is not None else boundary_tolerance_px(gt.shape, tolerance)
    m = matching or match_instances(pred, gt)
    n = len(m.pairs) + len(m.unmatched_pred) + len(m.unmatched_gt)
    if n == 0:
        return 1.0
    total = sum(_binary_f(mask_boundary(pred == p), mask_boundary(gt == g), radius)
                for p, g, _ in m.pairs)
    return float(total / n)


# -- video -----------------------------------------------------------------

def frame_jaccard(m: InstanceMatching) -> float:
    """Instance-averaged IoU of one frame; unmatched instances on either side count 0."""
    n = len(m.pairs) + len(m.unmatched_pred) + len(m.unmatched_gt)
    return 1.0 if n == 0 else sum(iou for _, _, iou in m.pairs) / n


def video_metrics(pred_seqs: Sequence[np.ndarray], gt_seqs: Sequence[np.ndarray],
                  tolerance: float = 0.008, per_frame_recall: bool = False) -> VideoScores:
    """Mean (M) and recall above 0.5 (O) of region J and boundary F, plus a temporal proxy.

    M_T is the mean boundary agreement between consecutive predicted frames;
    it is None when no sequence has two frames.
    """
    if len(pred_seqs) != len(gt_seqs) or not gt_seqs:
        raise ValidationError("need equally many (>= 1) predicted and gt sequences")
    js, fs, ts, frame_js, frame_fs = [], [], [], [], []
    for pred, gt in zip(pred_seqs, gt_seqs):
        if len(pred) != len(gt):
            raise ValidationError("predicted and gt sequences are not aligned")
        fj, ff = [], []
        for p, g in zip(pred, gt):
            m = match_instances(p, g)
            fj.append(frame_jaccard(m))
            ff.append(boundary_f_measure(p, g, tolerance, matching=m))
        js.append(np.mean(fj))
        fs.append(np.mean(ff))
        frame_js += fj
        frame_fs += ff
        if len(pred) >= 2:
            ts.append(np.mean([boundary_f_measure(pred[i], pred[i + 1], tolerance)
                               for i in range(len(pred) - 1)]))
    rj, rf = (frame_js, frame_fs) if per_frame_recall else (js, fs)
    return VideoScores(
        M_J=float(np.mean(js)), O_J=float(np.mean(np.asarray(rj) > 0.5)),
        M_F=float(np.mean(fs)), O_F=float(np.mean(np.asarray(rf) > 0.5)),
        M_T=float(np.mean(ts)) if ts else None)


# -- reports ---------------------------------------------------------------

@dataclass
class MetricReport:
    region: RegionScores
    line: LineScores
    video: VideoScores
    sequences: list[dict] = field(default_factory=list)
    name: str = "model"

    def aggregate(self) -> dict:
        return {"mIoU": self.region.mIoU, "F1_05": self.region.F1_05, "F1_08": self.region.F1_08,
                "accuracy": self.line.accuracy, "FP": self.line.FP, "FN": self.line.FN,
                "M_J": self.video.M_J, "O_J": self.video.O_J, "M_F": self.video.M_F,
                "O_F": self.video.O_F, "M_T": self.video.M_T}

    def to_records(self) -> list[dict]:
        return self.sequences + [{"sequence": "__aggregate__", "name": self.name,
                                  **self.aggregate()}]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.to_records():
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def read_aggregate(cls, path) -> dict:
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                if rec.get("sequence") == "__aggregate__":
                    return rec
        raise ValidationError(f"{path}: no aggregate record")


def _fmt(v) -> str:
    return "  -  " if v is None else f"{v:.3f}"


def format_table(rows: Sequence[dict]) -> str:
    """Image-level (region | line) and video-level tables, one row per named report."""
    w = max([len("Method")] + [len(str(r.get("name", ""))) for r in rows])
    img = ["mIoU", "F1_05", "F1_08", "accuracy", "FP", "FN"]
    vid = ["M_J", "O_J", "M_F", "O_F", "M_T"]
    out = [f"{'':{w}} | {'Region':^19} | {'Line':^19}",
           f"{'Method':{w}} | mIoU  F1^0.5 F1^0.8 | Acc   FP    FN",
           "-" * (w + 46)]
    for r in rows:
        v = [_fmt(r.get(k)) for k in img]
        out.append(f"{str(r.get('name', '')):{w}} | {v[0]} {v[1]}  {v[2]}  | {v[3]} {v[4]} {v[5]}")
    out += ["", f"{'Method':{w}} | M_J   O_J   M_F   O_F   M_T(proxy)", "-" * (w + 40)]
    for r in rows:
        out.append(f"{str(r.get('name', '')):{w}} | " + " ".join(_fmt(r.get(k)) for k in vid))
    return "\n".join(out)


def evaluate_sequences(pred_seqs: Sequence[np.ndarray], gt_seqs: Sequence[np.ndarray],
                       names: Sequence[str] | None = None, row_stride: int = 10,
                       line_threshold: float = 20.0, lane_acc_gate: float = 0.85,
                       tolerance: float = 0.008, name: str = "model") -> MetricReport:
    """Full metric report for aligned (T, H, W) prediction and gt sequences."""
    if not gt_seqs:
        raise ValidationError("no sequences to evaluate")
    names = list(names) if names is not None else [f"seq{i}" for i in range(len(gt_seqs))]
    all_matchings, all_pl, all_gl, records = [], [], [], []
    for seq_name, pred, gt in zip(names, pred_seqs, gt_seqs):
        if np.shape(pred) != np.shape(gt):
            raise ShapeError(f"{seq_name}: prediction shape {np.shape(pred)} != gt {np.shape(gt)}")
        ms = [match_instances(p, g) for p, g in zip(pred, gt)]
        pl = [mask_to_lines(p, row_stride) for p in pred]
        gl = [mask_to_lines(g, row_stride) for g in gt]
        reg = region_metrics(ms)
        lin = line_metrics(pl, gl, line_threshold, lane_acc_gate)
        vid = video_metrics([pred], [gt], tolerance)
        records.append({"sequence": seq_name, "mIoU": reg.mIoU, "F1_05": reg.F1_05,
                        "F1_08": reg.F1_08, "accuracy": lin.accuracy, "FP": lin.FP,
                        "FN": lin.FN, "J": vid.M_J, "F": vid.M_F, "T": vid.M_T})
        all_matchings += ms
        all_pl += pl
        all_gl += gl
    return MetricReport(region_metrics(all_matchings),
                        line_metrics(all_pl, all_gl, line_threshold, lane_acc_gate),
                        video_metrics(pred_seqs, gt_seqs, tolerance), records, name)


def evaluate_clips(model, clips, seed: int = 0, stage: int = 2, name: str = "model") -> MetricReport:
    from .training import predict_clip
    preds = [predict_clip(model, c, seed=seed, stage=stage) for c in clips]
    return evaluate_sequences(preds, [c.masks for c in clips], [c.name for c in clips], name=name)
