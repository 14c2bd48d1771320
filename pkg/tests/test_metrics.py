import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mmalane import annotation as ag
from mmalane.data import SyntheticSceneConfig, generate_synthetic_clip
from mmalane.errors import ConfigError, ValidationError
from mmalane.metrics import (MetricReport, boundary_f_measure, evaluate_sequences, format_table,
                             line_metrics, mask_boundary, mask_to_line, mask_to_lines,
                             match_instances, region_metrics, video_metrics)


def rect(shape, *boxes):
    """Label map with box k (r0, r1, c0, c1, inclusive) painted as label k + 1."""
    m = np.zeros(shape, np.uint8)
    for k, (r0, r1, c0, c1) in enumerate(boxes):
        m[r0:r1 + 1, c0:c1 + 1] = k + 1
    return m


def relabel(mask, mapping):
    out = np.zeros_like(mask)
    for a, b in mapping.items():
        out[mask == a] = b
    return out


# -- oracles ---------------------------------------------------------------

def exhaustive_matching(pred, gt, all_optima=False):
    """Best total-IoU partial assignment by enumerating every injection.

    With ``all_optima`` the set of every optimal (zero-IoU-pruned) pairing
    is returned instead, since ties admit several correct answers.
    """
    pl = [int(v) for v in np.unique(pred) if v]
    gl = [int(v) for v in np.unique(gt) if v]
    iou = {}
    for p in pl:
        for g in gl:
            inter = int(np.logical_and(pred == p, gt == g).sum())
            union = int(np.logical_or(pred == p, gt == g).sum())
            iou[p, g] = inter / union if inter else 0.0
    best, best_pairs, optima = -1.0, [], set()
    small, large = (pl, gl) if len(pl) <= len(gl) else (gl, pl)
    for perm in itertools.permutations(large, len(small)):
        pairs = [(a, b) if small is pl else (b, a) for a, b in zip(small, perm)]
        total = sum(iou[p] for p in pairs)
        kept = frozenset(p for p in pairs if iou[p] > 0)
        if total > best + 1e-12:
            best, best_pairs, optima = total, pairs, {kept}
        elif abs(total - best) <= 1e-12:
            optima.add(kept)
    if all_optima:
        return optima
    pairs = sorted(((p, g, iou[p, g]) for p, g in best_pairs if iou[p, g] > 0), key=lambda x: x[1])
    return pairs, len(pl), len(gl)


def oracle_region(frames):
    ious, n_pred, n_gt = [], 0, 0
    for pred, gt in frames:
        pairs, npd, ng = exhaustive_matching(pred, gt)
        ious += [i for _, _, i in pairs]
        n_pred += npd
        n_gt += ng

    def f1(tau):
        tp = sum(i > tau for i in ious)
        p, r = tp / n_pred if n_pred else 0.0, tp / n_gt
        return 2 * p * r / (p + r) if p + r else 0.0

    return sum(ious) / n_gt, f1(0.5), f1(0.8)


def brute_boundary_f(pred_b, gt_b, radius):
    pp, gp = np.argwhere(pred_b), np.argwhere(gt_b)

    def hit(a, b):
        return sum(any(np.hypot(*(x - y)) <= radius for y in b) for x in a) / len(a)

    p, r = hit(pp, gp), hit(gp, pp)
    return 2 * p * r / (p + r) if p + r else 0.0


# -- matching --------------------------------------------------------------

def test_match_identity():
    m = rect((8, 8), (0, 3, 0, 1), (4, 7, 5, 6))
    assert match_instances(m, m).pairs == [(1, 1, 1.0), (2, 2, 1.0)]


def test_match_missing_prediction():
    gt = rect((8, 8), (0, 3, 0, 1), (4, 7, 5, 6))
    pred = rect((8, 8), (0, 3, 0, 1))
    m = match_instances(pred, gt)
    assert m.pairs == [(1, 1, 1.0)] and m.unmatched_gt == [2] and m.unmatched_pred == []


def test_match_drops_zero_overlap():
    gt = rect((8, 8), (0, 1, 0, 1))
    pred = rect((8, 8), (5, 6, 5, 6))
    m = match_instances(pred, gt)
    assert m.pairs == [] and m.unmatched_pred == [1] and m.unmatched_gt == [1]


@pytest.mark.parametrize("seed", range(30))
def test_match_small_random_exhaustive(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.integers(0, 3, (3, 3)), rng.integers(0, 3, (3, 3))
    pairs, _, _ = exhaustive_matching(pred, gt)
    got = match_instances(pred, gt).pairs
    assert sum(i for _, _, i in got) == pytest.approx(sum(i for _, _, i in pairs), abs=1e-12)
    assert frozenset((p, g) for p, g, _ in got) in exhaustive_matching(pred, gt, all_optima=True)


# -- region ----------------------------------------------------------------

def test_region_perfect():
    m = rect((8, 8), (0, 3, 0, 1), (4, 7, 5, 6))
    assert region_metrics([match_instances(m, m)]).__dict__ == dict(mIoU=1.0, F1_05=1.0, F1_08=1.0)


def test_region_all_background():
    gt = rect((8, 8), (0, 3, 0, 1))
    s = region_metrics([match_instances(np.zeros_like(gt), gt)])
    assert (s.mIoU, s.F1_05, s.F1_08) == (0, 0, 0)


def test_region_hand_counted_iou_06():
    gt = np.zeros((8, 8), np.uint8)
    gt[0:2, 0:4] = 1             # 8 pixels
    pred = np.zeros_like(gt)
    pred[0:2, 1:5] = 1           # 8 pixels, 6 shared, union 10
    s = region_metrics([match_instances(pred, gt)])
    assert s.mIoU == pytest.approx(0.6, abs=1e-12)
    assert (s.F1_05, s.F1_08) == (1.0, 0.0)


def test_region_empty_frame_set():
    with pytest.raises(ValidationError):
        region_metrics([])


def random_two_instance(rng, shape=(16, 32)):
    """Two random overlapping rectangles; the second paints over the first."""
    m = np.zeros(shape, np.uint8)
    for lab in (1, 2):
        r0, c0 = rng.integers(0, shape[0] - 2), rng.integers(0, shape[1] - 2)
        r1, c1 = rng.integers(r0 + 1, shape[0]), rng.integers(c0 + 1, shape[1])
        m[r0:r1 + 1, c0:c1 + 1] = lab
    return m


def test_region_matches_exhaustive_oracle_50_frames():
    rng = np.random.default_rng(2024)
    frames = [(random_two_instance(rng), random_two_instance(rng)) for _ in range(50)]
    s = region_metrics([match_instances(p, g) for p, g in frames])
    assert (s.mIoU, s.F1_05, s.F1_08) == oracle_region(frames)
    for p, g in frames:
        single = region_metrics([match_instances(p, g)])
        assert (single.mIoU, single.F1_05, single.F1_08) == oracle_region([(p, g)])


# -- lines -----------------------------------------------------------------

def test_mask_to_line_vertical_band():
    poly = ag.LanePolynomial((100.0, 0, 0, 0), (0.0, 1079.0))
    mask = ag.rasterize_lane(poly, 1, (1920, 1080))
    pts = mask_to_line(mask, 1)
    assert len(pts) == 108
    assert np.all(np.abs(pts[:, 0] - 100) <= 0.5)
    assert pts[:, 1].tolist() == list(range(0, 1080, 10))


def test_mask_to_line_absent_label():
    assert mask_to_line(np.zeros((20, 20), np.uint8), 3).shape == (0, 2)


def test_mask_to_line_recovers_generator_curve():
    clip = generate_synthetic_clip(SyntheticSceneConfig(seed=3, n_lanes=3, length=4,
                                                        frame_size=(512, 256)))
    width = ag.lane_width_px(256)
    checked = 0
    for (t, lanes), mask in zip(clip.annotations, clip.masks):
        for cps in lanes:
            poly = ag.fit_lane_polynomial(cps)
            for x, y in mask_to_line(mask, cps.lane_id, row_stride=1):
                # only rows where the band is whole (not clipped or overdrawn)
                if (mask[int(y)] == cps.lane_id).sum() != width:
                    continue
                assert abs(x - poly(y)) <= 1.0
                checked += 1
    assert checked > 500


def lines(*xs, rows=range(0, 100, 10)):
    return {k + 1: np.array([[x, y] for y in rows], float) for k, x in enumerate(xs)}


def test_line_identity():
    g = [lines(10, 50), lines(30)]
    s = line_metrics(g, g)
    assert (s.accuracy, s.FP, s.FN) == (1.0, 0.0, 0.0)


def test_line_no_predictions():
    s = line_metrics([{}], [lines(10, 50)])
    assert (s.accuracy, s.FP, s.FN) == (0.0, 0.0, 1.0)


def test_line_offset_25px():
    gt = lines(10, 100)
    pred = lines(10, 125)
    s = line_metrics([pred], [gt])
    assert s.accuracy == pytest.approx(0.5)
    assert s.FP == pytest.approx(0.5) and s.FN == pytest.approx(0.5)


def test_line_offset_below_threshold():
    s = line_metrics([lines(29.9)], [lines(10)])
    assert (s.accuracy, s.FP, s.FN) == (1.0, 0.0, 0.0)


@pytest.mark.parametrize("thr", [0, -1])
def test_line_threshold_must_be_positive(thr):
    with pytest.raises(ConfigError):
        line_metrics([lines(1)], [lines(1)], threshold=thr)


# -- boundaries ------------------------------------------------------------

def test_boundary_of_square_skips_frame_edge():
    m = np.ones((4, 4), bool)
    assert not mask_boundary(m).any()
    m = rect((6, 6), (1, 4, 1, 4)).astype(bool)
    assert mask_boundary(m).sum() == 12


def test_boundary_identical_and_empty():
    m = rect((32, 32), (8, 23, 8, 23))
    assert boundary_f_measure(m, m) == 1.0
    assert boundary_f_measure(np.zeros_like(m), m) == 0.0
    assert boundary_f_measure(np.zeros_like(m), np.zeros_like(m)) == 1.0


def test_boundary_one_pixel_shift():
    gt = rect((32, 32), (8, 23, 8, 23))
    pred = rect((32, 32), (8, 23, 9, 24))
    assert boundary_f_measure(pred, gt, tolerance_px=1) == 1.0
    f0 = boundary_f_measure(pred, gt, tolerance_px=0)
    assert f0 < 1
    oracle = brute_boundary_f(mask_boundary(pred == 1), mask_boundary(gt == 1), 0)
    assert f0 == pytest.approx(oracle, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_boundary_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    gt, pred = random_two_instance(rng), random_two_instance(rng)
    m = match_instances(pred, gt)
    n = len(m.pairs) + len(m.unmatched_pred) + len(m.unmatched_gt)
    for radius in (0, 1, 2.5):
        oracle = sum(brute_boundary_f(mask_boundary(pred == p), mask_boundary(gt == g), radius)
                     for p, g, _ in m.pairs) / n
        assert boundary_f_measure(pred, gt, tolerance_px=radius) == pytest.approx(oracle, abs=1e-12)


# -- video -----------------------------------------------------------------

def toy_sequence():
    gt = np.stack([rect((8, 8), (2, 5, 2, 3))] * 3)
    pred = gt.copy()
    pred[1] = rect((8, 8), (2, 5, 2, 2))
    pred[2] = 0
    return pred, gt


def test_video_toy_table_one_pixel():
    # J: 1, 4/8, 0 -> 0.5; F: 1, 1, 0 -> 2/3; T: F(p0,p1)=1, F(p1,p2)=0 -> 0.5
    pred, gt = toy_sequence()
    s = video_metrics([pred], [gt], tolerance=1)
    assert s.M_J == pytest.approx(0.5)
    assert s.O_J == 0.0
    assert s.M_F == pytest.approx(2 / 3)
    assert s.O_F == 1.0
    assert s.M_T == pytest.approx(0.5)


def test_video_toy_table_zero_tolerance():
    # frame 1: precision 4/4, recall 4/8 -> F = 2/3; T pair (p0, p1) likewise 2/3
    pred, gt = toy_sequence()
    s = video_metrics([pred], [gt], tolerance=0)
    assert s.M_F == pytest.approx((1 + 2 / 3 + 0) / 3)
    assert s.M_T == pytest.approx((2 / 3 + 0) / 2)


def test_video_perfect_static():
    gt = np.stack([rect((8, 8), (0, 3, 1, 2), (4, 7, 5, 6))] * 4)
    s = video_metrics([gt], [gt])
    assert (s.M_J, s.O_J, s.M_F, s.O_F, s.M_T) == (1.0, 1.0, 1.0, 1.0, 1.0)


def test_video_recall_counts_sequences():
    gt = np.stack([rect((8, 8), (0, 3, 1, 2))] * 3)
    s = video_metrics([gt, np.zeros_like(gt)], [gt, gt])
    assert s.O_J == 0.5 and s.O_F == 0.5


def test_video_single_frame_has_no_t():
    gt = rect((8, 8), (0, 3, 1, 2))[None]
    assert video_metrics([gt], [gt]).M_T is None


def test_video_per_frame_recall_flag():
    pred, gt = toy_sequence()
    s = video_metrics([pred], [gt], tolerance=1, per_frame_recall=True)
    assert s.O_J == pytest.approx(1 / 3)
    assert s.O_F == pytest.approx(2 / 3)


# -- whole reports ---------------------------------------------------------

@pytest.fixture(scope="module")
def gt_clip():
    return generate_synthetic_clip(SyntheticSceneConfig(seed=5, n_lanes=4, length=6))


def test_report_identity_all_perfect(gt_clip):
    rep = evaluate_sequences([gt_clip.masks], [gt_clip.masks]).aggregate()
    for k in ("mIoU", "F1_05", "F1_08", "accuracy", "M_J", "O_J", "M_F", "O_F", "M_T"):
        assert rep[k] == 1.0, k
    assert rep["FP"] == rep["FN"] == 0.0


def test_report_all_background(gt_clip):
    rep = evaluate_sequences([np.zeros_like(gt_clip.masks)], [gt_clip.masks]).aggregate()
    assert rep["mIoU"] == 0.0 and rep["FN"] == 1.0


def test_report_permutation_invariant(gt_clip):
    rng = np.random.default_rng(0)
    pred = gt_clip.masks.copy()
    pred[:, :, ::3] = 0                      # damage the prediction a bit
    pred[2] = np.roll(pred[2], 3, axis=1)
    base = evaluate_sequences([pred], [gt_clip.masks]).aggregate()
    for _ in range(5):
        mapping = dict(zip(range(1, 9), rng.permutation(np.arange(1, 9)).tolist()))
        perm = relabel(pred, mapping)
        assert evaluate_sequences([perm], [gt_clip.masks]).aggregate() == base


@settings(max_examples=60, deadline=None)
@given(arrays(np.uint8, (3, 8, 12), elements=st.integers(0, 3)),
       arrays(np.uint8, (3, 8, 12), elements=st.integers(0, 3)),
       st.permutations([1, 2, 3]))
def test_report_bounds_and_relabel_property(pred, gt, perm):
    rep = evaluate_sequences([pred], [gt], row_stride=2).aggregate()
    for k, v in rep.items():
        assert v is None or 0.0 <= v <= 1.0, k
    assert rep["F1_08"] <= rep["F1_05"]
    relabeled = relabel(pred, dict(zip([1, 2, 3], perm)))
    again = evaluate_sequences([relabeled], [gt], row_stride=2).aggregate()
    for k in ("mIoU", "F1_05", "F1_08", "M_J", "O_J", "M_F", "O_F", "M_T"):
        assert again[k] == pytest.approx(rep[k], abs=1e-12), k


def test_report_jsonl_and_table(tmp_path, gt_clip):
    rep = evaluate_sequences([gt_clip.masks], [gt_clip.masks], names=["a"], name="oracle")
    path = tmp_path / "r.jsonl"
    rep.write_jsonl(path)
    records = [json.loads(l) for l in path.read_text().splitlines()]
    assert records[0]["sequence"] == "a"
    assert MetricReport.read_aggregate(path)["mIoU"] == 1.0
    table = format_table([MetricReport.read_aggregate(path)])
    assert "oracle" in table and "proxy" in table


def test_mask_to_lines_keys(gt_clip):
    assert sorted(mask_to_lines(gt_clip.masks[0])) == [1, 2, 3, 4]
