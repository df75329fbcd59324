"""Localization metrics: binarization, IoU aggregation, scenario report."""

import numpy as np
import pytest

from tavlo.errors import DataError, InvalidInputError, TavloWarning
from tavlo.evaluation import (
    AUC_TAUS,
    EvalRecord,
    ThresholdPolicy,
    binarize,
    ciou_auc,
    frame_iou,
    offscreen_tn,
    offscreen_tn_strict,
    rank_percentile,
    scenario_report,
)

from oracles import ciou_auc_oracle, iou_oracle, percentile_cut_oracle, tn_oracle


def _rec(heat, gt=None, clip="c0", frame=0, tags=(), cross=False):
    heat = np.asarray(heat, dtype=np.float64)
    if gt is None:
        gt = np.zeros(heat.shape, dtype=bool)
    return EvalRecord(clip_id=clip, frame_index=frame, heatmap=heat,
                      gt_mask=np.asarray(gt, dtype=bool), tags=tags,
                      cross_event=cross)


def _mask(shape, idx):
    m = np.zeros(shape, dtype=bool)
    for ij in idx:
        m[ij] = True
    return m


# ---------------------------------------------------------------------------
# Percentile cut and binarization
# ---------------------------------------------------------------------------


def test_rank_percentile_pins():
    assert rank_percentile(np.array([0.1, 0.2, 0.3, 0.9]), 25.0) == 0.3
    assert rank_percentile(np.arange(1, 101, dtype=float), 10.0) == 90.0
    assert rank_percentile(np.array([7.0]), 50.0) == 7.0
    with pytest.raises(DataError):
        rank_percentile(np.array([]), 10.0)


def test_rank_percentile_matches_oracle_and_quantum():
    rng = np.random.default_rng(41)
    for _ in range(50):
        n = int(rng.integers(5, 400))
        pool = rng.permutation(n).astype(np.float64) / n  # unique values
        p = float(rng.uniform(0.5, 99.5))
        cut = rank_percentile(pool, p)
        assert cut == percentile_cut_oracle(pool, p)
        frac_above = float((pool > cut).mean())
        # strictly-above mass stays within one pixel quantum below p%
        assert frac_above <= p / 100.0 + 1e-12
        assert frac_above >= p / 100.0 - 1.0 / n - 1e-12


def test_binarize_global_top_percent_pin():
    rec = _rec([[0.1, 0.2], [0.3, 0.9]])
    (pred,) = binarize([rec], ThresholdPolicy(percent=25.0))
    assert pred.dtype == bool
    assert pred.tolist() == [[False, False], [False, True]]


def test_binarize_all_zero_pool_predicts_nothing():
    recs = [_rec(np.zeros((4, 4))), _rec(np.zeros((4, 4)), frame=1)]
    preds = binarize(recs, ThresholdPolicy(percent=10.0))
    assert all(not p.any() for p in preds)


def test_binarize_positive_fraction_within_quantum():
    rng = np.random.default_rng(42)
    for p in (5.0, 10.0, 37.0):
        recs = []
        for k in range(6):
            heat = rng.permutation(64).astype(np.float64).reshape(8, 8)
            heat = heat + k * 64.0  # unique across the whole pool
            recs.append(_rec(heat, frame=k))
        preds = binarize(recs, ThresholdPolicy(percent=p))
        n = sum(pr.size for pr in preds)
        frac = sum(int(pr.sum()) for pr in preds) / n
        assert p / 100.0 - 1.0 / n - 1e-12 <= frac <= p / 100.0 + 1e-12


def test_binarize_minmax_policy_and_constant_warning():
    policy = ThresholdPolicy(kind="frame_minmax_fixed", fixed_cut=0.5)
    rec = _rec([[0.0, 1.0], [0.4, 0.6]])
    flat = _rec(np.full((2, 2), 3.3), frame=1)
    with pytest.warns(TavloWarning, match="constant heatmap"):
        preds = binarize([rec, flat], policy)
    assert preds[0].tolist() == [[False, True], [False, True]]
    assert not preds[1].any()
    with pytest.raises(DataError):
        binarize([], policy)


def test_threshold_policy_validation():
    with pytest.raises(InvalidInputError):
        ThresholdPolicy(kind="otsu")
    for bad in (0.0, 100.0, -3.0):
        with pytest.raises(InvalidInputError):
            ThresholdPolicy(percent=bad)


def test_record_validation():
    with pytest.raises(InvalidInputError):
        _rec(np.zeros((2, 2)), gt=np.zeros((3, 2), dtype=bool))
    with pytest.raises(InvalidInputError, match="non-finite"):
        _rec(np.array([[0.0, np.nan], [0.0, 0.0]]))
    rec = _rec(np.zeros((2, 2)), tags=["single", "single"])
    assert rec.tags == frozenset({"single"})


# ---------------------------------------------------------------------------
# IoU and its aggregates
# ---------------------------------------------------------------------------


def test_frame_iou_pins():
    gt = _mask((4, 4), [(0, 0), (0, 1)])
    assert frame_iou(gt, gt) == 1.0
    assert frame_iou(_mask((4, 4), [(3, 3)]), gt) == 0.0
    pred = _mask((4, 4), [(0, 1), (1, 1)])  # one shared, one extra pixel
    assert frame_iou(pred, gt) == pytest.approx(1.0 / 3.0, abs=1e-15)
    with pytest.raises(InvalidInputError):
        frame_iou(np.zeros((2, 2), dtype=bool), np.zeros((3, 3), dtype=bool))
    with pytest.raises(InvalidInputError):
        frame_iou(gt, np.zeros((4, 4), dtype=bool))


def test_frame_iou_matches_oracle():
    rng = np.random.default_rng(43)
    for _ in range(50):
        pred = rng.random((6, 6)) < 0.4
        gt = rng.random((6, 6)) < 0.4
        gt[2, 2] = True  # IoU needs a non-empty reference
        assert frame_iou(pred, gt) == pytest.approx(iou_oracle(pred, gt), abs=1e-12)


def test_ciou_auc_all_perfect_and_all_miss():
    policy = ThresholdPolicy(kind="frame_minmax_fixed", fixed_cut=0.5)
    gt = _mask((4, 4), [(1, 1), (1, 2), (2, 1), (2, 2)])
    perfect = [_rec(gt.astype(float), gt=gt, frame=k) for k in range(3)]
    assert ciou_auc(perfect, policy) == (100.0, 100.0)
    miss = [_rec((~gt).astype(float), gt=gt, frame=k) for k in range(3)]
    ciou, auc = ciou_auc(miss, policy)
    assert ciou == 0.0
    assert auc == pytest.approx(100.0 / 21.0, abs=1e-12)


def test_ciou_auc_known_iou_enumeration():
    # Target IoUs 1.0, 2/3, 0.5, 3/8, 0.0 sit inside threshold-grid cells
    # (0.5 itself is exactly representable, so the CIoU boundary is safe).
    shape = (4, 4)
    cases = [
        (_mask(shape, [(0, 0), (0, 1)]), _mask(shape, [(0, 0), (0, 1)])),
        (_mask(shape, [(0, 0), (0, 1), (0, 2)]), _mask(shape, [(0, 0), (0, 1)])),
        (_mask(shape, [(0, 0), (0, 1), (0, 2), (0, 3)]), _mask(shape, [(0, 0), (0, 1)])),
        (_mask(shape, [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1)]),
         _mask(shape, [(0, 0), (0, 1), (0, 2), (2, 0), (2, 1), (2, 2)])),
        (_mask(shape, [(0, 0)]), _mask(shape, [(3, 3)])),
    ]
    ious = [frame_iou(p, g) for p, g in cases]
    assert ious == pytest.approx([1.0, 2.0 / 3.0, 0.5, 0.375, 0.0], abs=1e-15)
    policy = ThresholdPolicy(kind="frame_minmax_fixed", fixed_cut=0.5)
    records = [_rec(p.astype(float), gt=g, frame=k) for k, (p, g) in enumerate(cases)]
    ciou, auc = ciou_auc(records, policy)
    assert ciou == 60.0
    assert auc == pytest.approx(100.0 * 11.0 / 21.0, abs=1e-12)
    oc, oa = ciou_auc_oracle(ious)
    assert (ciou, auc) == pytest.approx((oc, oa), abs=1e-12)


def test_ciou_auc_requires_ground_truth():
    recs = [_rec(np.random.default_rng(0).random((4, 4)))]
    with pytest.raises(DataError, match="non-empty ground-truth"):
        ciou_auc(recs, ThresholdPolicy())


def test_auc_bounds_follow_from_monotone_success_rate():
    rng = np.random.default_rng(44)
    for _ in range(10):
        recs = []
        for k in range(30):
            heat = rng.random((8, 8))
            gt = rng.random((8, 8)) < 0.3
            gt[4, 4] = True
            recs.append(_rec(heat, gt=gt, frame=k))
        ciou, auc = ciou_auc(recs, ThresholdPolicy(percent=30.0))
        assert auc >= 11.0 * ciou / 21.0 - 1e-9
        assert auc <= (10.0 * 100.0 + 11.0 * ciou) / 21.0 + 1e-9


# ---------------------------------------------------------------------------
# Off-screen true negatives
# ---------------------------------------------------------------------------


def test_offscreen_tn_pins_and_oracle():
    rng = np.random.default_rng(45)
    gt = _mask((10, 10), [(5, 5), (5, 6)])
    on1 = _rec(rng.random((10, 10)) + 2.0, gt=gt, clip="on", frame=0, tags={"single"})
    off_quiet = _rec(np.zeros((10, 10)), clip="off", frame=1, tags={"off_screen"})
    off_spiky = np.zeros((10, 10))
    off_spiky[0, 0] = 50.0  # single pixel above every pooled value
    off2 = _rec(off_spiky, clip="off", frame=2, tags={"off_screen"})
    records = [on1, off_quiet, off2]
    tn = offscreen_tn(records, ThresholdPolicy(percent=10.0))
    assert tn == 100.0 * (1.0 - 1.0 / 200.0)
    cut = percentile_cut_oracle(
        np.concatenate([r.heatmap.reshape(-1) for r in records]), 10.0)
    assert tn == pytest.approx(
        tn_oracle([off_quiet.heatmap, off2.heatmap], cut), abs=1e-12)
    with pytest.raises(DataError, match="off-screen"):
        offscreen_tn([on1], ThresholdPolicy())


def test_offscreen_tn_strict_pools_only_offscreen_clips():
    off_heat = np.zeros((10, 10))
    off_heat[0, 0] = off_heat[0, 1] = 1.0
    records = [
        _rec(off_heat, clip="c1", frame=0, tags={"off_screen"}),
        _rec(np.full((10, 10), 0.5), clip="c1", frame=1, tags={"single"},
             gt=_mask((10, 10), [(2, 2)])),
        _rec(np.full((10, 10), 100.0), clip="c2", frame=0, tags={"single"},
             gt=_mask((10, 10), [(3, 3)])),
    ]
    # c2's huge values push the global cut above everything in c1, so the
    # whole-set policy sees no positives; the strict variant drops c2.
    assert offscreen_tn(records, ThresholdPolicy(percent=5.0)) == 100.0
    assert offscreen_tn_strict(records) == 98.0
    with pytest.raises(DataError):
        offscreen_tn_strict(records[1:])


# ---------------------------------------------------------------------------
# Scenario report
# ---------------------------------------------------------------------------


def _random_records(rng, n=40):
    tag_menu = [{"single"}, {"mixed"}, {"multi_entity"}, {"mixed", "multi_entity"}]
    records = []
    for k in range(n):
        heat = rng.random((8, 8))
        if k % 5 == 0:
            records.append(_rec(heat, clip=f"r{k}", frame=k, tags={"off_screen"},
                                cross=bool(rng.integers(2))))
            continue
        gt = rng.random((8, 8)) < 0.25
        gt[int(rng.integers(8)), int(rng.integers(8))] = True
        tags = tag_menu[int(rng.integers(len(tag_menu)))]
        records.append(_rec(heat, gt=gt, clip=f"r{k}", frame=k, tags=tags,
                            cross=bool(rng.integers(2))))
    return records


def test_scenario_report_cells_match_brute_force():
    rng = np.random.default_rng(46)
    records = _random_records(rng)
    policy = ThresholdPolicy(percent=15.0)
    report = scenario_report(records, policy)

    cut = percentile_cut_oracle(
        np.concatenate([r.heatmap.reshape(-1) for r in records]), 15.0)
    preds = {id(r): r.heatmap > cut for r in records}
    ious = {id(r): iou_oracle(preds[id(r)], r.gt_mask)
            for r in records if r.gt_mask.any()}

    def check(name, selector):
        vals = [ious[id(r)] for r in records if id(r) in ious and selector(r)]
        assert name in report.cells
        oc, oa = ciou_auc_oracle(vals)
        cell = report.cells[name]
        assert cell["ciou"] == pytest.approx(oc, abs=1e-12)
        assert cell["auc"] == pytest.approx(oa, abs=1e-12)
        assert cell["count"] == len(vals)

    check("single", lambda r: "single" in r.tags)
    check("mixed", lambda r: "mixed" in r.tags)
    check("multi_entity", lambda r: "multi_entity" in r.tags)
    check("total", lambda r: True)
    check("cross_event", lambda r: r.cross_event)

    off = [r for r in records if "off_screen" in r.tags]
    assert report.cells["off_screen"]["count"] == len(off)
    assert report.cells["off_screen"]["tn"] == pytest.approx(
        tn_oracle([r.heatmap for r in off], cut), abs=1e-12)
    delta = report.cells["delta"]
    assert delta["ciou"] == pytest.approx(
        report.cells["cross_event"]["ciou"] - report.cells["total"]["ciou"], abs=1e-12)
    assert delta["auc"] == pytest.approx(
        report.cells["cross_event"]["auc"] - report.cells["total"]["auc"], abs=1e-12)
    assert report.n_records == len(records)
    assert report.auc_grid == len(AUC_TAUS) == 21


def test_scenario_report_total_is_count_weighted_mean_of_disjoint_cells():
    rng = np.random.default_rng(47)
    records = []
    k = 0
    for tag, n in (("single", 7), ("mixed", 5), ("multi_entity", 4)):
        for _ in range(n):
            gt = rng.random((6, 6)) < 0.3
            gt[3, 3] = True
            records.append(_rec(rng.random((6, 6)), gt=gt, clip=f"x{k}",
                                frame=k, tags={tag}))
            k += 1
    report = scenario_report(records, ThresholdPolicy(percent=20.0))
    total = report.cells["total"]
    for key in ("ciou", "auc"):
        blended = sum(report.cells[t][key] * report.cells[t]["count"]
                      for t in ("single", "mixed", "multi_entity"))
        assert total[key] == pytest.approx(blended / total["count"], abs=1e-9)
    assert total["count"] == 16


def test_scenario_report_absent_cells():
    rng = np.random.default_rng(48)
    gt = _mask((4, 4), [(1, 1)])
    records = [_rec(rng.random((4, 4)), gt=gt, clip=f"s{k}", frame=k,
                    tags={"single"}) for k in range(4)]
    report = scenario_report(records)
    assert set(report.cells) == {"single", "total"}
    with pytest.raises(DataError):
        scenario_report([])


def test_report_rows_and_table():
    rng = np.random.default_rng(49)
    records = _random_records(rng, n=20)
    report = scenario_report(records, ThresholdPolicy(percent=10.0))
    rows = report.to_records()
    assert all(set(row) == {"scenario", "metric", "value", "count"} for row in rows)
    assert not any(row["metric"] == "count" for row in rows)
    for row in rows:
        assert row["value"] == round(float(report.cells[row["scenario"]][row["metric"]]), 6)
    table = report.format_table()
    assert "threshold policy: global_top_percent" in table
    assert "CIoU%" in table and "frames" in table
    off_line = next(line for line in table.splitlines() if line.startswith("off_screen"))
    assert "-" in off_line  # no CIoU column for the true-negative cell
