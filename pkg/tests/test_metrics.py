import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import ap_prefix_scan, auroc_pairwise, confusion_loop
from patchmask import metrics
from patchmask.errors import ContractViolation, DataError
from patchmask.scene import MaskRaster


def masks_from_counts(tp, fp, fn, tn):
    pred = np.array([1] * tp + [1] * fp + [0] * fn + [0] * tn, np.uint8)[None]
    truth = np.array([1] * tp + [0] * fp + [1] * fn + [0] * tn, np.uint8)[None]
    return MaskRaster(pred), MaskRaster(truth)


def test_worked_example():
    r = metrics.evaluate(*masks_from_counts(40, 10, 20, 30))
    assert (r.tp, r.fp, r.fn, r.tn, r.n) == (40, 10, 20, 30, 100)
    assert r.accuracy == pytest.approx(0.70)
    assert r.precision_cloud == pytest.approx(0.80)
    assert r.recall_cloud == pytest.approx(40 / 60)
    assert r.precision_clear == pytest.approx(0.60)
    assert r.recall_clear == pytest.approx(0.75)
    assert r.f1_cloud == pytest.approx(2 * 0.8 * (2 / 3) / (0.8 + 2 / 3))
    assert r.f1_clear == pytest.approx(2 * 0.6 * 0.75 / 1.35)
    assert r.auroc is None and r.ap is None


def test_confusion_matches_loop(rng):
    p = rng.choice([0, 1, 255], (30, 20), p=[0.45, 0.45, 0.1]).astype(np.uint8)
    t = rng.choice([0, 1, 255], (30, 20), p=[0.45, 0.45, 0.1]).astype(np.uint8)
    c = metrics.confusion(MaskRaster(p), MaskRaster(t))
    assert (c.tp, c.fp, c.tn, c.fn) == confusion_loop(p, t, p != 255, t != 255)


def test_confusion_faults():
    with pytest.raises(ContractViolation):
        metrics.confusion(MaskRaster(np.zeros((2, 2), np.uint8)), MaskRaster(np.zeros((2, 3), np.uint8)))
    with pytest.raises(DataError):
        metrics.confusion(MaskRaster(np.zeros((2, 2), np.uint8)), MaskRaster(np.full((2, 2), 255, np.uint8)))


def test_zero_denominators_are_absent(caplog):
    with caplog.at_level(logging.WARNING):
        r = metrics.evaluate(*masks_from_counts(0, 0, 0, 10))
    assert r.precision_cloud is None and r.recall_cloud is None and r.f1_cloud is None
    assert r.accuracy == 1.0 and r.recall_clear == 1.0
    assert "undefined" in caplog.text


@given(st.lists(st.tuples(st.integers(0, 20), st.booleans()), min_size=2, max_size=40))
def test_auroc_and_ap_match_oracles(pairs):
    conf = [c / 20 for c, _ in pairs]
    y = [t for _, t in pairs]
    if any(y) and not all(y):
        assert metrics.auroc(conf, y) == pytest.approx(auroc_pairwise(conf, y), abs=1e-12)
    else:
        assert metrics.auroc(conf, y) is None
    if any(y):
        assert metrics.average_precision(conf, y) == pytest.approx(ap_prefix_scan(conf, y), abs=1e-12)
    else:
        assert metrics.average_precision(conf, y) is None


def test_auroc_extremes():
    assert metrics.auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert metrics.auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert metrics.auroc([0.5] * 4, [0, 1, 0, 1]) == 0.5
    assert metrics.average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0


def test_ap_tie_order_by_index():
    # equal confidences: the positive at index 0 ranks first, at index 1 it ranks second
    assert metrics.average_precision([0.5, 0.5], [1, 0]) == 1.0
    assert metrics.average_precision([0.5, 0.5], [0, 1]) == 0.5


@given(st.integers(0, 2**31))
def test_rank_metrics_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    conf = rng.random(50)
    y = rng.random(50) < 0.4
    if not y.any() or y.all():
        return
    warped = np.exp(3 * conf) ** 2 + 1
    assert metrics.auroc(warped, y) == pytest.approx(metrics.auroc(conf, y), abs=1e-12)
    assert metrics.average_precision(warped, y) == pytest.approx(metrics.average_precision(conf, y), abs=1e-12)


def test_evaluate_with_confidence(rng):
    conf = rng.random((10, 10)).astype(np.float32)
    conf[0, 0] = np.nan
    labels = np.where(np.isnan(conf), 255, conf >= 0.5).astype(np.uint8)
    truth = rng.integers(0, 2, (10, 10)).astype(np.uint8)
    truth[9, 9] = 255
    r = metrics.evaluate(MaskRaster(labels, conf), MaskRaster(truth))
    both = (labels != 255) & (truth != 255)
    assert r.n == both.sum()
    assert r.auroc == pytest.approx(auroc_pairwise(conf[both].tolist(), (truth[both] == 1).tolist()))


def test_aggregate_macro_and_micro():
    a = metrics.evaluate(*masks_from_counts(40, 10, 20, 30))
    b = metrics.evaluate(*masks_from_counts(5, 5, 0, 90))
    macro = metrics.aggregate([a, b])
    assert macro.accuracy == pytest.approx((0.7 + 0.95) / 2)
    assert macro.precision_cloud == pytest.approx((0.8 + 0.5) / 2)
    assert (macro.tp, macro.n, macro.n_scenes) == (45, 200, 2)
    micro = metrics.aggregate([a, b], "micro")
    assert micro.accuracy == pytest.approx(165 / 200)
    with pytest.raises(ContractViolation):
        metrics.aggregate([])
    with pytest.raises(ContractViolation):
        metrics.aggregate([a], "weird")


def test_aggregate_skips_absent():
    a = metrics.evaluate(*masks_from_counts(0, 0, 0, 10))
    b = metrics.evaluate(*masks_from_counts(5, 5, 0, 90))
    assert metrics.aggregate([a, b]).precision_cloud == 0.5


def test_report_json_roundtrip():
    r = metrics.evaluate(*masks_from_counts(3, 1, 2, 4))
    import json
    assert metrics.MetricsReport.from_dict(json.loads(r.to_json())) == r


def test_format_table():
    r = metrics.evaluate(*masks_from_counts(40, 10, 20, 30))
    text = metrics.format_table([("All bands", r), ("- nir", r)])
    lines = text.splitlines()
    assert len(lines) == 4
    assert "AUROC" in lines[0] and "70.00%" in lines[2] and lines[3].startswith("- nir")
    assert lines[2].rstrip().endswith("-")
