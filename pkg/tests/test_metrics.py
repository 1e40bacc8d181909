import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from outadapt import metrics
from outadapt.exceptions import ConfigurationError, DataError
from outadapt.metrics import ConfusionMatrix, IoUReport, iou_report, miou_gap
from outadapt.networks import SegNetSpec, init_segnet
from outadapt.synth import make_splits


def set_iou(preds, gts, c):
    """Per-class |P & G| / |P | G| over sets of (image, row, col) coordinates."""
    out = []
    for k in range(c):
        p, g = set(), set()
        for n, (pred, gt) in enumerate(zip(preds, gts)):
            for (i, j), v in np.ndenumerate(gt):
                if v == 255:
                    continue
                if v == k:
                    g.add((n, i, j))
                if pred[i, j] == k:
                    p.add((n, i, j))
        union = p | g
        out.append(len(p & g) / len(union) if union else None)
    defined = [v for v in out if v is not None]
    return out, (sum(defined) / len(defined) if defined else None)


def test_perfect_prediction():
    gt = np.random.default_rng(0).integers(0, 2, (4, 4))
    cm = ConfusionMatrix(2).accumulate(gt, gt)
    assert np.trace(cm.counts) == 16 and cm.counts.sum() == 16
    rep = iou_report(cm)
    assert rep.miou == 1.0 and all(v == 1.0 for v in rep.iou if v is not None)


def test_all_ignored():
    cm = ConfusionMatrix(3).accumulate(np.zeros((2, 2), int), np.full((2, 2), 255))
    assert cm.total == 0


def test_hand_counted():
    cm = ConfusionMatrix(2).accumulate(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]))
    assert cm.counts.tolist() == [[1, 1], [0, 2]]
    rep = iou_report(cm)
    assert rep.iou == [0.5, pytest.approx(2 / 3)]
    assert rep.miou == pytest.approx(7 / 12)


def test_absent_class_excluded():
    cm = ConfusionMatrix(3).accumulate(np.array([[0, 1]]), np.array([[0, 1]]))
    rep = iou_report(cm)
    assert rep.iou[2] is None and rep.miou == 1.0
    assert rep.to_csv().splitlines()[3] == "2,"


def test_argmax_ties_go_low():
    prob = np.full((3, 1, 2), 1 / 3)
    cm = metrics.accumulate(ConfusionMatrix(3), prob, np.array([[0, 2]]))
    assert cm.counts[:, 0].sum() == 2


def test_shape_and_range_errors():
    with pytest.raises(ConfigurationError):
        ConfusionMatrix(2).accumulate(np.zeros((2, 2), int), np.zeros((2, 3), int))
    with pytest.raises(DataError):
        ConfusionMatrix(2).accumulate(np.zeros((1, 1), int), np.full((1, 1), 2))


def test_gap_values():
    assert miou_gap(IoUReport([0.1], 42.4), IoUReport([0.1], 65.1)) == pytest.approx(-22.7)
    assert miou_gap(IoUReport([0.1], 35.0), IoUReport([0.1], 61.8)) == pytest.approx(-26.8)
    rep = IoUReport([0.5, 0.25], 0.375)
    assert miou_gap(rep, rep) == 0.0
    with pytest.raises(ConfigurationError):
        miou_gap(rep, IoUReport([0.5], 0.5))


def test_csv_round_trip():
    rep = IoUReport([0.5, None, 0.25], 0.375)
    text = rep.to_csv()
    assert text.splitlines() == ["class,iou", "0,0.500000", "1,", "2,0.250000", "miou,0.375000"]
    back = IoUReport.from_csv(text)
    assert back.iou == [0.5, None, 0.25] and back.miou == 0.375


def test_matches_set_oracle_200():
    rng = np.random.default_rng(123)
    for k in range(200):
        c = (2, 3, 4)[k % 3]
        pred = rng.integers(0, c, (8, 8))
        gt = rng.integers(0, c, (8, 8))
        gt[rng.random((8, 8)) < 0.1] = 255
        rep = iou_report(ConfusionMatrix(c).accumulate(pred, gt))
        iou, miou = set_iou([pred], [gt], c)
        assert rep.iou == iou and rep.miou == miou


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 4), st.integers(1, 5), st.integers(0, 10 ** 6))
def test_order_invariance_and_bounds(c, n, seed):
    rng = np.random.default_rng(seed)
    preds = [rng.integers(0, c, (4, 4)) for _ in range(n)]
    gts = [rng.integers(0, c, (4, 4)) for _ in range(n)]
    fwd = ConfusionMatrix(c)
    for p, g in zip(preds, gts):
        fwd.accumulate(p, g)
    rev = ConfusionMatrix(c)
    for p, g in reversed(list(zip(preds, gts))):
        rev.accumulate(p, g)
    shards = ConfusionMatrix(c).accumulate(preds[0], gts[0]).merge(
        ConfusionMatrix(c).accumulate(np.concatenate(preds[1:] or [np.zeros((0, 4), int)]),
                                      np.concatenate(gts[1:] or [np.zeros((0, 4), int)])))
    a, b, s = iou_report(fwd), iou_report(rev), iou_report(shards)
    assert a.iou == b.iou == s.iou
    defined = [v for v in a.iou if v is not None]
    assert min(defined) <= a.miou <= max(defined)
    assert all(0 <= v <= 1 for v in defined)
    assert np.all(fwd.counts >= 0) and fwd.total == 16 * n


def test_evaluate_deterministic_and_empty_guard():
    samples = make_splits(seed=2, n_source=0, n_target=0, n_test=3, size=32)["target_test"]
    g = init_segnet(0, SegNetSpec(widths=(4, 8, 8, 8, 8)))
    a, b = metrics.evaluate(g, samples), metrics.evaluate(g, samples)
    assert a == b and a.n_images == 3
    with pytest.raises(ConfigurationError, match="empty"):
        metrics.evaluate(g, [])
