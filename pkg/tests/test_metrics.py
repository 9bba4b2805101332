import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays
from scipy.spatial.distance import cdist

from errors import ShapeMismatch, UndefinedMetric
from grid import BinaryMask, LabelMask
from metrics import (
    CSV_HEADER,
    FLAG_BOTH_EMPTY,
    FLAG_HAU_UNDEFINED,
    FLAG_PRE_EMPTY,
    FLAG_REC_EMPTY,
    MetricsReport,
    boundary,
    confusion_metrics,
    evaluate,
    evaluate_labels,
    hausdorff95,
    nearest_rank,
    report_csv,
)


def brute_force_boundary(bits: np.ndarray) -> np.ndarray:
    height, width = bits.shape
    edge = np.zeros_like(bits)
    for y in range(height):
        for x in range(width):
            if not bits[y, x]:
                continue
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ny, nx = y + dy, x + dx
                if not (0 <= ny < height and 0 <= nx < width) or not bits[ny, nx]:
                    edge[y, x] = True
    return edge


def brute_force_hausdorff95(a: np.ndarray, b: np.ndarray) -> float:
    pa = np.argwhere(brute_force_boundary(a))
    pb = np.argwhere(brute_force_boundary(b))
    pairwise = cdist(pa, pb)
    pooled = np.sort(np.concatenate([pairwise.min(axis=1), pairwise.min(axis=0)]))
    rank = int(np.ceil(0.95 * len(pooled)))
    return float(pooled[max(rank, 1) - 1])


def test_identical_masks_score_one():
    bits = np.zeros((6, 6), dtype=bool)
    bits[1:4, 2:5] = True
    dsc, jac, pre, rec, flags = confusion_metrics(BinaryMask(bits), BinaryMask(bits))
    assert (dsc, jac, pre, rec) == (1.0, 1.0, 1.0, 1.0)
    assert flags == ()


def test_disjoint_masks_score_zero():
    a = np.zeros((4, 4), dtype=bool)
    b = np.zeros((4, 4), dtype=bool)
    a[0, 0] = True
    b[3, 3] = True
    assert confusion_metrics(BinaryMask(a), BinaryMask(b))[:4] == (0.0, 0.0, 0.0, 0.0)


def test_superset_prediction_counts():
    truth = np.zeros((5, 5), dtype=bool)
    truth.flat[:10] = True
    pred = np.zeros((5, 5), dtype=bool)
    pred.flat[:20] = True
    dsc, jac, pre, rec, _ = confusion_metrics(BinaryMask(pred), BinaryMask(truth))
    assert dsc == pytest.approx(2.0 / 3.0)
    assert jac == pytest.approx(0.5)
    assert pre == pytest.approx(0.5)
    assert rec == 1.0


def test_empty_denominator_conventions_are_flagged():
    empty = BinaryMask(np.zeros((3, 3), dtype=bool))
    dsc, jac, pre, rec, flags = confusion_metrics(empty, empty)
    assert (dsc, jac, pre, rec) == (1.0, 1.0, 1.0, 1.0)
    assert set(flags) == {FLAG_BOTH_EMPTY, FLAG_PRE_EMPTY, FLAG_REC_EMPTY}

    truth = np.zeros((3, 3), dtype=bool)
    truth[1, 1] = True
    _, _, pre, rec, flags = confusion_metrics(empty, BinaryMask(truth))
    assert pre == 0.0
    assert rec == 0.0
    assert flags == (FLAG_PRE_EMPTY,)


def test_confusion_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        confusion_metrics(BinaryMask(np.zeros((2, 2), dtype=bool)), BinaryMask(np.zeros((3, 3), dtype=bool)))


def test_boundary_treats_outside_as_background():
    full = BinaryMask(np.ones((3, 4), dtype=bool))
    edge = boundary(full)
    assert edge.sum() == 3 * 4 - 2
    assert not edge[1, 1] and not edge[1, 2]


def test_hausdorff_of_identical_masks_is_zero():
    bits = np.zeros((8, 8), dtype=bool)
    bits[2:6, 2:6] = True
    assert hausdorff95(BinaryMask(bits), BinaryMask(bits)) == 0.0


def test_hausdorff_between_single_pixels():
    a = np.zeros((10, 10), dtype=bool)
    b = np.zeros((10, 10), dtype=bool)
    a[1, 1] = True
    b[4, 5] = True
    assert hausdorff95(BinaryMask(a), BinaryMask(b)) == pytest.approx(5.0)


def test_hausdorff_undefined_for_empty_mask():
    a = BinaryMask(np.zeros((4, 4), dtype=bool))
    b = BinaryMask(np.eye(4, dtype=bool))
    with pytest.raises(UndefinedMetric):
        hausdorff95(a, b)


def test_evaluate_flags_undefined_hausdorff():
    empty = BinaryMask(np.zeros((4, 4), dtype=bool))
    truth = BinaryMask(np.eye(4, dtype=bool))
    report = evaluate(empty, truth)
    assert report.hau95 is None
    assert FLAG_HAU_UNDEFINED in report.flags


def test_nearest_rank():
    values = np.arange(1.0, 21.0)
    assert nearest_rank(values, 95) == 19.0
    assert nearest_rank(np.array([7.0]), 95) == 7.0


@pytest.mark.slow
def test_hausdorff_matches_brute_force_on_random_pairs():
    rng = np.random.default_rng(13)
    for _ in range(50):
        a = rng.random((32, 32)) < rng.uniform(0.05, 0.6)
        b = rng.random((32, 32)) < rng.uniform(0.05, 0.6)
        if not a.any() or not b.any():
            continue
        assert hausdorff95(BinaryMask(a), BinaryMask(b)) == brute_force_hausdorff95(a, b)


@pytest.mark.property
@settings(max_examples=30, deadline=None)
@given(arrays(np.bool_, (8, 9)), arrays(np.bool_, (8, 9)))
def test_hausdorff_symmetric_and_below_max(a, b):
    if not a.any() or not b.any():
        return
    forward = hausdorff95(BinaryMask(a), BinaryMask(b))
    assert forward == hausdorff95(BinaryMask(b), BinaryMask(a))
    pa = np.argwhere(brute_force_boundary(a))
    pb = np.argwhere(brute_force_boundary(b))
    pairwise = cdist(pa, pb)
    exact = max(pairwise.min(axis=1).max(), pairwise.min(axis=0).max())
    assert forward <= exact + 1e-12


@pytest.mark.property
@settings(max_examples=50, deadline=None)
@given(arrays(np.bool_, (6, 7)), arrays(np.bool_, (6, 7)))
def test_dice_jaccard_relation(a, b):
    dsc, jac, _, _, _ = confusion_metrics(BinaryMask(a), BinaryMask(b))
    assert jac <= dsc + 1e-12
    assert dsc == pytest.approx(2 * jac / (1 + jac), abs=1e-9)


def test_multiclass_report_and_macro_row():
    truth = np.zeros((10, 10), dtype=np.int64)
    truth[1:4, 1:4] = 1
    truth[6:9, 6:9] = 2
    pred = truth.copy()
    pred[6, 6] = 0
    per_class, macro = evaluate_labels(LabelMask(pred, 3), LabelMask(truth, 3))
    assert list(per_class) == [1, 2]
    assert per_class[1].dsc == 1.0
    assert per_class[2].dsc == pytest.approx(16.0 / 17.0)
    assert macro.dsc == pytest.approx((1.0 + 16.0 / 17.0) / 2.0)

    text = report_csv("img", per_class, macro)
    lines = text.strip().split("\n")
    assert lines[0] == ",".join(CSV_HEADER)
    assert [line.split(",")[1] for line in lines[1:]] == ["1", "2", "macro"]


def test_csv_row_round_trip():
    report = MetricsReport(0.5, 1.0 / 3.0, 0.25, 1.0, None, (FLAG_HAU_UNDEFINED,))
    image_id, class_name, restored = MetricsReport.from_csv_row(report.to_csv_row("a", 1))
    assert (image_id, class_name) == ("a", "1")
    assert restored.hau95 is None
    assert restored.flags == (FLAG_HAU_UNDEFINED,)
    assert restored.jac == pytest.approx(1.0 / 3.0, abs=1e-6)
