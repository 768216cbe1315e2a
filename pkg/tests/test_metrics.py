import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from organseg.anatomy import OrganId
from organseg.metrics import (
    REPORT_COLUMNS,
    SweepEval,
    SweepRow,
    dice,
    evaluate_dataset,
    prf,
    sweep,
    sweep_csv,
)
from organseg.pipeline import SegmentationResult
from organseg.raster import BitMask, Rect


def counting_oracle(pred, truth):
    """Dice, precision, recall from a plain per-pixel loop with exact fractions."""
    from fractions import Fraction

    tp = fp = fn = 0
    for p, t in zip(pred.ravel().tolist(), truth.ravel().tolist()):
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
    d = Fraction(1) if tp + fp + fn == 0 else Fraction(2 * tp, 2 * tp + fp + fn)
    if tp + fp == 0:
        prec = Fraction(1) if tp + fn == 0 else Fraction(0)
    else:
        prec = Fraction(tp, tp + fp)
    if tp + fn == 0:
        rec = Fraction(1) if tp + fp == 0 else Fraction(0)
    else:
        rec = Fraction(tp, tp + fn)
    return d, prec, rec


def random_pairs(n, seed=0, size=32):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        dp, dt = rng.uniform(0, 0.6, size=2)
        yield rng.random((size, size)) < dp, rng.random((size, size)) < dt


def test_dice_matches_counting_oracle_on_random_pairs():
    for pred, truth in random_pairs(1000):
        d, p, r = counting_oracle(pred, truth)
        assert dice(pred, truth) == float(d)
        pp, rr, f = prf(pred, truth)
        assert pp == float(p) and rr == float(r)
        assert abs(f - dice(pred, truth)) <= 1e-12


def test_examples():
    a = np.zeros((4, 4), dtype=bool)
    b = a.copy()
    assert dice(a, b) == 1.0 and prf(a, b) == (1.0, 1.0, 1.0)
    a[0, :2] = True
    assert dice(a, b) == 0.0 and prf(a, b)[0] == 0.0 and prf(a, b)[1] == 0.0
    b[0, 1:3] = True
    assert dice(a, b) == pytest.approx(0.5)
    assert dice(BitMask(a), BitMask(a)) == 1.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2), bool), np.zeros((2, 3), bool))


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_metric_ranges_and_symmetry(seed):
    (pred, truth), = random_pairs(1, seed, size=12)
    d = dice(pred, truth)
    assert 0.0 <= d <= 1.0
    assert d == dice(truth, pred)
    p, r, _ = prf(pred, truth)
    rp, rr, _ = prf(truth, pred)
    assert (p, r) == (rr, rp)


def _result(organ, mask, found=True):
    return SegmentationResult(organ, found, Rect(0, 0, 1, 1), BitMask(mask), 0.9)


def test_evaluate_dataset_rows_and_csv():
    truth = np.zeros((4, 4), dtype=bool)
    truth[:2] = True
    half = np.zeros_like(truth)
    half[0] = True
    pairs = [
        (_result(OrganId.LIVER, truth), BitMask(truth)),
        (_result(OrganId.LIVER, half), BitMask(truth)),
        (_result(OrganId.BRAIN, truth), BitMask(truth)),
    ]
    rows, csv = evaluate_dataset(pairs)
    assert [r.organ for r in rows] == [OrganId.BRAIN, OrganId.LIVER]
    liver = rows[1]
    assert liver.n == 2
    assert liver.dice == pytest.approx((1.0 + 2 * 4 / 12) / 2)
    assert liver.precision == 1.0 and liver.recall == pytest.approx(0.75)
    lines = csv.splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert lines[1] == "Brain,1,1.000000,1.000000,1.000000,1.000000"


def test_not_found_scores_as_empty_prediction():
    truth = np.zeros((3, 3), dtype=bool)
    rows, _ = evaluate_dataset([(_result(OrganId.HEART, np.ones((3, 3), bool), found=False), BitMask(truth))])
    assert rows[0].dice == 1.0


def test_evaluate_empty_is_error():
    with pytest.raises(ValueError):
        evaluate_dataset([])


def test_sweep_csv_format():
    text = sweep_csv([SweepRow(3, 70, 0.9, 0.8123456)])
    assert text == "conv_stages,epochs,shape_accuracy,mean_dice\n3,70,0.900000,0.812346\n"


def test_sweep_calls_trainer_once_per_stage_count():
    from organseg.shapenet import tiny_net

    calls = []

    def train_fn(k, epochs, seed):
        calls.append((k, tuple(epochs), seed))
        return {e: tiny_net(e) for e in epochs}

    x = np.zeros((6, 8, 8, 2), dtype=np.float32)
    evalset = SweepEval(x, np.arange(6), [], None, None)
    rows, csv = sweep(train_fn, [2, 3], [10, 0], evalset, seed=4)
    assert calls == [(2, (0, 10), 4), (3, (0, 10), 4)]
    assert [(r.conv_stages, r.epochs) for r in rows] == [(2, 10), (2, 0), (3, 10), (3, 0)]
    assert all(r.mean_dice == 0.0 for r in rows)
    assert len(csv.splitlines()) == 5


def test_empty_sweep_grid():
    with pytest.raises(ValueError):
        sweep(lambda *a: {}, [], [1], None)
