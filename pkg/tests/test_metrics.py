import csv
import io

import numpy as np
import pytest

from subseg.data import HierarchySpec
from subseg.metrics import average_reports, boundary, dice_score, evaluate, hd95

from . import oracles

H = HierarchySpec((1, 3))


def test_dice_examples():
    a = np.zeros((4, 4), bool)
    a[0, :4] = True
    b = np.zeros((4, 4), bool)
    b[0, 1:4] = True
    b[1, :3] = True
    assert dice_score(a, b) == pytest.approx(0.6)
    assert dice_score(a, a) == 1.0
    assert dice_score(a, ~a) == 0.0
    assert dice_score(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        dice_score(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        hd95(np.zeros((3, 3)), np.zeros((4, 3)))


def test_hd95_examples():
    a = np.zeros((8, 8), bool)
    b = np.zeros((8, 8), bool)
    a[0, 0] = True
    b[3, 4] = True
    assert hd95(a, b) == 5.0
    assert hd95(a, a) == 0.0
    assert hd95(a, np.zeros_like(a)) is None
    assert hd95(np.zeros_like(a), np.zeros_like(a)) == 0.0


def test_boundary_rule():
    m = np.zeros((5, 5), bool)
    m[1:4, 1:4] = True
    expect = m.copy()
    expect[2, 2] = False
    assert np.array_equal(boundary(m), expect)
    full = np.ones((3, 3), bool)
    # every pixel of a full mask touches the border except the centre
    assert boundary(full).sum() == 8


def test_hd95_matches_brute_force_on_random_pairs():
    rng = np.random.default_rng(5)
    for _ in range(60):
        a = rng.random((12, 12)) < rng.uniform(0.05, 0.6)
        b = rng.random((12, 12)) < rng.uniform(0.05, 0.6)
        assert hd95(a, b) == oracles.hd95(a.tolist(), b.tolist())


def test_evaluate_identity_and_permutation():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 4, (16, 16))
    rep = evaluate(gt, gt, H)
    assert all(d == 1.0 and h == 0.0 for d, h in rep.per_class.values())
    perm = np.array([0, 2, 3, 1])[gt]
    rep = evaluate(perm, gt, H)
    assert rep.superclass["1"][0] == 1.0
    assert rep.mean_dice < 1.0


def test_evaluate_matches_oracle_report():
    rng = np.random.default_rng(3)
    gt = rng.integers(0, 4, (10, 10))
    pred = rng.integers(0, 4, (10, 10))
    rep = evaluate(pred, gt, H)
    for c in range(1, 4):
        a, b = (pred == c).tolist(), (gt == c).tolist()
        d, h = rep.per_class[str(c)]
        assert d == pytest.approx(oracles.dice(a, b), abs=1e-12)
        assert h == oracles.hd95(a, b)
    defined = [h for _, h in rep.per_class.values() if h is not None]
    assert rep.mean_hd95 == pytest.approx(np.mean(defined), abs=1e-9)
    assert rep.mean_dice == pytest.approx(np.mean([d for d, _ in rep.per_class.values()]), abs=1e-9)


def test_undefined_hd95_excluded_and_counted():
    gt = np.zeros((8, 8), int)
    gt[2:5, 2:5] = 1
    pred = gt.copy()
    gt[6, 6] = 2           # class 2 only in gt: undefined
    rep = evaluate(pred, gt, H)
    assert rep.per_class["2"][1] is None
    assert rep.per_class["3"] == (1.0, 0.0)
    assert rep.undefined_hd95 == 1
    assert rep.mean_hd95 == pytest.approx(0.0)
    avg = average_reports([rep, rep])
    assert avg.undefined_hd95 == 2


def test_report_csv_and_table():
    rng = np.random.default_rng(1)
    gt = rng.integers(0, 4, (8, 8))
    rep = evaluate(gt, gt, H)
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0] == ["class", "dice", "hd95"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3", "mean", "super_1"]
    assert "hd95 (px)" in rep.table()
