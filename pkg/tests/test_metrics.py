import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import asd_bruteforce, components, dice_bruteforce, largest_cc_oracle
from pnpseg.errors import ArgumentError, DimensionError
from pnpseg.metrics import (aggregate, asd, dice, evaluate_subject, format_mean_std, largest_cc,
                            mean_foreground_dice, read_metrics_csv, summarize, surface, write_metrics_csv)


def random_pair(rng, max_side=16, num_classes=3):
    shape = tuple(int(s) for s in rng.integers(2, max_side + 1, size=3))
    # blobs rather than salt-and-pepper so surfaces are nontrivial
    p_fill, g_fill = rng.uniform(0.05, 0.6, size=2)
    pred = (rng.random(shape) < p_fill) * rng.integers(1, num_classes, size=shape)
    gt = (rng.random(shape) < g_fill) * rng.integers(1, num_classes, size=shape)
    return pred.astype(np.uint8), gt.astype(np.uint8)


def test_dice_examples():
    a = np.zeros((4, 4, 4), np.uint8)
    a[0, 0, :4] = 1
    assert dice(a, a, 1) == 100.0
    b = np.zeros_like(a)
    b[3, 3, :2] = 1
    assert dice(a, b, 1) == 0.0
    g = np.zeros_like(a)
    g[0, 0, :4] = 1
    g[0, 1, :2] = 1
    assert dice(a, g, 1) == pytest.approx(80.0)
    assert dice(np.zeros_like(a), np.zeros_like(a), 1) is None


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)), 1)


def test_asd_examples():
    a = np.zeros((8, 8, 8), np.uint8)
    b = np.zeros_like(a)
    a[1, 1, 1] = 1
    b[1, 1, 4] = 1
    assert asd(a, b, 1) == pytest.approx(3.0)
    assert asd(a, a, 1) == 0.0
    assert asd(np.zeros_like(a), b, 1) is None


def test_surface_border_counts_as_outside():
    m = np.ones((3, 3, 3), bool)
    s = surface(m)
    assert s.sum() == 26 and not s[1, 1, 1]


def test_metric_oracles_100_cases():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        pred, gt = random_pair(rng)
        for c in (1, 2):
            assert dice(pred, gt, c) == dice_bruteforce(pred, gt, c)
            ref = asd_bruteforce(pred, gt, c)
            got = asd(pred, gt, c)
            assert (got is None) == (ref is None)
            if ref is not None:
                assert abs(got - ref) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_symmetry_permutation_and_spacing(seed):
    rng = np.random.default_rng(seed)
    pred, gt = random_pair(rng, max_side=10)
    assert dice(pred, gt, 1) == dice(gt, pred, 1)
    perm = rng.permutation(pred.size)
    pp, gp = pred.ravel()[perm].reshape(pred.shape), gt.ravel()[perm].reshape(gt.shape)
    assert dice(pp, gp, 1) == dice(pred, gt, 1)
    d = asd(pred, gt, 1)
    if d is not None:
        assert asd(gt, pred, 1) == pytest.approx(d, abs=1e-12)
        assert asd(pred, gt, 1, spacing=(2.5, 2.5, 2.5)) == pytest.approx(2.5 * d, rel=1e-12)


def test_asd_anisotropic_spacing_against_oracle():
    rng = np.random.default_rng(5)
    pred, gt = random_pair(rng, max_side=8)
    sp = (1.0, 2.0, 0.5)
    assert asd(pred, gt, 1, sp) == pytest.approx(asd_bruteforce(pred, gt, 1, sp), abs=1e-9)


def test_largest_cc_examples():
    v = np.zeros((6, 6, 6), np.uint8)
    v[0, 0, :5] = 1
    v[0, 1, :5] = 1          # 10 voxels
    v[4, 4, :3] = 1          # 3 voxels
    out = largest_cc(v)
    assert out.sum() == 10 and out[4, 4].sum() == 0
    single = np.zeros_like(v)
    single[2, 2, 2] = 2
    assert np.array_equal(largest_cc(single), single)
    assert np.array_equal(largest_cc(np.zeros_like(v), 3), np.zeros_like(v))


def test_largest_cc_diagonal_is_not_connected():
    v = np.zeros((3, 3, 3), np.uint8)
    v[0, 0, 0] = v[1, 1, 0] = v[1, 1, 1] = 1
    out = largest_cc(v)
    assert out.sum() == 2 and out[0, 0, 0] == 0


def test_largest_cc_against_flood_fill_100_cases():
    rng = np.random.default_rng(7)
    for _ in range(100):
        shape = tuple(int(s) for s in rng.integers(2, 9, size=3))
        vol = ((rng.random(shape) < 0.35) * rng.integers(1, 3, size=shape)).astype(np.uint8)
        out = largest_cc(vol)
        assert np.array_equal(out, largest_cc_oracle(vol))
        for c in (1, 2):
            assert len(components(out == c)) <= 1


def test_aggregate():
    assert aggregate([80, 90]) == (85.0, 5.0)
    assert aggregate([42.0]) == (42.0, 0.0)
    assert aggregate([80, None]) is None
    assert format_mean_std(None) == "N/A"
    assert format_mean_std((85.0, 5.0)) == "85.0±5.0"
    with pytest.raises(ArgumentError):
        aggregate([])


def test_metric_csv_round_trip_and_summary(tmp_path):
    gt = np.zeros((6, 6, 6), np.uint8)
    gt[1:4, 1:4, 1:4] = 1
    gt[4:6, 4:6, 4:6] = 2
    pred = gt.copy()
    pred[4:6, 4:6, 4:6] = 0     # class 2 missed entirely
    rows = [{"subject": "s0", **r} for r in evaluate_subject(pred, gt, 3)]
    rows += [{"subject": "s1", **r} for r in evaluate_subject(gt, gt, 3)]
    path = write_metrics_csv(rows, tmp_path / "m.csv")
    assert read_metrics_csv(path) == rows
    assert "s0,2,0.0,\n" in path.read_text()
    s = summarize(rows, 3)
    assert s["dice"]["per_class"][1] == (100.0, 0.0)
    assert s["dice"]["per_class"][2] == (50.0, 50.0)
    assert s["asd"]["per_class"][2] is None
    assert s["asd"]["mean"] is None
    assert s["dice"]["mean"] == (75.0, 25.0)
    assert mean_foreground_dice(rows) == 75.0
