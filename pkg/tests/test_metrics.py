import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vesselseg.metrics import (
    GREEN, RED, MetricsError, diff_overlay, dice, evaluate, format_table, overlap_metrics, write_records,
)
from vesselseg.volume import mip

ALL_MASKS = [np.array(bits, bool).reshape(2, 2, 2) for bits in itertools.product([0, 1], repeat=8)]


def naive(p, r):
    ps = {i for i, b in enumerate(p.ravel()) if b}
    rs = {i for i, b in enumerate(r.ravel()) if b}
    if not ps and not rs:
        return 1.0, 1.0
    inter = len(ps & rs)
    return 2 * inter / (len(ps) + len(rs)), inter / len(ps | rs)


def test_exhaustive_against_set_counting():
    for p in ALL_MASKS:
        for r in ALL_MASKS:
            m = overlap_metrics(p, r)
            d, i = naive(p, r)
            assert m.dice == d and m.iou == i


@given(seed=st.integers(0, 2**31 - 1))
def test_iou_dice_identity_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    for _ in range(25):
        p = rng.random((4, 4, 4)) < rng.random()
        r = rng.random((4, 4, 4)) < rng.random()
        m = overlap_metrics(p, r)
        assert abs(m.iou - m.dice / (2 - m.dice)) < 1e-12
        back = overlap_metrics(r, p)
        assert back.dice == m.dice and back.iou == m.iou


@given(seed=st.integers(0, 2**31 - 1))
def test_adding_correct_voxel_never_lowers_dice(seed):
    rng = np.random.default_rng(seed)
    r = rng.random((4, 4, 4)) < 0.4
    p = rng.random((4, 4, 4)) < 0.4
    missing = np.argwhere(r & ~p)
    if len(missing):
        q = p.copy()
        q[tuple(missing[0])] = True
        assert dice(q, r) >= dice(p, r)


def test_examples():
    a = np.zeros((10, 1, 1), bool)
    assert overlap_metrics(a | True, a | True).dice == 1.0
    x = np.zeros((10, 1, 1), bool)
    y = x.copy()
    x[:3] = True
    y[5:] = True
    assert overlap_metrics(x, y).dice == 0 and overlap_metrics(x, y).iou == 0
    p = np.zeros((10, 1, 1), bool)
    r = np.zeros((10, 1, 1), bool)
    p[0:6] = True
    r[3:7] = True
    m = overlap_metrics(p, r)
    assert m.dice == pytest.approx(0.6) and m.iou == pytest.approx(3 / 7)
    with pytest.raises(MetricsError):
        overlap_metrics(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def _masks_with_dice(n):
    # |pred|=6, |ref|=4, overlap 3 gives dice 0.6
    p = np.zeros((10, 1, 1), bool)
    r = np.zeros((10, 1, 1), bool)
    p[0:6] = True
    r[3:7] = True
    return [p] * n, [r] * n


def test_evaluate_summary_and_table():
    preds, refs = _masks_with_dice(3)
    rep = evaluate(preds, refs, "Proposed", ["a", "b", "c"])
    assert rep.summary["dice"] == pytest.approx((0.6, 0.0))
    table = format_table([rep], ["Deep learning"])
    assert "60.00 ± 0.00" in table and "42.86 ± 0.00" in table and "Deep learning" in table


def test_single_volume_std_is_zero():
    preds, refs = _masks_with_dice(1)
    assert evaluate(preds, refs).summary["dice"][1] == 0.0


def test_std_is_sample_std():
    rng = np.random.default_rng(0)
    preds = [rng.random((5, 5, 5)) < 0.5 for _ in range(4)]
    refs = [rng.random((5, 5, 5)) < 0.5 for _ in range(4)]
    rep = evaluate(preds, refs)
    d = [dice(p, r) for p, r in zip(preds, refs)]
    assert rep.summary["dice"][1] == pytest.approx(np.std(d, ddof=1), rel=1e-12)


def test_records_jsonl(tmp_path):
    preds, refs = _masks_with_dice(2)
    write_records([evaluate(preds, refs, "m", ["a", "b"])], tmp_path / "r.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert [r["volume"] for r in rows] == ["a", "b", "mean"]
    assert rows[0]["tp"] == 3 and rows[-1]["n"] == 2


def test_overlay_colors_match_mip_counts(rng):
    ref = rng.random((6, 6, 4)) < 0.2
    pred = rng.random((6, 6, 4)) < 0.2
    base = mip(rng.random((6, 6, 4)), "z")
    img = diff_overlay(pred, ref, base, "z")
    pm, rm = mip(pred, "z"), mip(ref, "z")
    green = np.all(img == GREEN, axis=-1)
    red = np.all(img == RED, axis=-1)
    assert green.sum() == (pm & ~rm).sum()
    assert red.sum() == (~pm & rm).sum()


def test_overlay_set_logic(rng):
    ref = rng.random((6, 6, 4)) < 0.2
    base = np.zeros((6, 6))
    same = diff_overlay(ref, ref, base)
    assert not np.all(same == GREEN, axis=-1).any() and not np.all(same == RED, axis=-1).any()
    ref = ref.copy()
    ref[0, 0, :] = False
    sup = ref.copy()
    sup[0, 0, 1] = True  # strict superset, extra voxel in an empty column
    img = diff_overlay(sup, ref, base)
    assert np.all(img == GREEN, axis=-1).any() and not np.all(img == RED, axis=-1).any()
