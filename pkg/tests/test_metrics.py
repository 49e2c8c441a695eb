from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vreloc.autodiff import ContractError
from vreloc.baselines import chance_baseline
from vreloc.inference import DecodeConfig, Segment
from vreloc.metrics import (
    EvalResult, chance_expectation, evaluate, evaluate_by_class, legal_segments, tiou, tiou_exact,
)


def test_tiou_counts_inclusive_steps():
    assert tiou(Segment(1, 4), Segment(3, 6)) == 2 / 6
    assert tiou(Segment(2, 2), Segment(2, 2)) == 1.0
    assert tiou(Segment(1, 2), Segment(3, 4)) == 0.0
    assert tiou_exact(Segment(1, 10), Segment(1, 8)) == Fraction(4, 5)


@given(st.integers(1, 30), st.integers(0, 10), st.integers(1, 30), st.integers(0, 10))
def test_tiou_symmetric_and_bounded(s1, n1, s2, n2):
    a, b = Segment(s1, s1 + n1), Segment(s2, s2 + n2)
    assert tiou(a, b) == tiou(b, a)
    assert 0.0 <= tiou(a, b) <= 1.0


def test_threshold_boundaries_are_inclusive_and_exact():
    # tIoU exactly 0.6 and 0.7 must count at those thresholds
    gt = Segment(1, 10)
    res = evaluate([Segment(1, 6), Segment(1, 7)], [gt, gt])
    assert res.scores == (1.0, 1.0, 0.5, 0.0, 0.0)


def test_perfect_predictions_score_100():
    gts = [Segment(1, 3), Segment(4, 9)]
    res = evaluate(gts, gts)
    assert res.row("oracle") == "oracle\t100.0\t100.0\t100.0\t100.0\t100.0\t100.0"
    assert EvalResult.header() == "method\t0.5\t0.6\t0.7\t0.8\t0.9\tAverage"


def test_per_class_breakdown():
    res = evaluate_by_class([Segment(1, 2), Segment(5, 5)], [Segment(1, 2), Segment(1, 1)], ["b", "a"])
    assert list(res) == ["a", "b"]
    assert res["a"].average == 0.0 and res["b"].average == 1.0


def test_evaluate_rejects_mismatched_inputs():
    with pytest.raises(ContractError):
        evaluate([Segment(1, 1)], [])
    with pytest.raises(ContractError):
        evaluate([], [])


def test_legal_segment_count():
    assert len(legal_segments(5, DecodeConfig(32))) == 15
    assert len(legal_segments(5, DecodeConfig(2))) == 9


def test_chance_expectation_matches_monte_carlo():
    cfg = DecodeConfig(6)
    refs = [(10, Segment(3, 7)), (8, Segment(1, 2))]
    exp = chance_expectation(refs, cfg)
    rng = np.random.default_rng(0)
    n = 20000
    preds, gts = [], []
    for _ in range(n):
        r, gt = refs[int(rng.integers(2))]
        preds.append(chance_baseline(r, cfg, rng))
        gts.append(gt)
    mc = evaluate(preds, gts)
    np.testing.assert_allclose(mc.scores, exp.scores, atol=0.015)
