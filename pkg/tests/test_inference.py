import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vreloc.autodiff import ContractError
from vreloc.inference import DecodeConfig, Segment, brute_force_decode, decode


def random_table(rng, r):
    p = rng.dirichlet(np.ones(4), size=r).T
    return np.maximum(p, 1e-6)


def test_segment_validation():
    assert Segment(2, 5).length == 4
    for s, e in [(0, 3), (4, 3)]:
        with pytest.raises(ContractError):
            Segment(s, e)
    with pytest.raises(ContractError):
        Segment(2, 9).check_within(8)


def test_decode_matches_brute_force_on_random_tables():
    rng = np.random.default_rng(0)
    for _ in range(100):
        r = int(rng.integers(1, 21))
        cfg = DecodeConfig(int(rng.integers(1, 25)))
        P = random_table(rng, r)
        (a, sa), (b, sb) = decode(P, cfg), brute_force_decode(P, cfg)
        assert a == b
        assert abs(sa - sb) <= 1e-12 * max(1.0, abs(sb))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 14), st.integers(0, 2**31 - 1))
def test_decode_respects_max_len_and_bounds(r, max_len, seed):
    P = random_table(np.random.default_rng(seed), r)
    seg, _ = decode(P, DecodeConfig(max_len))
    assert 1 <= seg.s <= seg.e <= r
    assert seg.length <= max_len


def test_decode_score_is_log_of_product_form():
    P = np.full((4, 3), 0.25)
    P[0, 1], P[1, 2], P[2, 1:] = 0.7, 0.6, [0.5, 0.8]
    seg, score = decode(P)
    assert seg == Segment(2, 3)
    assert math.isclose(score, math.log(0.7 * 0.6 * math.sqrt(0.5 * 0.8)), rel_tol=1e-14)


def test_exact_ties_prefer_smaller_start_then_end():
    P = np.full((4, 5), 0.25)
    seg, _ = decode(P, DecodeConfig(5))
    assert seg == Segment(1, 1)
    assert brute_force_decode(P, DecodeConfig(5))[0] == Segment(1, 1)


def test_bad_tables_rejected():
    with pytest.raises(ContractError):
        decode(np.zeros((3, 4)))
    with pytest.raises(ContractError):
        decode(np.zeros((4, 0)))
    with pytest.raises(ContractError):
        DecodeConfig(0)
