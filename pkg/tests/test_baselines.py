import numpy as np
import pytest

from vreloc.autodiff import ContractError
from vreloc.baselines import (
    VideoConfig, candidate_embeddings, chance_baseline, distance_table, encode,
    frame_level_baseline, run_baseline, select_nearest, triplet_loss, video_level_search,
    video_level_train,
)
from vreloc.data import SynthConfig, synthesize
from vreloc.inference import DecodeConfig, Segment
from vreloc.layers import LstmParams
from vreloc.metrics import evaluate


def test_chance_draws_are_legal_and_cover_all_segments():
    rng = np.random.default_rng(0)
    cfg = DecodeConfig(3)
    seen = {chance_baseline(5, cfg, rng) for _ in range(2000)}
    assert seen == {Segment(s, e) for s in range(1, 6) for e in range(s, min(5, s + 2) + 1)}


def test_distance_table_is_zero_on_identical_directions(rng):
    X = rng.standard_normal((4, 3))
    D = distance_table(X, 2.0 * X)
    np.testing.assert_allclose(np.diag(D), 0.0, atol=1e-7)
    assert D.shape == (3, 3)


def test_frame_level_finds_an_exact_copy(rng):
    Q = rng.standard_normal((8, 4))
    R = np.concatenate([rng.standard_normal((8, 5)), Q, rng.standard_normal((8, 3))], axis=1)
    seg, cost = frame_level_baseline(Q, R)
    assert seg == Segment(6, 9)
    assert cost < 1e-7


def test_frame_level_follows_a_time_stretched_copy(rng):
    Q = rng.standard_normal((8, 3))
    stretched = np.repeat(Q, 2, axis=1)
    R = np.concatenate([rng.standard_normal((8, 4)), stretched, rng.standard_normal((8, 4))], axis=1)
    # ending on either copy of the last query frame costs zero; ties keep the shorter span
    assert frame_level_baseline(Q, R)[0] == Segment(5, 9)


def test_frame_level_respects_max_len(rng):
    Q = rng.standard_normal((6, 5))
    seg, _ = frame_level_baseline(Q, rng.standard_normal((6, 20)), DecodeConfig(4))
    assert seg.length <= 4


def test_frame_level_perfect_on_noiseless_orthogonal_set():
    cfg = SynthConfig(n_classes=10, segments_per_class=3, d=40, sigma=0, warp_min=1, warp_max=1,
                      jitter=0, n_distractors=0, background="orthogonal", nuisance=0)
    ds = synthesize(cfg)
    recs = ds.train + ds.test
    preds = [s for s, _ in run_baseline("frame", recs, DecodeConfig())]
    assert evaluate(preds, [r.gt for r in recs]).average == 1.0


def test_triplet_loss_hinge():
    from vreloc.autodiff import Tensor
    a, p, n = Tensor(np.array([1.0, 0])), Tensor(np.array([1.0, 0])), Tensor(np.array([0.0, 1]))
    assert triplet_loss(a, p, n, 0.2).data[0] == 0.0
    assert abs(triplet_loss(a, n, p, 0.2).data[0] - 2.2) < 1e-12


def test_encoder_output_is_unit_norm(rng):
    enc = LstmParams.init(rng, 3, 5)
    assert abs(np.linalg.norm(encode(enc, rng.standard_normal((3, 4))).data) - 1) < 1e-9


def test_candidate_embeddings_match_individual_encodings(rng):
    enc = LstmParams.init(rng, 3, 5)
    R = rng.standard_normal((3, 7))
    segs, emb = candidate_embeddings(enc, R, DecodeConfig(4))
    assert len(segs) == emb.shape[1] == 7 + 6 + 5 + 4
    for i in (0, 5, len(segs) - 1):
        s = segs[i]
        np.testing.assert_allclose(emb[:, i], encode(enc, R[:, s.s - 1:s.e]).data, atol=1e-9)


def test_candidate_stride(rng):
    enc = LstmParams.init(rng, 3, 5)
    segs, _ = candidate_embeddings(enc, rng.standard_normal((3, 9)), DecodeConfig(9), stride=3)
    assert all((s.s - 1) % 3 == 0 and s.length % 3 == 1 for s in segs)


def test_select_nearest_prefers_first_on_ties():
    emb = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    cands = [Segment(1, 1), Segment(2, 2), Segment(3, 3)]
    assert select_nearest(np.array([1.0, 0.0]), cands, emb) == Segment(1, 1)


def test_video_level_training_reduces_triplet_loss():
    ds = synthesize(SynthConfig(n_classes=10, segments_per_class=4, seg_len_max=8, bg_len_max=10))
    history = []
    enc = video_level_train(ds, DecodeConfig(), VideoConfig(l=8, epochs=4), history)
    assert len(history) == 4 and history[-1] < history[0]
    seg = video_level_search(enc, ds.test[0].query, ds.test[0].reference)
    seg.check_within(ds.test[0].r)


def test_run_baseline_errors():
    ds = synthesize(SynthConfig(n_classes=3, segments_per_class=1))
    with pytest.raises(ContractError):
        run_baseline("video", ds.test, DecodeConfig())
    with pytest.raises(ContractError):
        run_baseline("oracle", ds.test, DecodeConfig())
