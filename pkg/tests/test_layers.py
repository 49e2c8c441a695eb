import numpy as np
import pytest

from vreloc import autodiff as ad
from vreloc.autodiff import DimensionError, Tensor
from vreloc.layers import (
    AttentionParams, BilinearParams, CrossGateParams, LstmParams, aggregate, attend,
    bilinear_expansion, bilinear_full_oracle, bilinear_match, cross_gate, lstm_step, zero_state,
)


def test_lstm_init_biases(rng):
    p = LstmParams.init(rng, 3, 4)
    np.testing.assert_array_equal(p.b.data, [0] * 4 + [1] * 4 + [0] * 8)
    assert p.W.shape == (16, 3) and p.U.shape == (16, 4)
    assert np.all(np.abs(p.W.data) <= 1 / np.sqrt(3))


def test_lstm_step_matches_hand_computation(rng):
    p = LstmParams.init(rng, 3, 2)
    x, h, c = rng.standard_normal(3), rng.standard_normal(2), rng.standard_normal(2)
    z = p.W.data @ x + p.U.data @ h + p.b.data
    sig = lambda v: 1 / (1 + np.exp(-v))
    i, f, g, o = sig(z[0:2]), sig(z[2:4]), np.tanh(z[4:6]), sig(z[6:8])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    hh, cc = lstm_step(p, Tensor(x), (Tensor(h), Tensor(c)))
    np.testing.assert_allclose(cc.data, c_new, rtol=1e-13)
    np.testing.assert_allclose(hh.data, h_new, rtol=1e-13)


def test_batched_lstm_step_matches_columns(rng):
    p = LstmParams.init(rng, 3, 4)
    X = rng.standard_normal((3, 5))
    hb, _ = lstm_step(p, Tensor(X), zero_state(p, batch=5))
    for j in range(5):
        h, _ = lstm_step(p, Tensor(X[:, j]), zero_state(p))
        np.testing.assert_allclose(hb.data[:, j], h.data, rtol=1e-13)


def test_aggregate_returns_one_state_per_step(rng):
    p = LstmParams.init(rng, 3, 4)
    hs = aggregate(p, Tensor(rng.standard_normal((3, 6))))
    assert len(hs) == 6 and all(h.shape == (4,) for h in hs)
    with pytest.raises(DimensionError):
        aggregate(p, Tensor(rng.standard_normal((2, 6))))


def test_attention_weights_form_a_distribution(rng):
    l, q = 4, 5
    p = AttentionParams.init(rng, l)
    Hq = Tensor(rng.standard_normal((l, q)))
    hbar, alpha = attend(p, Hq, Tensor(rng.standard_normal(l)), Tensor(np.zeros(l)))
    assert alpha.shape == (q,)
    assert abs(alpha.data.sum() - 1) < 1e-12
    np.testing.assert_allclose(hbar.data, Hq.data @ alpha.data)


def test_attention_gradients(rng):
    l, q = 3, 4
    p = AttentionParams.init(rng, l)
    Hq = Tensor(rng.standard_normal((l, q)))
    hr, hf = Tensor(rng.standard_normal(l)), Tensor(rng.standard_normal(l))
    w = Tensor(rng.standard_normal(l))
    f = lambda: ad.total(ad.mul(attend(p, Hq, hr, hf)[0], w))
    blocks = dict(p.named("att.")) | {"Hq": Hq, "hr": hr, "hf": hf}
    # the score bias cancels in the softmax, so its true gradient is exactly
    # zero and double-precision differences would be pure roundoff
    report = ad.grad_check(f, blocks, eps=1e-5, tol=1e-6, precision="extended")
    assert report.passed, report.lines()
    with ad.Tape() as tape:
        out = f()
    assert np.all(np.abs(tape.gradient(out, [p.b])[0]) < 1e-15)


def test_cross_gate_each_stream_gated_by_the_other(rng):
    l = 3
    p = CrossGateParams.init(rng, l)
    hq, hr = rng.standard_normal(l), rng.standard_normal(l)
    gq, gr = cross_gate(p, Tensor(hq), Tensor(hr))
    sig = lambda v: 1 / (1 + np.exp(-v))
    np.testing.assert_allclose(gq.data, hq * sig(p.Wr.data @ hr + p.br.data), rtol=1e-13)
    np.testing.assert_allclose(gr.data, hr * sig(p.Wq.data @ hq + p.bq.data), rtol=1e-13)


def test_bilinear_parameter_count():
    for l, k in [(4, 1), (8, 2), (32, 4), (128, 8)]:
        assert BilinearParams.init(np.random.default_rng(0), l, k).num_scalars() == k * l * (l + 1)


def test_bilinear_match_equals_expansion(rng):
    p = BilinearParams.init(rng, 6, 3)
    p.bf.data = rng.standard_normal(p.bf.shape)
    for _ in range(10):
        hq, hr = rng.standard_normal(6), rng.standard_normal(6)
        t = bilinear_match(p, Tensor(hq), Tensor(hr)).data
        np.testing.assert_allclose(t, bilinear_expansion(p, hq, hr), rtol=0, atol=1e-10)


def test_bilinear_match_equals_the_full_bilinear_form_it_factorizes(rng):
    # W_j = F_j^T F_j, linear term b_j^T F_j (hq + hr), bias |b_j|^2, except the
    # linear term is not captured by the pure bilinear form; check with b = 0
    l, k = 5, 2
    p = BilinearParams.init(rng, l, k)
    Wb = np.stack([p.factor(j)[0].T @ p.factor(j)[0] for j in range(l)])
    hq, hr = rng.standard_normal(l), rng.standard_normal(l)
    np.testing.assert_allclose(bilinear_match(p, Tensor(hq), Tensor(hr)).data,
                               bilinear_full_oracle(Wb, np.zeros(l), hq, hr), atol=1e-12)


def test_bilinear_gradients(rng):
    p = BilinearParams.init(rng, 4, 2)
    p.bf.data = rng.standard_normal(p.bf.shape)
    hq, hr = Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(4))
    w = Tensor(rng.standard_normal(4))
    f = lambda: ad.total(ad.mul(bilinear_match(p, hq, hr), w))
    report = ad.grad_check(f, dict(p.named("bil.")) | {"hq": hq, "hr": hr}, eps=1e-5, tol=1e-6)
    assert report.passed, report.lines()
