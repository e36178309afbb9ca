import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpdg import tensor as T
from fpdg.encoder import SAM, BiLSTMInit, Encoder, build_memory, category_onehot, init_decoder, sam_encode
from fpdg.layers import ParamStore
from fpdg.model import FPDG, ModelConfig
from fpdg.tensor import Tensor


def _sam(d=3, seed=0, scale=0.5):
    store = ParamStore(seed=seed, scale=scale)
    return SAM(store, "s", d), store


def _ffn(sam, x):
    return T.relu(x @ sam.ff1.W + sam.ff1.b) @ sam.ff2.W + sam.ff2.b


def test_single_element(f64):
    sam, _ = _sam()
    x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 3)))
    h, alpha = sam_encode(sam, x, np.ones((1, 1), bool))
    assert alpha.data.tolist() == [[[1.0]]]
    expected = _ffn(sam, x + sam.v(x))
    np.testing.assert_allclose(h.data, expected.data, atol=1e-14)


def test_all_masked_raises():
    sam, _ = _sam()
    with pytest.raises(ValueError):
        sam_encode(sam, Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), bool))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_permutation_equivariance(n, seed):
    with T.precision(np.float64):
        sam, _ = _sam(seed=seed % 7)
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, n, 3))
        perm = rng.permutation(n)
        mask = np.ones((1, n), bool)
        h, _ = sam_encode(sam, Tensor(x), mask)
        hp, _ = sam_encode(sam, Tensor(x[:, perm]), mask)
        np.testing.assert_allclose(hp.data, h.data[:, perm], atol=1e-10)


def test_padded_positions_ignored(f64):
    sam, _ = _sam()
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 3, 3))
    h_short, a = sam_encode(sam, Tensor(x[:, :2]), np.ones((1, 2), bool))
    noisy = x.copy()
    noisy[:, 2] = 100.0
    h_pad, a_pad = sam_encode(sam, Tensor(noisy), np.array([[True, True, False]]))
    np.testing.assert_allclose(h_pad.data[:, :2], h_short.data, atol=1e-12)
    np.testing.assert_allclose(a_pad.data[0, :, 2], 0.0, atol=1e-12)
    np.testing.assert_allclose(a_pad.data.sum(-1), 1.0, atol=1e-6)


def test_hand_oracle_d2_t2(f64):
    sam, store = _sam(d=2, seed=5)
    P = {k: v.data for k, v in store.items()}
    x = [[0.3, -1.2], [0.8, 0.5]]

    def lin(vec, name):
        W, b = P[f"s.{name}.W"], P[f"s.{name}.b"]
        return [sum(vec[i] * W[i][j] for i in range(2)) + b[j] for j in range(2)]

    q = [lin(r, "q") for r in x]
    k = [lin(r, "k") for r in x]
    v = [lin(r, "v") for r in x]
    out = []
    for i in range(2):
        s = [sum(q[i][c] * k[j][c] for c in range(2)) for j in range(2)]
        m = max(s)
        e = [math.exp(z - m) for z in s]
        a = [z / sum(e) for z in e]
        beta = [sum(a[j] * v[j][c] for j in range(2)) for c in range(2)]
        hh = [x[i][c] + beta[c] for c in range(2)]
        inner = [max(0.0, z) for z in lin(hh, "ff1")]
        out.append(lin(inner, "ff2"))
    h, _ = sam_encode(sam, Tensor([x]), np.ones((1, 2), bool))
    np.testing.assert_allclose(h.data[0], out, atol=1e-10, rtol=0)


def _encoder(d=4, vocab=12, C=4, seed=0, **kw):
    store = ParamStore(seed=seed, scale=0.5)
    return Encoder(store, vocab, C, d, **kw), store


def test_alpha_rows_normalised(f64):
    enc, _ = _encoder()
    ids = np.array([[4, 5, 6, 7], [8, 9, 0, 0]])
    labs = np.array([[0, 1, 2, 3], [1, 1, 0, 0]])
    mask = ids != 0
    e, _, _ = enc(ids, labs, mask)
    for alpha in (e.word_alpha, e.label_alpha):
        np.testing.assert_allclose(alpha.sum(-1), 1.0, atol=1e-6)
        assert np.all(alpha[1][:, 2:] < 1e-12)


def test_identical_labels_give_identical_label_reps(f64):
    enc, _ = _encoder()
    m, _, _ = enc.encode_labels(np.full((1, 5), 2), np.ones((1, 5), bool))
    np.testing.assert_allclose(m.data[0], np.broadcast_to(m.data[0, :1], m.data[0].shape), atol=1e-14)


def test_label_sam_single_element(f64):
    enc, _ = _encoder()
    m, el, alpha = enc.encode_labels(np.array([[3]]), np.ones((1, 1), bool))
    assert alpha.data.tolist() == [[[1.0]]]
    np.testing.assert_allclose(m.data, _ffn(enc.label_sam, el + enc.label_sam.v(el)).data, atol=1e-14)


def test_label_sam_isolated_from_word_sam(f64):
    enc, store = _encoder()
    ids, labs = np.array([[4, 5, 6]]), np.array([[0, 1, 1]])
    mask = np.ones((1, 3), bool)
    before, _, _ = enc(ids, labs, mask)
    for k, p in store.items():
        if k.startswith("enc.word_sam"):
            p.data = p.data + 0.3
    after, _, _ = enc(ids, labs, mask)
    np.testing.assert_array_equal(after.m.data, before.m.data)
    assert not np.allclose(after.h.data, before.h.data)


def test_memory_single_category(f64):
    enc, _ = _encoder()
    _, mem, _ = enc(np.array([[4, 5, 6]]), np.array([[2, 2, 2]]), np.ones((1, 3), bool))
    nonzero = np.abs(mem.values.data[0]).sum(-1) > 0
    assert nonzero.tolist() == [False, False, True, False]
    assert mem.counts.tolist() == [[0, 0, 3, 0]]
    np.testing.assert_array_equal(mem.keys.data, enc.label_table.data)


def test_memory_empty_category_is_zero(f64):
    enc, _ = _encoder()
    _, mem, _ = enc(np.array([[4, 5, 6]]), np.array([[0, 1, 1]]), np.ones((1, 3), bool))
    assert np.all(mem.values.data[0, 2:] == 0.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=8), st.integers(0, 3))
def test_memory_counts_and_partition(labels, n_pad):
    with T.precision(np.float64):
        enc, _ = _encoder()
        labs = np.array([labels + [0] * n_pad])
        mask = np.array([[True] * len(labels) + [False] * n_pad])
        ids = np.full(labs.shape, 5)
        _, mem, _ = enc(ids, labs, mask)
        oracle = [sum(1 for x in labels if x == c) for c in range(4)]
        assert mem.counts[0].tolist() == oracle
        assert mem.counts.sum() == len(labels)
        onehot = category_onehot(labs, mask, 4)
        assert np.all(onehot.sum(1)[mask] == 1) and np.all(onehot.sum(1)[~mask] == 0)


def test_memory_values_equal_per_category_sam(f64):
    """Block-masked SAM over the whole set equals running the SAM on each category alone."""
    enc, _ = _encoder()
    ids = np.array([[4, 5, 6, 7, 8]])
    labs = np.array([[1, 3, 1, 1, 3]])
    _, mem, _ = enc(ids, labs, np.ones((1, 5), bool))
    emb = enc.word_table.data[ids[0]]
    for c in range(4):
        sel = labs[0] == c
        if not sel.any():
            continue
        h, _ = sam_encode(enc.word_sam, Tensor(emb[sel][None]), np.ones((1, sel.sum()), bool))
        np.testing.assert_allclose(mem.values.data[0, c], h.data[0].sum(0), atol=1e-12)


def _bilstm(d=3, zero=False):
    store = ParamStore(seed=2, scale=0.5)
    b = BiLSTMInit(store, "r", d, with_label=True)
    if zero:
        for p in store.values():
            p.data = np.zeros_like(p.data)
        b.to_w.b.data = np.array([0.1, -0.2, 0.3])
        b.to_l.b.data = np.array([-1.0, 0.0, 2.0])
    return b


@pytest.mark.parametrize("n", [1, 2, 5])
def test_init_shapes(f64, n):
    out = init_decoder(_bilstm(), Tensor(np.random.default_rng(n).normal(size=(2, n, 3))), np.ones((2, n), bool))
    assert out.wh.shape == (2, 3) and out.lh.shape == (2, 3)
    assert len(out.cells) == 3 and all(np.all(c.data == 0) for c in out.cells)
    assert np.all(np.isfinite(out.wh.data))


def test_init_zero_weights(f64):
    b = _bilstm(zero=True)
    out = init_decoder(b, Tensor(np.ones((1, 2, 3))), np.ones((1, 2), bool))
    np.testing.assert_allclose(out.wh.data[0], np.tanh([0.1, -0.2, 0.3]), atol=1e-15)
    np.testing.assert_allclose(out.lh.data[0], np.tanh([-1.0, 0.0, 2.0]), atol=1e-15)


def test_init_single_keyword_hand_oracle(f64):
    b = _bilstm(d=2)
    x = np.array([0.4, -0.7])

    def step(p):
        W, bias = p.W.data, p.b.data
        z = np.concatenate([x, np.zeros(2)]) @ W + bias
        sig = lambda v: 1 / (1 + np.exp(-v))
        i, f, o, g = sig(z[:2]), sig(z[2:4]), sig(z[4:6]), np.tanh(z[6:])
        c = i * g                      # c_prev = 0
        return o * np.tanh(c)

    both = np.concatenate([step(b.fwd), step(b.bwd)])
    out = init_decoder(b, Tensor(x[None, None]), np.ones((1, 1), bool))
    np.testing.assert_allclose(out.wh.data[0], np.tanh(both @ b.to_w.W.data + b.to_w.b.data), atol=1e-12)
    np.testing.assert_allclose(out.lh.data[0], np.tanh(both @ b.to_l.W.data + b.to_l.b.data), atol=1e-12)


def test_init_padding_carries_state(f64):
    b = _bilstm()
    x = np.random.default_rng(1).normal(size=(1, 3, 3))
    short = init_decoder(b, Tensor(x[:, :2]), np.ones((1, 2), bool))
    padded = init_decoder(b, Tensor(x), np.array([[True, True, False]]))
    np.testing.assert_allclose(padded.wh.data, short.wh.data, atol=1e-12)


def test_encoder_params_prefixed():
    _, store = _encoder()
    assert all(k.startswith("enc.") for k in store)


def test_build_memory_direct(f64):
    enc, _ = _encoder()
    emb = T.embedding(enc.word_table, np.array([[4, 5]]))
    mem = build_memory(enc.word_sam, emb, np.array([[0, 1]]), np.ones((1, 2), bool), enc.label_table)
    # one word per category: each slot is the single-element SAM of that word
    for j in range(2):
        e = Tensor(emb.data[:, j:j + 1])
        np.testing.assert_allclose(mem.values.data[0, j], _ffn(enc.word_sam, e + enc.word_sam.v(e)).data[0, 0],
                                   atol=1e-12)


def test_embedding_tables_are_standard_normal():
    m = FPDG(ModelConfig(vocab_size=400, n_labels=40, d=32))
    for name in ("enc.word_emb", "enc.label_emb"):
        x = m.params[name].data
        assert abs(x.mean()) < 0.05 and abs(x.std() - 1.0) < 0.05
    assert np.abs(m.params["enc.word_sam.q.W"].data).max() <= 0.08
