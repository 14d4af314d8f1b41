import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from treeattn import autodiff as ad
from treeattn.attention import (
    AttentionSpec,
    ConfigurationError,
    QueryContext,
    align,
    attend,
    init_kqv,
    init_soft,
    kqv_project,
    model1_attend,
    model2_attend,
    query_vector,
    soft_attention,
)
from treeattn.autodiff import NumericError, ParamStore, Tensor
from treeattn.cells import init_lstm, lstm_encode

D = 4


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(1e-300, np.maximum(np.abs(a), np.abs(b)))))


def store_for(kind, d=D, seed=0, scale=0.7):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    if kind == "soft":
        init_soft(store, "soft", d, rng)
    else:
        init_kqv(store, "kqv", kind, d, d, rng)
    init_lstm(store, "phrase", d, d, rng)
    for name in store:
        store[name][...] = rng.normal(0.0, scale, size=store[name].shape)
    return store


def raw(store, group):
    return {k: t.data for k, t in store.bind(None)[group].items()}


def rows(rng, n, d=D):
    return rng.normal(size=(n, d))


# -- soft attention -----------------------------------------------------------------------

def test_soft_single_child_alpha_is_exactly_one():
    rng = np.random.default_rng(0)
    p = store_for("soft").bind(None)["soft"]
    _, alpha = soft_attention([Tensor(rows(rng, 1))], Tensor(rows(rng, 1)), p)
    assert alpha.data.tolist() == [[1.0]]


def test_soft_identical_children_uniform():
    rng = np.random.default_rng(1)
    p = store_for("soft", seed=1).bind(None)["soft"]
    h = rows(rng, 1)
    _, alpha = soft_attention([Tensor(h)] * 3, Tensor(rows(rng, 1)), p)
    assert np.allclose(alpha.data, 1 / 3, rtol=0, atol=1e-15)


def test_soft_matches_equations():
    rng = np.random.default_rng(2)
    store = store_for("soft", seed=2)
    hs, s = rows(rng, 3), rows(rng, 1)[0]
    h, alpha = soft_attention([Tensor(x) for x in hs], Tensor(s), store.bind(None)["soft"])
    h_ref, a_ref = oracles.soft(raw(store, "soft"), list(hs), s)
    assert rel_err(h.data[0], h_ref) <= 1e-10
    assert rel_err(alpha.data[0], a_ref) <= 1e-10


def test_soft_degenerate_denominator_reported():
    store = store_for("soft")
    p = store.bind(None)["soft"]
    p["w"] = Tensor(np.zeros((1, D)))
    with pytest.raises(NumericError, match="degenerate"):
        soft_attention([Tensor(np.ones((1, D)))] * 2, Tensor(np.ones((1, D))), p)


# -- projections and alignment ----------------------------------------------------------------

def test_kqv_identity_projection():
    rng = np.random.default_rng(3)
    I = Tensor(np.eye(D))
    Mk, Mq = Tensor(rows(rng, 3)), Tensor(rows(rng, 2))
    key, query, value = kqv_project(Mk, Mq, {"W_k": I, "W_q": I, "W_v": I})
    assert np.array_equal(key.data, Mk.data)
    assert np.array_equal(query.data, Mq.data)
    assert np.array_equal(value.data, Mk.data)


def test_kqv_shapes_and_values():
    rng = np.random.default_rng(4)
    p = store_for("model1", d=3, seed=4).bind(None)["kqv"]
    one = kqv_project(Tensor(rows(rng, 1, 3)), Tensor(rows(rng, 1, 3)), p)
    assert all(t.shape == (1, 3) for t in one)
    Mk, Mq = rows(rng, 2, 3), rows(rng, 2, 3)
    key, query, value = kqv_project(Tensor(Mk), Tensor(Mq), p)
    Wk, Wq, Wv = (p[n].data for n in ("W_k", "W_q", "W_v"))
    hand = lambda A, W: [[sum(A[i][k] * W[j][k] for k in range(3)) for j in range(3)] for i in range(2)]
    assert np.allclose(key.data, hand(Mk, Wk), rtol=1e-14)
    assert np.allclose(query.data, hand(Mq, Wq), rtol=1e-14)
    assert np.allclose(value.data, hand(Mk, Wv), rtol=1e-14)
    assert kqv_project(Tensor(Mk), Tensor(Mq), p, with_value=False)[2] is None


def test_align_identical_keys_half():
    rng = np.random.default_rng(5)
    k = rows(rng, 1)
    alpha = align(Tensor(rows(rng, 1)), Tensor(np.vstack([k, k])))
    assert alpha.data.tolist() == [[0.5, 0.5]]


@pytest.mark.parametrize("mode", ["softmax", "plain"])
def test_align_single_key(mode):
    alpha = align(Tensor([[0.3, -0.2]]), Tensor([[1.0, 0.4]]), mode)
    assert alpha.data.tolist() == [[1.0]]


def test_align_closed_form():
    # query = key = 2**0.25 * I gives q k^T / sqrt(2) = I exactly in exact arithmetic
    q = Tensor(np.eye(2) * 2 ** 0.25)
    alpha = align(q, q).data
    e = math.e
    assert np.allclose(alpha, [[e / (e + 1), 1 / (e + 1)], [1 / (e + 1), e / (e + 1)]], rtol=1e-14)
    assert np.allclose(alpha[0], [0.7311, 0.2689], atol=1e-4)


def test_align_plain_mode():
    alpha = align(Tensor([[1.0, 1.0]]), Tensor([[1.0, 0.0], [0.0, 3.0]]), "plain").data
    assert np.allclose(alpha, [[0.25, 0.75]], rtol=1e-14)


@settings(deadline=None, max_examples=100)
@given(arrays(np.float64, (3, 5), elements=st.floats(-20, 20)), st.floats(-100, 100))
def test_alignment_rows_sum_to_one_and_shift_invariant(scores, shift):
    a = ad.softmax(Tensor(scores)).data
    b = ad.softmax(Tensor(scores + shift)).data
    assert np.all(np.abs(a.sum(axis=1) - 1.0) < 1e-9)
    assert np.allclose(a, b, rtol=0, atol=1e-12)


@settings(deadline=None, max_examples=100)
@given(arrays(np.float64, (2, 4), elements=st.floats(0.01, 10)))
def test_plain_rows_sum_to_one(scores):
    out = ad.normalize_rows(Tensor(scores)).data
    assert np.all(np.abs(out.sum(axis=1) - 1.0) < 1e-6)


# -- query sources -----------------------------------------------------------------------------

def test_query_vector_sources():
    rng = np.random.default_rng(6)
    store = store_for("model1", seed=6, scale=0.5)
    phrase = store.bind(None)["phrase"]
    Mk = Tensor(rows(rng, 3))
    ctx = QueryContext(Tensor(rows(rng, 1)), Tensor(rows(rng, 1)))
    assert query_vector("self", Mk, ctx) is Mk
    assert query_vector("other_sentence", Mk, ctx) is ctx.other_sentence_vec
    assert query_vector("own", Mk, ctx) is ctx.own_sentence_vec
    two = Tensor(rows(rng, 2))
    got = query_vector("phrase", two, ctx, phrase)
    assert got.shape == (1, D)
    ref = oracles.lstm_run(raw(store, "phrase"), list(two.data))
    assert rel_err(got.data[0], ref) <= 1e-12
    assert np.array_equal(got.data, lstm_encode(phrase, [Tensor(r) for r in two.data]).data)


def test_query_vector_missing_context():
    with pytest.raises(ConfigurationError):
        query_vector("other_sentence", Tensor(np.ones((2, D))), QueryContext())
    with pytest.raises(ConfigurationError):
        query_vector("phrase", Tensor(np.ones((2, D))), None)


def test_soft_requires_vector_query():
    with pytest.raises(ConfigurationError):
        AttentionSpec("soft", "self")


# -- model 1 / model 2 ------------------------------------------------------------------------------

SPECS = {src: AttentionSpec("model1", src) for src in ("self", "own_sentence", "other_sentence", "phrase")}


def context(rng):
    return QueryContext(Tensor(rows(rng, 1)), Tensor(rows(rng, 1)))


@pytest.mark.parametrize("source", sorted(SPECS))
def test_model1_single_child_returns_value(source):
    rng = np.random.default_rng(7)
    store = store_for("model1", seed=7)
    b = store.bind(None)
    h = Tensor(rows(rng, 1))
    (out,), alpha = model1_attend(h, AttentionSpec("model1", source), context(rng), b["kqv"],
                                  phrase=b["phrase"])
    assert alpha.data.tolist() == [[1.0]]
    assert np.array_equal(out.data, ad.linear(h, b["kqv"]["W_v"]).data)


def test_model1_self_identical_children():
    rng = np.random.default_rng(8)
    b = store_for("model1", seed=8).bind(None)
    h = rows(rng, 1)
    Mk = Tensor(np.vstack([h, h]))
    outs, alpha = model1_attend(Mk, SPECS["self"], None, b["kqv"], n_out=2)
    value = ad.linear(Mk, b["kqv"]["W_v"]).data
    assert np.allclose(alpha.data, 0.5, rtol=0, atol=1e-12)
    for o in outs:
        assert np.allclose(o.data[0], value.mean(axis=0), rtol=1e-14)


@pytest.mark.parametrize("kind", ["model1", "model2"])
@pytest.mark.parametrize("source", ["self", "other_sentence", "phrase"])
@pytest.mark.parametrize("n_out", [1, 2])
@pytest.mark.parametrize("mode", ["softmax", "plain"])
def test_kqv_models_match_equations(kind, source, n_out, mode):
    rng = np.random.default_rng(9)
    store = store_for(kind, seed=9, scale=0.5)
    b = store.bind(None)
    n = 3 if n_out == 1 else 2
    hs = rows(rng, n)
    ctx = context(rng)
    spec = AttentionSpec(kind, source, mode)
    fn = model1_attend if kind == "model1" else model2_attend
    outs, alpha = fn(Tensor(hs), spec, ctx, b["kqv"], n_out=n_out, phrase=b["phrase"])
    if source == "self":
        qv = None
    elif source == "other_sentence":
        qv = ctx.other_sentence_vec.data[0]
    else:
        qv = oracles.lstm_run(raw(store, "phrase"), list(hs))
    oracle = oracles.model1 if kind == "model1" else oracles.model2
    ref_outs, ref_alpha = oracle(raw(store, "kqv"), list(hs), qv, n_out, mode)
    assert len(outs) == n_out
    assert rel_err(alpha.data, ref_alpha) <= 1e-10
    for o, r in zip(outs, ref_outs):
        assert o.shape == (1, D)
        assert rel_err(o.data[0], r) <= 1e-10


def test_model2_single_child():
    rng = np.random.default_rng(10)
    b = store_for("model2", seed=10).bind(None)
    h = Tensor(rows(rng, 1))
    (out,), _ = model2_attend(h, AttentionSpec("model2", "other_sentence"), context(rng), b["kqv"])
    ref = np.tanh(h.data @ b["kqv"]["W"].data.T + b["kqv"]["b"].data)
    assert np.allclose(out.data, ref, rtol=1e-14)


def test_model2_zero_affine():
    rng = np.random.default_rng(11)
    b = store_for("model2", seed=11).bind(None)
    b["kqv"]["W"] = Tensor(np.zeros((D, D)))
    b["kqv"]["b"] = Tensor(np.zeros((1, D)))
    outs, _ = model2_attend(Tensor(rows(rng, 3)), AttentionSpec("model2", "self"), None, b["kqv"], n_out=1)
    assert np.array_equal(outs[0].data, np.zeros((1, D)))


@pytest.mark.parametrize("kind", ["model1", "model2"])
@pytest.mark.parametrize("source", ["self", "own_sentence", "other_sentence", "phrase"])
def test_output_widths_and_counts(kind, source):
    rng = np.random.default_rng(12)
    b = store_for(kind, seed=12).bind(None)
    spec = AttentionSpec(kind, source)
    for n_out, n in ((1, 4), (2, 2)):
        outs, alpha = attend(Tensor(rows(rng, n)), spec, context(rng), b, n_out=n_out)
        assert len(outs) == n_out
        assert all(o.shape == (1, D) for o in outs)
        assert np.all(np.abs(alpha.data.sum(axis=1) - 1.0) < 1e-9)


# soft attention only ever runs under the child-sum cell, so with one output
@pytest.mark.parametrize("kind,source,n_out", [
    ("soft", "own_sentence", 1), ("soft", "other_sentence", 1), ("soft", "phrase", 1),
    *[(k, s, n) for k, s in (("model1", "self"), ("model1", "other_sentence"), ("model1", "phrase"),
                             ("model2", "self"), ("model2", "own_sentence"), ("model2", "phrase"))
      for n in (1, 2)],
])
def test_attention_gradients(kind, source, n_out):
    rng = np.random.default_rng(13)
    store = store_for(kind, seed=13, scale=0.4)
    # soft weights stay positive-sum for a stable ratio
    if kind == "soft":
        store["soft.w"][...] = np.abs(store["soft.w"]) + 0.5
        store["soft.U_m"][...] *= 0.1
    n = 3 if n_out == 1 else 2
    store.add("in.M", rows(rng, n) * 0.8)
    store.add("in.s", rows(rng, 1) * 0.8)
    spec = AttentionSpec(kind, source)

    def f(b):
        ctx = QueryContext(b["in"]["s"], b["in"]["s"])
        outs, _ = attend(b["in"]["M"], spec, ctx, b, n_out=n_out)
        total = ad.total(outs[0])
        for o in outs[1:]:
            total = total + ad.total(o)
        return total

    assert ad.grad_check(f, store) < 1e-4
