import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import assert_grad_close, central_diff, sample_indices
from retrocast import kbase
from retrocast.numkit import ActivationCache, ConfigError, Grads, Mlp, SGD, softmax
from retrocast.retriever import (
    RetrievalResult,
    Retriever,
    RetrieverHyper,
    augment,
    cosine_top_k,
    random_k,
    retrieval_loss,
    target_distribution,
    top_k,
)
from retrocast.tsdata import Series, instance_normalize


def _kb(n_per=20, sl=16, seed=0):
    rng = np.random.default_rng(seed)
    corpus = [Series(rng.standard_normal(sl * n_per), "v", f"{d}0", d) for d in "ABC"]
    return kbase.build(corpus, sl, n_per, seed)


def test_defaults():
    h = RetrieverHyper()
    assert (h.k, h.tau_m, h.tau_s, h.rho) == (8, 0.1, 1.0, 0.2)
    with pytest.raises(ConfigError):
        RetrieverHyper(k=0)
    with pytest.raises(ConfigError):
        RetrieverHyper(rho=1.5)


def test_encoder_shapes():
    r = Retriever.init(16, np.random.default_rng(0))
    assert r.query_encoder.sizes == [16, 64, 64] and r.cand_encoder.sizes == [16, 64, 64]
    assert r.query_encoder is not r.cand_encoder
    assert r.query_encoder.tanh_output
    with pytest.raises(ConfigError):
        Retriever(r.query_encoder, r.query_encoder)


def test_scores_are_dot_products():
    q = Mlp([(np.zeros((2, 3)), np.array([1.0, 0.0]))])
    c = Mlp([(np.zeros((2, 3)), np.zeros(2))])
    enc = np.array([[0.5, 9.0], [2.0, 9.0]])
    q.tanh_output = c.tanh_output = False
    r = Retriever(q, c)
    kb = kbase.KnowledgeBase(np.ones((2, 3)), ["A", "A"], ["a", "b"], [("v", 0), ("v", 0)])
    np.testing.assert_array_equal(r.score_all(np.arange(3.0), kb, [0, 1], cand_table=enc), [0.5, 2.0])


def test_score_all_matches_loop_and_is_order_free():
    kb = _kb()
    r = Retriever.init(16, np.random.default_rng(1))
    x = np.random.default_rng(2).standard_normal(16)
    elig = np.arange(kb.n_kb)
    s = r.score_all(x, kb, elig)
    qv = r.query_encoder.forward(instance_normalize(x)[0])
    loop = np.array([float(r.cand_encoder.forward(instance_normalize(kb.values[j])[0]) @ qv) for j in elig])
    np.testing.assert_allclose(s, loop, rtol=1e-12, atol=1e-12)
    perm = np.random.default_rng(3).permutation(elig)
    np.testing.assert_allclose(r.score_all(x, kb, perm), s[perm], rtol=1e-12, atol=1e-12)
    with pytest.raises(ConfigError):
        r.score_all(x, kb, [])


def test_duplicate_candidates_tie():
    v = np.random.default_rng(0).standard_normal(16)
    kb = kbase.KnowledgeBase(np.stack([v, v]), ["A", "B"], ["a", "b"], [("v", 0), ("v", 0)])
    r = Retriever.init(16, np.random.default_rng(1))
    s = r.score_all(np.arange(16.0), kb, [0, 1])
    assert s[0] == s[1]


def test_top_k_examples():
    np.testing.assert_array_equal(top_k([3, 1, 2], 2), [0, 2])
    np.testing.assert_array_equal(top_k([5, 5, 5, 5], 3), [0, 1, 2])
    with pytest.raises(ConfigError):
        top_k([1, 2], 3)


def test_top_k_matches_full_sort():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        s = rng.integers(-5, 5, rng.integers(1, 40)).astype(float)
        k = int(rng.integers(1, len(s) + 1))
        oracle = sorted(range(len(s)), key=lambda i: (-s[i], i))[:k]
        np.testing.assert_array_equal(top_k(s, k), oracle)


def test_target_examples():
    np.testing.assert_allclose(target_distribution([-0.3] * 4, 0.1), [0.25] * 4, atol=1e-15)
    np.testing.assert_allclose(target_distribution([0.0, math.log(2)], 1.0), [1 / 3, 2 / 3], atol=1e-15)
    with pytest.raises(ConfigError):
        target_distribution([1.0], 0.0)


def test_better_candidate_gets_more_mass():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        mse = rng.uniform(0, 2, rng.integers(2, 10))
        p = target_distribution(-mse, 0.1)
        for i in range(len(mse)):
            for j in range(len(mse)):
                if mse[i] < mse[j]:
                    assert p[i] >= p[j]
                    if mse[j] - mse[i] > 1e-3:
                        assert p[i] > p[j]


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-5, 5)), st.floats(0.1, 10), st.floats(0.1, 5))
def test_metric_rescaling_identity(m, c, tau):
    np.testing.assert_allclose(target_distribution(m * c, tau * c), target_distribution(m, tau), atol=1e-12)


def test_retrieval_loss_examples():
    p = softmax([0.2, -1.0, 0.4], 2.0)
    loss, g = retrieval_loss([0.2, -1.0, 0.4], p, 2.0)
    assert abs(loss) < 1e-12 and np.all(np.abs(g) < 1e-12)
    loss, _ = retrieval_loss([0.0, 0.0], [1.0, 0.0], 1.0)
    assert loss == pytest.approx(math.log(2), abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_retrieval_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(8)
    p = rng.dirichlet(np.ones(8))
    tau = rng.uniform(0.5, 2)
    _, g = retrieval_loss(s, p, tau)
    num = central_diff(lambda: retrieval_loss(s, p, tau)[0], s, h=1e-6)
    np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 10), st.floats(0.05, 5))
def test_retrieval_loss_non_negative(seed, k, tau):
    rng = np.random.default_rng(seed)
    loss, _ = retrieval_loss(rng.standard_normal(k) * 3, rng.dirichlet(np.ones(k)), tau)
    assert loss >= -1e-12


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_encoder_gradients_through_loss(seed):
    """Both towers, chained from dL/dS through the dot products."""
    rng = np.random.default_rng(seed)
    r = Retriever.init(12, rng, e=5, hidden=10)
    r.cand_encoder = Mlp.init([12, 10, 5], rng, tanh_output=True)
    xn = rng.standard_normal(12)
    tn = rng.standard_normal((4, 12))
    p = rng.dirichlet(np.ones(4))

    def loss():
        return retrieval_loss(r.cand_encoder.forward(tn) @ r.query_encoder.forward(xn), p, 1.0)[0]

    qc, cc = ActivationCache(), ActivationCache()
    qv = r.query_encoder.forward(xn, qc)
    cv = r.cand_encoder.forward(tn, cc)
    _, ds = retrieval_loss(cv @ qv, p, 1.0)
    gq, gc = Grads.like(r.query_encoder), Grads.like(r.cand_encoder)
    r.query_encoder.backward(qc, ds @ cv, gq)
    r.cand_encoder.backward(cc, np.outer(ds, qv), gc)
    for m, g in ((r.query_encoder, gq), (r.cand_encoder, gc)):
        for par, gp in zip(m.parameters(), g.arrays()):
            idx = sample_indices(par.size, rng)
            assert_grad_close(gp, central_diff(loss, par, indices=idx), indices=idx)


def test_descent_property_100_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        r = Retriever.init(8, rng, e=4, hidden=8)
        r.cand_encoder = Mlp.init([8, 8, 4], rng, tanh_output=True)
        xn, tn = rng.standard_normal(8), rng.standard_normal((3, 8))
        p = rng.dirichlet(np.ones(3))

        def loss():
            return retrieval_loss(r.cand_encoder.forward(tn) @ r.query_encoder.forward(xn), p, 1.0)[0]

        before = loss()
        qc, cc = ActivationCache(), ActivationCache()
        qv = r.query_encoder.forward(xn, qc)
        cv = r.cand_encoder.forward(tn, cc)
        _, ds = retrieval_loss(cv @ qv, p, 1.0)
        gq, gc = Grads.like(r.query_encoder), Grads.like(r.cand_encoder)
        r.query_encoder.backward(qc, ds @ cv, gq)
        r.cand_encoder.backward(cc, np.outer(ds, qv), gc)
        SGD(1e-3).step(r.query_encoder, gq)
        SGD(1e-3).step(r.cand_encoder, gc)
        assert loss() <= before + 1e-12


def _result(k=4):
    return RetrievalResult(np.arange(k), np.arange(k, dtype=float), np.zeros(k, dtype=bool))


def test_augment_extremes():
    elig = np.arange(20)
    scores = np.arange(20.0) * 10
    res = augment(_result(), elig, scores, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(res.indices, np.arange(4))
    assert not res.augmented.any()
    res = augment(_result(), elig, scores, 1.0, np.random.default_rng(0))
    assert res.augmented.all()
    assert len(set(res.indices.tolist())) == 4
    np.testing.assert_array_equal(res.scores, scores[res.indices])


def test_augment_without_spares_keeps_result():
    res = augment(_result(4), np.arange(4), np.zeros(4), 1.0, np.random.default_rng(0))
    np.testing.assert_array_equal(res.indices, np.arange(4))
    assert not res.augmented.any()


def test_augment_rate_monte_carlo():
    rng = np.random.default_rng(0)
    elig = np.arange(50)
    flags = [augment(_result(), elig, np.zeros(50), 0.3, rng).augmented for _ in range(10_000)]
    assert abs(np.mean(flags) - 0.3) <= 0.02


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_augment_keeps_indices_distinct(seed, rho):
    rng = np.random.default_rng(seed)
    elig = np.sort(rng.choice(100, 12, replace=False))
    base = RetrievalResult(elig[:8], np.zeros(8), np.zeros(8, dtype=bool))
    res = augment(base, elig, np.zeros(12), rho, rng)
    assert len(set(res.indices.tolist())) == 8
    assert set(res.indices.tolist()) <= set(elig.tolist())


def test_cosine_and_random_baselines():
    kb = _kb()
    x = kb.values[5] * 3 + 1
    idx, sims = cosine_top_k(x, kb, np.arange(kb.n_kb), 3)
    assert idx[0] == 5 and sims[5] == pytest.approx(1.0)
    pick = random_k(np.arange(10, 30), 5, np.random.default_rng(0))
    assert len(set(pick.tolist())) == 5 and all(10 <= p < 30 for p in pick)
    with pytest.raises(ConfigError):
        random_k(np.arange(3), 5, np.random.default_rng(0))


def test_checkpoint_round_trip(tmp_path):
    r = Retriever.init(16, np.random.default_rng(0))
    r.save(tmp_path / "r.tsck", {"seed": 1})
    back = Retriever.load(tmp_path / "r.tsck")
    for a, b in zip(r.mlps, back.mlps):
        assert all(p.tobytes() == q.tobytes() for p, q in zip(a.parameters(), b.parameters()))
        assert b.tanh_output
