import itertools
import math

import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from idcf import kernels
from idcf.gradcheck import _toy_relation
from idcf.metrics import auc, auc_bruteforce, ndcg_user, rmse
from idcf.numerics import least_squares_solve
from idcf.relation import _normalize, build_context, head_attention

small_scores = st.lists(st.integers(-4, 4).map(float) | st.floats(-3, 3), min_size=1, max_size=50)


@given(small_scores, small_scores)
def test_auc_equals_pairwise(pos, neg):
    assert auc(pos, neg) == auc_bruteforce(pos, neg)


@given(st.integers(1, 5).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 3).map(float), min_size=n, max_size=n),
    st.lists(st.integers(0, 4).map(float), min_size=n, max_size=n),
    st.permutations(range(n)))))
def test_ndcg_matches_best_permutation(case):
    scores, rel, items = case
    got = ndcg_user(scores, rel, items=items)
    if sum(rel) == 0:
        assert got is None
        return
    n = len(rel)
    order = sorted(range(n), key=lambda j: (-scores[j], items[j]))
    disc = [1 / math.log2(p + 2) for p in range(n)]
    dcg = sum(rel[j] * disc[p] for p, j in enumerate(order))
    best = max(sum(rel[j] * disc[p] for p, j in enumerate(perm))
               for perm in itertools.permutations(range(n)))
    assert abs(got - dcg / best) <= 1e-12
    assert 0.0 <= got <= 1.0 + 1e-12


@given(st.lists(st.tuples(st.floats(1, 5), st.floats(1, 5)), min_size=1, max_size=30), st.randoms())
def test_rmse_permutation_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = rmse(*zip(*pairs))
    b = rmse(*zip(*shuffled))
    assert abs(a - b) <= 1e-12
    assert a >= 0


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)),
              elements=st.floats(-30, 30)), st.floats(-50, 50))
def test_softmax_rows_sum_to_one_and_shift_invariant(s, c):
    a, _ = _normalize(s, "softmax")
    assert np.allclose(a.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(a >= 0)
    b, _ = _normalize(s + c, "softmax")
    assert np.allclose(a, b, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(16, 64), st.integers(4, 16), st.integers(0, 2**31 - 1))
def test_least_squares_reaches_any_target(M, d, seed):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(M, d))
    y = rng.normal(size=d)
    res = least_squares_solve(P, y)
    assert not res.degenerate
    assert res.residual < 1e-6
    assert np.allclose(res.coef[:, 0] @ P, y, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(0, 8), min_size=1, max_size=9, unique=True))
def test_context_is_order_independent(seed, hist):
    rng = np.random.default_rng(seed)
    Q = rng.normal(size=(9, 3))
    a = build_context(hist, Q).vector
    b = build_context(list(reversed(hist)), Q).vector
    assert np.array_equal(a, b)
    assert np.allclose(a, Q[hist].sum(axis=0))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_attention_rows_are_distributions(seed):
    mf, rel, *_ = _toy_relation(seed=seed % 7)
    C = np.random.default_rng(seed).normal(size=(3, mf.dim))
    for l in range(rel.heads):
        a = head_attention(rel, l, C, mf.P.value)
        assert np.allclose(a.sum(axis=1), 1.0, atol=1e-12) and np.all(a >= 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.integers(1, 12), st.integers(1, 10), st.integers(0, 10_000))
def test_kernel_backends_agree_bitwise(n, m, k, seed):
    try:
        kernels.backend_module("cython")
    except ImportError:
        return
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, m)), rng.normal(size=(m, k))
    idx = rng.integers(0, n, size=7)
    outs = {}
    for name in ("python", "cython"):
        prev = kernels.set_backend(name)
        try:
            t = np.zeros((n, m))
            kernels.scatter_add_rows(t, idx, a[idx])
            indptr = np.array([0, 3, 7])
            outs[name] = (kernels.matmul(a, b), kernels.rowdot(a, a), t,
                          kernels.segment_sum(indptr, idx, a))
        finally:
            kernels.set_backend(prev)
    for x, y in zip(outs["python"], outs["cython"]):
        assert np.array_equal(x, y)
