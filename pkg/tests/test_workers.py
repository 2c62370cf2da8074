import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from byzcomp import objective as ob
from byzcomp.compressors import CompressorSpec, compress, decode
from byzcomp.errors import InvalidInputError
from byzcomp.objective import Dataset, Objective
from byzcomp.workers import (AttackSpec, WorkerState, byzantine_message, byzantine_vector,
                             ef_message, gdc_message, init_saga_table, make_rng, saga_gradient,
                             sgd_gradient)

TK1 = CompressorSpec("top_k", k=1)


def regular(obj, seed=0, wid=0, debug=False):
    return WorkerState.create(wid, obj.p, seed, debug=debug)


def single_sample_obj(rng):
    return Objective(Dataset(rng.standard_normal((2, 1, 4)), np.array([[1.0], [-1.0]])))


def test_sgd_j1_is_local_grad(rng):
    obj = single_sample_obj(rng)
    x = rng.standard_normal(4)
    np.testing.assert_array_equal(sgd_gradient(regular(obj, wid=1), obj, x), ob.local_grad(obj, x, 1))


def test_sgd_monte_carlo_mean(small_obj, rng):
    x = rng.standard_normal(small_obj.p)
    st = regular(small_obj, wid=2)
    n = 100_000
    mean = sum(sgd_gradient(st, small_obj, x) for _ in range(n)) / n
    lg = ob.local_grad(small_obj, x, 2)
    assert np.linalg.norm(mean - lg) <= 0.02 * np.linalg.norm(lg)


def test_sgd_replay(small_obj):
    x = np.ones(small_obj.p)
    s1, s2 = regular(small_obj, seed=4), regular(small_obj, seed=4)
    for _ in range(20):
        np.testing.assert_array_equal(sgd_gradient(s1, small_obj, x), sgd_gradient(s2, small_obj, x))


def test_minibatch_mean(small_obj, rng):
    x = rng.standard_normal(small_obj.p)
    full = sgd_gradient(regular(small_obj), small_obj, x, batch=small_obj.dataset.J)
    np.testing.assert_allclose(full, ob.local_grad(small_obj, x, 0), rtol=1e-12)
    with pytest.raises(InvalidInputError):
        sgd_gradient(regular(small_obj), small_obj, x, batch=small_obj.dataset.J + 1)


def test_saga_first_call_is_local_grad(small_obj, rng):
    x0 = rng.standard_normal(small_obj.p)
    st = regular(small_obj, wid=1)
    init_saga_table(st, small_obj, x0)
    np.testing.assert_allclose(saga_gradient(st, small_obj, x0), ob.local_grad(small_obj, x0, 1),
                               rtol=1e-12, atol=1e-15)


def test_saga_j1(rng):
    obj = single_sample_obj(rng)
    st = regular(obj)
    init_saga_table(st, obj, np.zeros(4))
    for _ in range(5):
        x = rng.standard_normal(4)
        np.testing.assert_allclose(saga_gradient(st, obj, x), ob.local_grad(obj, x, 0), rtol=1e-12)


def test_saga_needs_table(small_obj):
    with pytest.raises(InvalidInputError):
        saga_gradient(regular(small_obj), small_obj, np.zeros(small_obj.p))


def test_saga_table_mean_drift(small_obj, rng):
    st = regular(small_obj, debug=True)
    init_saga_table(st, small_obj, np.zeros(small_obj.p))
    for _ in range(10_000):
        saga_gradient(st, small_obj, rng.standard_normal(small_obj.p) * 2)
    assert np.max(np.abs(st.table_mean - st.table.mean(axis=0))) <= 1e-9


def test_saga_minibatch_keeps_mean(small_obj, rng):
    st = regular(small_obj, debug=True)
    init_saga_table(st, small_obj, np.zeros(small_obj.p))
    for _ in range(200):
        saga_gradient(st, small_obj, rng.standard_normal(small_obj.p), batch=3)


def test_saga_unbiased(small_obj, rng):
    st = regular(small_obj, wid=3)
    init_saga_table(st, small_obj, rng.standard_normal(small_obj.p))
    for _ in range(30):
        saga_gradient(st, small_obj, rng.standard_normal(small_obj.p))
    x = rng.standard_normal(small_obj.p)
    table, mean = st.table.copy(), st.table_mean.copy()
    total = np.zeros(small_obj.p)
    n = 10_000
    for _ in range(n):
        st.table, st.table_mean = table.copy(), mean.copy()
        total += saga_gradient(st, small_obj, x)
    lg = ob.local_grad(small_obj, x, 3)
    assert np.linalg.norm(total / n - lg) <= 0.02 * np.linalg.norm(lg)


def test_saga_variance_decays(small_obj):
    # Byzantine-free uncompressed SAGA on one worker's local problem
    x_star, _ = ob.solve_reference(small_obj)
    st = regular(small_obj)
    x = np.zeros(small_obj.p)
    init_saga_table(st, small_obj, x)
    errs = []
    for _ in range(6000):
        g = saga_gradient(st, small_obj, x)
        errs.append(float(np.sum((g - ob.local_grad(small_obj, x, 0)) ** 2)))
        x = x - 0.05 * (g - ob.local_grad(small_obj, x, 0) + ob.full_grad(small_obj, x))
    first = np.mean(errs[1:100])
    assert np.mean(errs[-600:]) <= 0.01 * first


def test_gdc_identity_beta_one(rng):
    st = WorkerState.create(0, 3, 0)
    g = rng.standard_normal(3)
    msg = gdc_message(st, g, CompressorSpec(), 1.0)
    np.testing.assert_array_equal(decode(msg), g)
    np.testing.assert_array_equal(st.h, g)
    np.testing.assert_array_equal(decode(gdc_message(st, g, CompressorSpec(), 1.0)), 0.0)


def test_gdc_beta_zero_freezes_h(rng):
    st = WorkerState.create(0, 3, 0)
    for _ in range(5):
        gdc_message(st, rng.standard_normal(3), CompressorSpec("rand_k", k=1), 0.0)
    np.testing.assert_array_equal(st.h, 0.0)


def test_gdc_replay(rng):
    spec, beta = CompressorSpec("rand_k", k=2), 0.1
    a, b = WorkerState.create(0, 6, 9), WorkerState.create(0, 6, 9)
    h = np.zeros(6)
    for _ in range(10):
        g = rng.standard_normal(6)
        msg = gdc_message(a, g, spec, beta)
        # replay by hand on the twin stream
        m2 = compress(spec, g - h, b.compress_rng)
        h = h + beta * decode(m2)
        np.testing.assert_array_equal(decode(msg), decode(m2))
        np.testing.assert_array_equal(a.h, h)


def test_gdc_warns_on_large_beta(caplog):
    st = WorkerState.create(0, 3, 0)
    with caplog.at_level(logging.WARNING):
        gdc_message(st, np.ones(3), CompressorSpec("rand_k", k=1), 0.5, delta=2.0)
    assert "exceeds 1" in caplog.text


def test_gdc_noise_decays(small_obj):
    """Compression residual ||g - h||^2 falls by 10x once the iterates settle."""
    spec, beta = CompressorSpec("rand_k", k=1), 0.1
    R = small_obj.dataset.R
    workers = [WorkerState.create(w, small_obj.p, 0) for w in range(R)]
    x = np.zeros(small_obj.p)
    for st in workers:
        init_saga_table(st, small_obj, x)
    resid = []
    for _ in range(4000):
        gs = [saga_gradient(st, small_obj, x) for st in workers]
        resid.append(np.mean([np.sum((g - st.h) ** 2) for g, st in zip(gs, workers)]))
        for g, st in zip(gs, workers):
            gdc_message(st, g, spec, beta)
        x = x - 0.05 * np.mean(gs, axis=0)
    assert np.mean(resid[-400:]) <= 0.1 * resid[0]


def test_ef_message_examples():
    st = WorkerState.create(0, 2, 0)
    g = np.array([3.0, 1.0])
    np.testing.assert_array_equal(decode(ef_message(st, g, TK1)), [3, 0])
    np.testing.assert_array_equal(st.e, [0, 1])
    np.testing.assert_array_equal(decode(ef_message(st, g, TK1)), [3, 0])
    np.testing.assert_array_equal(st.e, [0, 2])
    ident = WorkerState.create(1, 2, 0)
    np.testing.assert_array_equal(decode(ef_message(ident, g, CompressorSpec())), g)
    np.testing.assert_array_equal(ident.e, 0)


def test_byzantine_vectors(rng):
    G = rng.standard_normal((4, 3))
    zs = [byzantine_vector(AttackSpec("zero_grad"), G, 4, 2, index=b) for b in range(2)]
    np.testing.assert_array_equal(np.vstack([G, *zs]).mean(axis=0), 0.0)
    np.testing.assert_allclose(zs[1], -G.sum(axis=0) / 2, rtol=1e-14)
    G2 = np.array([[0.0, 1.0], [2.0, 3.0]])  # mean (1, 2)
    np.testing.assert_array_equal(byzantine_vector(AttackSpec("sign_flip"), G2, 2, 1), [-3, -6])
    np.testing.assert_array_equal(byzantine_vector(AttackSpec("gaussian", variance=0), G2, 2, 1),
                                  [1, 2])
    noisy = np.array([byzantine_vector(AttackSpec("gaussian"), G2, 2, 1, rng) for _ in range(20_000)])
    assert noisy.var(axis=0) == pytest.approx([30, 30], rel=0.05)
    with pytest.raises(InvalidInputError):
        byzantine_vector(AttackSpec("zero_grad"), G2, 2, 0)
    with pytest.raises(InvalidInputError):
        byzantine_vector(AttackSpec("sign_flip"), G2, 3, 1)
    with pytest.raises(InvalidInputError):
        AttackSpec("gaussian", variance=-1)


def test_byzantine_messages():
    G = np.array([[0.0, 1.0], [2.0, 3.0]])
    st = WorkerState.create(2, 2, 0, byzantine=True)
    m = byzantine_message(st, AttackSpec("sign_flip"), G, 2, 1, CompressorSpec())
    np.testing.assert_array_equal(decode(m), [-3, -6])
    m = byzantine_message(st, AttackSpec("sign_flip"), G, 2, 1, TK1)
    np.testing.assert_array_equal(decode(m), [0, -6])
    m = byzantine_message(st, AttackSpec("sign_flip"), G, 2, 1, TK1, mode="sign")
    np.testing.assert_array_equal(decode(m), [-1, -1])
    zs = [decode(byzantine_message(st, AttackSpec("zero_grad"), G, 2, 2, CompressorSpec(), index=b))
          for b in range(2)]
    np.testing.assert_array_equal(np.vstack([G, *zs]).mean(axis=0), 0.0)


@settings(max_examples=300, deadline=None)
@given(st_R=st.integers(1, 12), st_B=st.integers(1, 8), seed=st.integers(0, 2**32 - 1),
       scale=st.floats(1e-6, 1e6))
def test_zero_grad_cancels_exactly(st_R, st_B, seed, scale):
    G = scale * np.random.default_rng(seed).standard_normal((st_R, 7))
    zs = [byzantine_vector(AttackSpec("zero_grad"), G, st_R, st_B, index=b) for b in range(st_B)]
    np.testing.assert_array_equal(np.vstack([G, *zs]).mean(axis=0), 0.0)


def test_byzantine_follow_protocol():
    G = np.array([[0.0, 1.0], [2.0, 3.0]])
    st = WorkerState.create(2, 2, 0, byzantine=True)
    st.h = np.array([1.0, 1.0])
    m = byzantine_message(st, AttackSpec("sign_flip"), G, 2, 1, CompressorSpec(), "gdc", beta=1.0,
                          follow_protocol=True)
    np.testing.assert_array_equal(decode(m), [-4, -7])  # u = g - h
    np.testing.assert_array_equal(st.h, [-3, -6])
    raw = WorkerState.create(3, 2, 0, byzantine=True)
    m = byzantine_message(raw, AttackSpec("sign_flip"), G, 2, 1, CompressorSpec(), "gdc", beta=1.0)
    np.testing.assert_array_equal(decode(m), [-3, -6])
    np.testing.assert_array_equal(raw.h, 0.0)


def test_regular_only_rules(small_obj):
    st = WorkerState.create(0, small_obj.p, 0, byzantine=True)
    with pytest.raises(InvalidInputError):
        sgd_gradient(st, small_obj, np.zeros(small_obj.p))


def test_snapshot_restore_resumes_streams(small_obj, rng):
    st = regular(small_obj)
    init_saga_table(st, small_obj, np.zeros(small_obj.p))
    for _ in range(5):
        saga_gradient(st, small_obj, rng.standard_normal(small_obj.p))
    twin = WorkerState.restore(st.snapshot())
    x = rng.standard_normal(small_obj.p)
    np.testing.assert_array_equal(saga_gradient(st, small_obj, x), saga_gradient(twin, small_obj, x))
    spec = CompressorSpec("rand_k", k=2)
    np.testing.assert_array_equal(decode(gdc_message(st, x, spec, 0.1)),
                                  decode(gdc_message(twin, x, spec, 0.1)))


def test_streams_are_independent():
    a = make_rng(1, 0, "sample").random(3)
    b = make_rng(1, 0, "compress").random(3)
    c = make_rng(1, 1, "sample").random(3)
    assert not np.array_equal(a, b) and not np.array_equal(a, c)
    np.testing.assert_array_equal(a, make_rng(1, 0, "sample").random(3))
