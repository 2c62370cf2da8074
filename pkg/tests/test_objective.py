import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import bisect
from scipy.special import expit

from byzcomp import objective as ob
from byzcomp.errors import ConvergenceError, InvalidInputError, ParseError
from byzcomp.objective import Dataset, Objective


def make_obj(A, b, reg=0.01):
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    return Objective(Dataset(A, b), reg)


def test_loss_at_zero_is_log2(small_obj):
    x = np.zeros(small_obj.p)
    for w in range(small_obj.dataset.R):
        assert ob.sample_loss(small_obj, x, w, 0) == pytest.approx(math.log(2), abs=1e-15)


def test_loss_tail_goes_to_zero():
    obj = make_obj([[[1.0, 0.0]]], [[1.0]], reg=0.0)
    assert ob.sample_loss(obj, np.array([800.0, 0.0]), 0, 0) == 0.0
    assert ob.sample_loss(obj, np.array([40.0, 0.0]), 0, 0) < 1e-17
    # the other tail stays finite and linear
    assert ob.sample_loss(obj, np.array([-800.0, 0.0]), 0, 0) == pytest.approx(800.0)


def test_loss_matches_extended_precision(rng):
    mpmath.mp.dps = 50
    for _ in range(50):
        a = rng.standard_normal(3) * 10
        x = rng.standard_normal(3) * 10
        b = rng.choice([-1.0, 1.0])
        obj = make_obj([[a]], [[b]], reg=0.3)
        z = mpmath.mpf(b) * mpmath.fsum(mpmath.mpf(float(ai)) * mpmath.mpf(float(xi))
                                         for ai, xi in zip(a, x))
        ref = mpmath.log1p(mpmath.exp(-z)) + mpmath.mpf(0.15) * mpmath.fsum(
            mpmath.mpf(float(v)) ** 2 for v in x)
        assert ob.sample_loss(obj, x, 0, 0) == pytest.approx(float(ref), rel=1e-13)


def test_grad_closed_forms(small_obj):
    A, b = small_obj.dataset.features, small_obj.dataset.labels
    np.testing.assert_allclose(ob.sample_grad(small_obj, np.zeros(5), 1, 2), -b[1, 2] / 2 * A[1, 2],
                               rtol=0, atol=0)
    obj = make_obj([[[0.0, 0.0]]], [[1.0]], reg=0.7)
    x = np.array([1.5, -2.0])
    np.testing.assert_array_equal(ob.sample_grad(obj, x, 0, 0), 0.7 * x)


def _fd_check(obj, x, w, j):
    h = 1e-6
    g = ob.sample_grad(obj, x, w, j)
    fd = np.array([(ob.sample_loss(obj, x + h * e, w, j) - ob.sample_loss(obj, x - h * e, w, j)) / (2 * h)
                   for e in np.eye(len(x))])
    assert np.linalg.norm(fd - g) <= 1e-4 * max(np.linalg.norm(g), 1e-3)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.1, 3.0))
def test_grad_matches_finite_differences(seed, scale):
    r = np.random.default_rng(seed)
    A = r.standard_normal((1, 2, 4))
    b = r.choice([-1.0, 1.0], size=(1, 2))
    obj = make_obj(A, b, reg=0.05)
    _fd_check(obj, r.standard_normal(4) * scale, 0, int(r.integers(2)))


def test_dimension_mismatch_raises(small_obj):
    for fn in (ob.sample_loss, ob.sample_grad):
        with pytest.raises(InvalidInputError):
            fn(small_obj, np.zeros(3), 0, 0)
    with pytest.raises(InvalidInputError):
        ob.full_grad(small_obj, np.zeros(6))


def test_local_and_full_grad_summation_oracle(small_obj, rng):
    x = rng.standard_normal(small_obj.p)
    ds = small_obj.dataset
    per = [sum(ob.sample_grad(small_obj, x, w, j) for j in range(ds.J)) / ds.J for w in range(ds.R)]
    for w in range(ds.R):
        np.testing.assert_allclose(ob.local_grad(small_obj, x, w), per[w], rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(ob.full_grad(small_obj, x), sum(per) / ds.R, rtol=1e-12, atol=1e-15)
    f = sum(ob.sample_loss(small_obj, x, w, j) for w in range(ds.R) for j in range(ds.J)) / (ds.R * ds.J)
    assert ob.loss(small_obj, x) == pytest.approx(f, rel=1e-13)


def test_local_grad_degenerate_cases(rng):
    a = rng.standard_normal(3)
    x = rng.standard_normal(3)
    one = make_obj([[a]], [[1.0]])
    np.testing.assert_array_equal(ob.local_grad(one, x, 0), ob.sample_grad(one, x, 0, 0))
    same = make_obj([[a, a, a]], [[-1.0, -1.0, -1.0]])
    np.testing.assert_allclose(ob.local_grad(same, x, 0), ob.sample_grad(same, x, 0, 0), rtol=1e-15)
    np.testing.assert_array_equal(ob.full_grad(one, x), ob.local_grad(one, x, 0))


def test_solver_optimality(small_obj):
    x, f = ob.solve_reference(small_obj, tol=1e-10)
    assert np.linalg.norm(ob.full_grad(small_obj, x)) <= 1e-10
    assert f == pytest.approx(ob.loss(small_obj, x), abs=0)


def test_solver_p2_random(rng):
    obj = make_obj(rng.standard_normal((3, 7, 2)), rng.choice([-1.0, 1.0], size=(3, 7)))
    x, _ = ob.solve_reference(obj, tol=1e-9)
    assert np.linalg.norm(ob.full_grad(obj, x)) <= 1e-9


def test_solver_zero_features_gives_zero():
    obj = make_obj(np.zeros((2, 3, 4)), np.ones((2, 3)), reg=5.0)
    x, f = ob.solve_reference(obj)
    np.testing.assert_array_equal(x, 0.0)
    assert f == pytest.approx(math.log(2))


def test_solver_matches_bisection_on_one_sample():
    a = np.array([2.0, -1.0, 0.5])
    b, reg = 1.0, 0.1
    obj = make_obj([[a]], [[b]], reg)
    n2 = a @ a
    # the minimizer is s * a; the scalar stationarity condition is monotone in s
    s = bisect(lambda s: -b * expit(-b * s * n2) + reg * s, 0.0, 100.0, xtol=1e-15)
    x, _ = ob.solve_reference(obj, tol=1e-12)
    np.testing.assert_allclose(x, s * a, rtol=1e-9)


def test_solver_rejects_bad_tol_and_reports_cap(small_obj):
    with pytest.raises(InvalidInputError):
        ob.solve_reference(small_obj, tol=0)
    with pytest.raises(ConvergenceError) as exc:
        ob.solve_reference(small_obj, tol=1e-14, max_iter=2)
    assert exc.value.grad_norm > 0


def test_convexity_and_strong_convexity(small_obj, rng):
    for _ in range(200):
        x, y = rng.standard_normal((2, small_obj.p)) * 3
        lam = rng.random()
        fx, fy = ob.loss(small_obj, x), ob.loss(small_obj, y)
        assert ob.loss(small_obj, lam * x + (1 - lam) * y) <= lam * fx + (1 - lam) * fy + 1e-12
        gx = ob.full_grad(small_obj, x)
        assert fy >= fx + gx @ (y - x) + small_obj.reg / 2 * (y - x) @ (y - x) - 1e-10


def test_constants_definitions(small_obj):
    x_star, _ = ob.solve_reference(small_obj)
    c = ob.estimate_constants(small_obj, x_star)
    assert c.mu == small_obj.reg
    ds = small_obj.dataset
    lam = max(np.linalg.eigvalsh(ds.features[w].T @ ds.features[w] / ds.J).max() for w in range(ds.R))
    assert c.L == pytest.approx(small_obj.reg + lam / 4, rel=1e-8)
    lg = [ob.local_grad(small_obj, x_star, w) for w in range(ds.R)]
    g = sum(lg) / ds.R
    assert c.sigma2 == pytest.approx(sum(np.sum((v - g) ** 2) for v in lg) / ds.R, rel=1e-10)
    inner = [sum(np.sum((ob.sample_grad(small_obj, x_star, w, j) - lg[w]) ** 2) for j in range(ds.J)) / ds.J
             for w in range(ds.R)]
    assert c.zeta2 == pytest.approx(max(inner), rel=1e-10)


def test_constants_degenerate(rng):
    zero = make_obj(np.zeros((2, 3, 4)), np.ones((2, 3)), reg=0.2)
    c = ob.estimate_constants(zero)
    assert c.L == 0.2
    block = rng.standard_normal((5, 3))
    labels = rng.choice([-1.0, 1.0], size=5)
    same = make_obj(np.stack([block] * 3), np.stack([labels] * 3))
    assert ob.estimate_constants(same).sigma2 == pytest.approx(0.0, abs=1e-30)


def test_synthetic_determinism_and_separability():
    d1 = ob.generate_synthetic(7, 3, 50, 6, noise=0.5)
    d2 = ob.generate_synthetic(7, 3, 50, 6, noise=0.5)
    np.testing.assert_array_equal(d1.features, d2.features)
    np.testing.assert_array_equal(d1.labels, d2.labels)
    clean = ob.generate_synthetic(9, 4, 100, 8, noise=0.0)
    w = ob.truth_vector(9, 8)
    margins = clean.labels * (clean.features @ w)
    assert np.all(margins >= 0)


def test_synthetic_label_balance():
    ds = ob.generate_synthetic(11, 10, 1000, 5, noise=1.0)
    n = ds.labels.size
    pos = np.sum(ds.labels > 0)
    # <a, w> + noise is symmetric about 0, so labels are fair coin flips
    assert abs(pos - n / 2) <= 5 * math.sqrt(n / 4)


def test_dataset_validation_and_partition():
    with pytest.raises(InvalidInputError):
        Dataset(np.zeros((1, 2, 3)), np.array([[1.0, 0.5]]))
    with pytest.raises(InvalidInputError):
        Dataset(np.full((1, 1, 2), np.nan), np.ones((1, 1)))
    X = np.arange(22, dtype=float).reshape(11, 2)
    y = np.ones(11)
    d = Dataset.from_samples(X, y, R=3, seed=4)
    assert (d.R, d.J, d.p) == (3, 3, 2)
    d2 = Dataset.from_samples(X, y, R=3, seed=4)
    np.testing.assert_array_equal(d.features, d2.features)
    assert len(np.unique(d.features[..., 0])) == 9
    with pytest.raises(ValueError):
        d.features[0, 0, 0] = 1.0


def test_parse_libsvm_example():
    X, raw = ob.parse_libsvm(["1 1:0.5 3:-2\n"], p=3)
    np.testing.assert_array_equal(X, [[0.5, 0.0, -2.0]])
    np.testing.assert_array_equal(raw, [1.0])


def test_parse_libsvm_errors():
    with pytest.raises(ParseError, match="line 2"):
        ob.parse_libsvm(["1 1:2", "2 x:3"])
    with pytest.raises(ParseError, match="line 1"):
        ob.parse_libsvm(["1 0:2"])
    with pytest.raises(ParseError):
        ob.parse_libsvm([])
    with pytest.raises(ParseError):
        ob.parse_libsvm(["1 4:1"], p=3)


def test_libsvm_round_trip(tmp_path, rng):
    X = rng.standard_normal((12, 4)) * (rng.random((12, 4)) < 0.6)
    y = rng.choice([1.0, 2.0, 3.0], size=12)
    path = tmp_path / "d.svm"
    ob.write_libsvm(path, X, y)
    X2, y2 = ob.parse_libsvm(path.read_text().splitlines(), p=4)
    np.testing.assert_array_equal(X2, X)
    np.testing.assert_array_equal(y2, y)
    ds = ob.load_libsvm(path, R=3, seed=1, p=4)
    assert ds.J == 4
    assert ds.features.min() >= 0 and ds.features.max() <= 1
    assert set(np.unique(ds.labels)) <= {-1.0, 1.0}
    assert np.sum(ds.labels > 0) == np.sum(y == 2)
    empty = tmp_path / "e.svm"
    empty.write_text("")
    with pytest.raises(ParseError):
        ob.load_libsvm(empty, R=1)
    with pytest.raises(FileNotFoundError):
        ob.load_libsvm(tmp_path / "missing.svm", R=1)


def test_load_libsvm_subsample(tmp_path, rng):
    X = rng.random((30, 3))
    path = tmp_path / "d.svm"
    ob.write_libsvm(path, X, np.ones(30))
    ds = ob.load_libsvm(path, R=2, n_max=10, scale=False)
    assert ds.R * ds.J == 10
