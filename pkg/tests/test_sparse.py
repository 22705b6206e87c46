import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from glucokin import modeseek as ms
from glucokin import sparse as sp

K1 = ms.KernelConfig(1.0)


def test_gram_examples(rng):
    assert sp.gram([3.0]).tolist() == [[1.0]]
    assert sp.gram([2.0, 2.0]).tolist() == [[1.0, 1.0], [1.0, 1.0]]
    g = sp.gram(rng.normal(size=(12, 3)), ms.KernelConfig(0.7))
    assert np.array_equal(g, g.T)
    assert np.all(np.diag(g) == 1.0)
    assert np.linalg.eigvalsh(g).min() > -1e-12


def test_xi_examples(rng):
    assert sp.xi([1.0], [1.0], [1.0]).tolist() == [1.0]
    same = sp.xi([4.0, 4.0, 4.0], np.full(5, 4.0))
    assert np.all(same == same[0])
    data = rng.normal(size=30)
    w = rng.uniform(0.1, 1, size=30)
    sub = data[:7]
    oracle = [sum(w[j] * math.exp(-0.5 * ((sub[m] - data[j]) / 0.6) ** 2) for j in range(30))
              for m in range(7)]
    assert np.allclose(sp.xi(sub, data, w, ms.KernelConfig(0.6)), oracle, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        sp.xi(sub, data, w[:5])


def test_solve_alpha_examples(rng):
    assert sp.solve_alpha([[1.0]], [0.3]).tolist() == [1.0]
    assert np.allclose(sp.solve_alpha(np.eye(2), [0.2, 0.8]), [0.2, 0.8], atol=1e-12)
    for _ in range(100):
        n = int(rng.integers(1, 10))
        pts = rng.normal(size=n) * 2
        g = sp.gram(pts)
        v = g @ rng.uniform(-0.3, 1, size=n)
        if not np.any(sp._ridge_solve(g, v) > 0):
            continue
        a = sp.solve_alpha(g, v)
        assert np.all(a > 0)
        assert a.sum() == pytest.approx(1.0)


def test_solve_alpha_drops_negatives():
    a, keep = sp.solve_alpha(np.eye(3), [0.5, -0.2, 0.5], return_index=True)
    assert keep.tolist() == [0, 2]
    assert a.tolist() == [0.5, 0.5]


def test_solve_alpha_errors():
    with pytest.raises(sp.DegenerateBasisError):
        sp.solve_alpha(np.eye(2), [-1.0, -2.0])
    with pytest.raises(ValueError):
        sp.solve_alpha(np.eye(2), [1.0])


def test_solve_alpha_singular_gram():
    a = sp.solve_alpha(sp.gram([1.0, 1.0]), [1.0, 1.0])
    assert np.allclose(a, [0.5, 0.5])


@pytest.mark.parametrize("t_nu", [1e-1, 1e-3, 1e-6])
def test_repeated_value_needs_one_point(t_nu):
    basis = sp.select_subset(np.full(30, 7.0), K1, t_nu=t_nu)
    assert basis.n_nu == 1 and basis.N == 1
    assert basis.alphas.tolist() == [1.0]


def test_first_picks_cover_both_blobs(rng):
    data = np.r_[rng.normal(0, 0.3, 60), rng.normal(8, 0.3, 40)]
    basis = sp.select_subset(data, K1, n=2)
    first, second = basis.indices if basis.N == 2 else (basis.indices[0], None)
    kern = sp.gram(data)
    assert first == int(np.argmax(kern.sum(axis=1)))
    # exhaustive check of the greedy rule for the second pick
    scores = [kern[first, j] if j != first else math.inf for j in range(100)]
    assert sp.select_subset(data, K1, n=2).indices.tolist()[1:] in ([int(np.argmin(scores))], [])
    assert (first < 60) != (int(np.argmin(scores)) < 60)


def test_full_basis_reproduces_kde(rng):
    data = rng.normal(size=50)
    basis = sp.select_subset(data, K1, n=50)
    assert sorted(basis.indices.tolist()) == list(range(50))
    centers = data[basis.indices]
    for x in np.linspace(-3, 3, 25):
        sparse_kde = ms.kde(x, centers, basis.alphas, K1)
        assert sparse_kde == pytest.approx(ms.kde(x, data, None, K1), abs=1e-10)


@given(st.integers(0, 10_000))
def test_basis_invariants(seed):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=int(rng.integers(2, 120))) * rng.uniform(0.5, 5)
    basis = sp.select_subset(data, ms.KernelConfig(rng.uniform(0.3, 2)))
    idx = basis.indices.tolist()
    assert len(set(idx)) == len(idx)
    assert 1 <= basis.N <= len(data)
    assert np.all(basis.alphas > 0)
    assert basis.alphas.sum() == pytest.approx(1.0)
    nu = basis.nu_trace
    assert np.all(np.diff(nu) >= -1e-15)  # non-decreasing, so flat after its maximum


def test_fixed_size_validation():
    with pytest.raises(ValueError):
        sp.select_subset([1.0, 2.0], K1, n=3)
    with pytest.raises(ValueError):
        sp.select_subset([1.0, 2.0], K1, t_nu=0.0)


def test_sparse_step_reductions(rng):
    data = rng.normal(size=25)
    full = sp.SparseBasis(np.arange(25), np.full(25, 1 / 25), np.array([]), 25)
    for x in rng.normal(size=5):
        assert sp.sparse_shift_step(x, full, data, K1) == pytest.approx(ms.mean_shift_step(x, data), abs=1e-14)
        assert sp.sparse_shift_step(x, full, data, K1, "medoid") == ms.medoid_shift_step(x, data)
    single = sp.SparseBasis(np.array([3]), np.array([1.0]), np.array([]), 1)
    assert sp.sparse_shift_step(0.4, single, data, K1) == pytest.approx(data[3])
    with pytest.raises(ValueError):
        sp.sparse_shift_step(0.4, single, data, K1, "median")
    with pytest.raises(ms.IsolatedPointError):
        sp.sparse_shift_step(1e6, single, data, K1)


def test_sparse_step_costs_basis_size(rng):
    data = rng.normal(size=400)
    basis = sp.select_subset(data, K1)
    with ms.counting() as full:
        ms.mean_shift_step(0.1, data)
    with ms.counting() as small:
        sp.sparse_shift_step(0.1, basis, data, K1)
    assert full.count == 400
    assert small.count == basis.N < 400

