import itertools
import math

import numpy as np
import pytest

from sparse_bvm.design import (EnumerationBudgetError, GroupedDesign, PaddedVector, SingularBlockError,
                               compatibility_phi1, compatibility_phi2, count_supports, enumerate_supports,
                               parallel_map, read_design_csv, sparse_gram_extremes, sparse_influence_leverage,
                               sparse_row_envelope, supersets_of, write_design_csv)

from conftest import normalized_design


def all_supports_upto(G, s):
    return [T for k in range(1, s + 1) for T in itertools.combinations(range(G), k)]


def brute_block_min_eig(design, weights, s):
    F = design.x.T @ (weights[:, None] * design.x) / design.n
    vals = [np.linalg.eigvalsh(F[np.ix_(design.columns(T), design.columns(T))]) for T in all_supports_upto(design.G, s)]
    return min(v[0] for v in vals), max(v[-1] for v in vals)


def orthonormal_design(n, p, seed=0):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, p)))
    return GroupedDesign(q * math.sqrt(n), [1] * p)


def corr_design(rho, n=2000):
    # exact Gram [[1, rho], [rho, 1]] * n
    q, _ = np.linalg.qr(np.random.default_rng(1).standard_normal((n, 2)))
    L = np.linalg.cholesky(np.array([[1.0, rho], [rho, 1.0]]))
    return GroupedDesign(q @ L.T * math.sqrt(n), [1, 1])


class TestSupports:
    def test_lexicographic_enumeration(self):
        sups = enumerate_supports(4, 2)
        assert sups == sorted(sups)
        assert sups[0] == () and len(sups) == 1 + 4 + 6
        assert count_supports(4, 2) == 11

    def test_exact_size(self):
        assert enumerate_supports(5, 2, exact_size=True) == list(itertools.combinations(range(5), 2))

    def test_budget(self):
        with pytest.raises(EnumerationBudgetError):
            enumerate_supports(50, 6)
        with pytest.raises(EnumerationBudgetError):
            enumerate_supports(10, 3, cap=10)

    def test_supersets(self):
        sups = supersets_of((1, 3), 5, 3)
        assert all(set((1, 3)) <= set(s) for s in sups)
        assert len(sups) == 1 + 3

    def test_parallel_map_preserves_order(self):
        assert parallel_map(lambda v: v * v, list(range(50))) == [v * v for v in range(50)]


class TestEmbedding:
    def test_roundtrip(self, rng):
        d = GroupedDesign(rng.standard_normal((5, 6)), [2, 1, 3])
        v = PaddedVector((0, 2), rng.standard_normal(5))
        back = d.restrict(d.embed(v), (0, 2))
        assert back.support == v.support and np.array_equal(back.values, v.values)

    def test_empty_and_placement(self):
        d = GroupedDesign(np.ones((2, 3)), [2, 1])
        assert np.array_equal(d.embed(PaddedVector((), [])), np.zeros(3))
        assert np.array_equal(d.embed(PaddedVector((1,), [5.0])), [0, 0, 5])

    def test_block_length_mismatch(self):
        d = GroupedDesign(np.ones((2, 3)), [2, 1])
        with pytest.raises(ValueError):
            d.embed(PaddedVector((0,), [1.0]))

    def test_invalid_designs(self):
        with pytest.raises(ValueError):
            GroupedDesign(np.ones((2, 3)), [2, 2])
        with pytest.raises(ValueError):
            GroupedDesign(np.array([[1.0, np.nan]]), [1, 1])

    def test_csv_roundtrip(self, tmp_path, rng):
        d = GroupedDesign(rng.standard_normal((7, 4)), [1, 3])
        path = tmp_path / "x.csv"
        write_design_csv(d, path, comment="hash")
        back = read_design_csv(path)
        assert back.group_sizes == d.group_sizes and np.array_equal(back.x, d.x)


class TestEnvelope:
    def test_identity(self):
        d = GroupedDesign(np.eye(4), [1] * 4)
        assert all(sparse_row_envelope(d, s) == 1.0 for s in range(1, 5))

    def test_single_row(self):
        d = GroupedDesign(np.array([[3.0, 4.0]]), [1, 1])
        assert sparse_row_envelope(d, 1) == 4.0
        assert sparse_row_envelope(d, 2) == 5.0

    def test_brute_force(self, rng):
        d = GroupedDesign(rng.standard_normal((10, 6)), [1] * 6)
        brute = max(np.linalg.norm(d.x[i, list(T)]) for i in range(10) for T in itertools.combinations(range(6), 2))
        assert math.isclose(sparse_row_envelope(d, 2), brute, rel_tol=1e-14)

    def test_monotone(self, rng):
        d = GroupedDesign(rng.standard_normal((20, 8)), [2, 2, 1, 3])
        vals = [sparse_row_envelope(d, s) for s in range(1, 5)]
        assert vals == sorted(vals)


class TestCompatibility:
    def test_orthonormal(self):
        d = orthonormal_design(40, 5)
        w = np.ones(40)
        for s in (1, 2, 3):
            assert abs(compatibility_phi2(d, w, s) - 1.0) <= 1e-12
            c, C = sparse_gram_extremes(d, w, s)
            assert abs(c - 1) <= 1e-12 and abs(C - 1) <= 1e-12
            assert abs(compatibility_phi1(d, w, s).value - 1.0) <= 1e-9

    def test_correlated_pair(self):
        rho = 0.6
        d = corr_design(rho)
        assert abs(compatibility_phi2(d, None, 2) - math.sqrt(1 - rho)) <= 1e-12
        c, C = sparse_gram_extremes(d, None, 2)
        assert abs(c - (1 - rho)) <= 1e-12 and abs(C - (1 + rho)) <= 1e-12

    def test_phi2_random_directions_never_below(self, rng):
        d = normalized_design(30, 6, seed=3)
        w = rng.uniform(0.2, 1.0, 30)
        phi = compatibility_phi2(d, w, 2)
        F = d.x.T @ (w[:, None] * d.x) / d.n
        best = math.inf
        for _ in range(100000 // 100):
            T = rng.choice(6, 2, replace=False)
            D = np.zeros((100, 6))
            D[:, T] = rng.standard_normal((100, 2))
            best = min(best, float(np.min(np.sqrt(np.einsum("ki,ij,kj->k", D, F, D) / np.sum(D * D, axis=1)))))
        assert best >= phi - 1e-9

    def test_extremes_brute_force_and_monotone(self, rng):
        d = GroupedDesign(rng.standard_normal((25, 7)), [2, 1, 1, 2, 1])
        w = rng.uniform(0.5, 2.0, 25)
        for s in (1, 2, 3):
            lo, hi = brute_block_min_eig(d, w, s)
            c, C = sparse_gram_extremes(d, w, s)
            assert math.isclose(c, lo, rel_tol=1e-10) and math.isclose(C, hi, rel_tol=1e-10)
        assert compatibility_phi2(d, w, 1) >= compatibility_phi2(d, w, 2) >= compatibility_phi2(d, w, 3)

    def test_phi1_equals_phi2_at_one(self, rng):
        d = GroupedDesign(rng.standard_normal((25, 6)), [2, 1, 3])
        w = np.ones(25)
        assert math.isclose(compatibility_phi1(d, w, 1).value, compatibility_phi2(d, w, 1), rel_tol=1e-9)

    def test_phi1_two_group_grid(self, rng):
        d = GroupedDesign(rng.standard_normal((30, 3)), [1, 2])
        F = d.x.T @ d.x / d.n
        best = math.inf
        # dense grid over the l_{2,1} sphere: |a| + ||b|| = 1
        for t in np.linspace(0, 1, 801):
            for ang in np.linspace(0, 2 * np.pi, 801, endpoint=False):
                for sgn in (1.0, -1.0):
                    v = np.array([sgn * t, (1 - t) * math.cos(ang), (1 - t) * math.sin(ang)])
                    best = min(best, float(v @ F @ v))
        grid = math.sqrt(2 * best)
        res = compatibility_phi1(d, None, 2)
        assert res.value <= grid + 1e-9 and abs(res.value - grid) <= 1e-4

    def test_sparse_directions_bounds(self, rng):
        d = normalized_design(40, 6, seed=4)
        s = 2
        phi = compatibility_phi2(d, None, s)
        _, C = sparse_gram_extremes(d, None, s)
        F = d.x.T @ d.x
        for _ in range(1000):
            T = rng.choice(6, s, replace=False)
            v = np.zeros(6)
            v[T] = rng.standard_normal(s)
            q = math.sqrt(v @ F @ v)
            assert math.sqrt(d.n) * phi * np.linalg.norm(v) <= q + 1e-9
            assert q <= math.sqrt(d.n * C) * np.linalg.norm(v) + 1e-9


class TestInfluenceLeverage:
    def test_orthonormal_s1(self):
        d = orthonormal_design(30, 4)
        q, lev = sparse_influence_leverage(d, np.ones(30), 1)
        assert math.isclose(q, np.max(np.abs(d.x)) / math.sqrt(30), rel_tol=1e-12)
        assert math.isclose(lev, q * q, rel_tol=1e-12)

    def test_brute_force(self, rng):
        d = GroupedDesign(rng.standard_normal((15, 5)), [1, 2, 1, 1])
        w = rng.uniform(0.3, 1.5, 15)
        F = d.x.T @ (w[:, None] * d.x)
        q_b = l_b = 0.0
        for T in all_supports_upto(d.G, 2):
            c = d.columns(T)
            ev, U = np.linalg.eigh(F[np.ix_(c, c)])
            R = (U / np.sqrt(ev)) @ U.T
            infl = np.linalg.norm(d.x[:, c] @ R, axis=1)
            q_b = max(q_b, infl.max())
            l_b = max(l_b, float(np.max(w * infl**2)))
        q, lev = sparse_influence_leverage(d, w, 2)
        assert math.isclose(q, q_b, rel_tol=1e-10) and math.isclose(lev, l_b, rel_tol=1e-10)

    def test_singular_block_named(self):
        x = np.random.default_rng(0).standard_normal((10, 3))
        x[:, 1] = x[:, 0]
        d = GroupedDesign(x, [1, 1, 1])
        with pytest.raises(SingularBlockError) as info:
            sparse_influence_leverage(d, None, 2)
        assert (0, 1) == tuple(info.value.support)
