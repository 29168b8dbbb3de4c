import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brokenbind import linalg

from conftest import make_rng


def random_matrix(rng, m, n, rank=None):
    """Gaussian matrix, optionally of exact rank."""
    if rank is None:
        return rng.normal(size=(m, n))
    rank = min(rank, m, n)
    return rng.normal(size=(m, rank)) @ rng.normal(size=(rank, n))


def penrose_errors(a, a_pinv):
    """Relative Frobenius residuals of the four defining conditions."""
    def rel(x, ref):
        denom = np.linalg.norm(ref) or 1.0
        return np.linalg.norm(x) / denom

    apa = a @ a_pinv @ a
    pap = a_pinv @ a @ a_pinv
    ap = a @ a_pinv
    pa = a_pinv @ a
    return (
        rel(apa - a, a),
        rel(pap - a_pinv, a_pinv) if np.linalg.norm(a_pinv) > 0 else 0.0,
        rel(ap - ap.T, ap) if np.linalg.norm(ap) > 0 else 0.0,
        rel(pa - pa.T, pa) if np.linalg.norm(pa) > 0 else 0.0,
    )


class TestEnsureMatrix:
    def test_coerces_lists(self):
        out = linalg.ensure_matrix([[1, 2], [3, 4]])
        assert out.dtype == np.float64
        assert out.flags.c_contiguous

    def test_rejects_1d(self):
        with pytest.raises(ValueError, match="2-D"):
            linalg.ensure_matrix(np.ones(3))

    def test_rejects_nan(self):
        with pytest.raises(ValueError, match="non-finite"):
            linalg.ensure_matrix(np.array([[1.0, np.nan]]))


class TestSvd:
    def test_reconstructs(self, rng):
        a = rng.normal(size=(7, 5))
        u, s, vt = linalg.svd(a)
        assert np.allclose(u * s @ vt, a, atol=1e-12)

    def test_sorted_nonnegative(self, rng):
        _, s, _ = linalg.svd(rng.normal(size=(6, 9)))
        assert (s >= 0).all()
        assert (np.diff(s) <= 0).all()


class TestPinv:
    def test_square_inverse(self, rng):
        a = rng.normal(size=(5, 5)) + 5 * np.eye(5)
        assert np.allclose(linalg.pinv(a) @ a, np.eye(5), atol=1e-10)

    def test_penrose_random_suite(self):
        rng = make_rng(7)
        for trial in range(50):
            m = int(rng.integers(1, 20))
            n = int(rng.integers(1, 20))
            rank = int(rng.integers(1, min(m, n) + 1))
            a = random_matrix(rng, m, n, rank)
            errs = penrose_errors(a, linalg.pinv(a))
            assert max(errs) < 1e-8, (trial, m, n, rank, errs)

    def test_zero_matrix(self):
        out = linalg.pinv(np.zeros((3, 5)))
        assert out.shape == (5, 3)
        assert (out == 0).all()

    def test_empty_dimension(self):
        assert linalg.pinv(np.zeros((0, 4))).shape == (4, 0)

    def test_matches_lstsq_minimum_norm(self, rng):
        # pinv(A) @ b is the minimum-norm least-squares solution
        a = random_matrix(rng, 9, 6, rank=4)
        b = rng.normal(size=(9, 3))
        x_pinv = linalg.pinv(a) @ b
        x_lstsq = np.linalg.lstsq(a, b, rcond=None)[0]
        assert np.allclose(x_pinv, x_lstsq, atol=1e-8)

    def test_rank_deficient_stays_bounded(self, rng):
        a = random_matrix(rng, 8, 8, rank=3)
        # exact rank deficiency: tiny singular values must be cut, not inverted
        assert np.abs(linalg.pinv(a)).max() < 1e6

    def test_rel_tol_validation(self):
        with pytest.raises(ValueError, match="rel_tol"):
            linalg.pinv(np.eye(2), rel_tol=0.0)

    def test_cutoff_is_relative(self):
        # second singular value 1e-9 of s_max: kept at default tol,
        # dropped at rel_tol = 1e-6
        a = np.diag([1.0, 1e-9])
        kept = linalg.pinv(a)
        dropped = linalg.pinv(a, rel_tol=1e-6)
        assert math.isclose(kept[1, 1], 1e9, rel_tol=1e-6)
        assert dropped[1, 1] == 0.0

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            linalg.pinv(np.array([[1.0, np.inf]]))

    @settings(max_examples=60, deadline=None)
    @given(
        m=st.integers(1, 12),
        n=st.integers(1, 12),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_penrose_property(self, m, n, seed):
        rng = make_rng(seed)
        rank = int(rng.integers(1, min(m, n) + 1))
        a = random_matrix(rng, m, n, rank)
        assert max(penrose_errors(a, linalg.pinv(a))) < 1e-8

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_double_pinv_is_identity(self, seed):
        rng = make_rng(seed)
        a = rng.normal(size=(6, 4))
        assert np.allclose(linalg.pinv(linalg.pinv(a)), a, atol=1e-9)


class TestCosineSimMatrix:
    def test_matches_loop(self, rng):
        a = rng.normal(size=(4, 6))
        b = rng.normal(size=(5, 6))
        sims = linalg.cosine_sim_matrix(a, b)
        for i in range(4):
            for j in range(5):
                assert math.isclose(sims[i, j], float(a[i] @ b[j]), rel_tol=1e-12)

    def test_dim_mismatch(self, rng):
        with pytest.raises(ValueError, match="mismatch"):
            linalg.cosine_sim_matrix(rng.normal(size=(2, 3)), rng.normal(size=(2, 4)))


class TestLogSumExp:
    def test_matches_naive(self, rng):
        vals = rng.normal(size=11)
        naive = math.log(np.exp(vals).sum())
        assert math.isclose(linalg.log_sum_exp(vals), naive, rel_tol=1e-12)

    def test_large_values_stable(self):
        out = linalg.log_sum_exp([1000.0, 1000.0])
        assert math.isclose(out, 1000.0 + math.log(2.0), rel_tol=1e-12)

    def test_single_element_exact(self):
        assert linalg.log_sum_exp([-3.25]) == -3.25

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            linalg.log_sum_exp([])


class TestFrobeniusSq:
    def test_matches_loop(self, rng):
        a = rng.normal(size=(3, 7))
        manual = sum(float(x) ** 2 for x in a.ravel())
        assert math.isclose(linalg.frobenius_sq(a), manual, rel_tol=1e-12)

    def test_zero(self):
        assert linalg.frobenius_sq(np.zeros((2, 2))) == 0.0
