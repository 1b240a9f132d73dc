import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmih.losses import (LossWeights, composite_loss, estimate_scale, huber_rho,
                         huber_rho_grad, nca_grad, nca_loss, neighbor_probs, pairwise_huber,
                         quant_grad, quant_loss, scale_from_residuals, tradeoff_schedule,
                         tradeoff_weights)


def central_diff(f, x, eps):
    return (f(x + eps) - f(x - eps)) / (2 * eps)


def random_problem(seed, n=5, k=4, classes=2):
    r = np.random.default_rng(seed)
    H = np.tanh(r.standard_normal((n, k)))
    labels = r.integers(0, classes, n)
    S = (labels[:, None] == labels[None, :]).astype(float)
    return H, S


def fd_grad(f, H, eps=1e-6):
    g = np.zeros_like(H)
    for idx in np.ndindex(H.shape):
        Hp, Hm = H.copy(), H.copy()
        Hp[idx] += eps
        Hm[idx] -= eps
        g[idx] = (f(Hp) - f(Hm)) / (2 * eps)
    return g


class TestHuber:
    def test_quadratic_branch(self):
        assert huber_rho(1.0, 1.345) == pytest.approx(0.5, abs=1e-15)

    def test_linear_branch(self):
        # 1.345 * 2 - 1.345^2 / 2
        assert huber_rho(2.0, 1.345) == pytest.approx(1.7854875, abs=1e-12)

    @pytest.mark.parametrize("c", [0.1, 1.345, 7.0])
    def test_boundary_value(self, c):
        assert huber_rho(c, c) == pytest.approx(0.5 * c * c, abs=1e-12)
        assert huber_rho(-c, c) == pytest.approx(0.5 * c * c, abs=1e-12)

    def test_grad_branches(self):
        assert huber_rho_grad(0.5, 1.345) == 0.5
        assert huber_rho_grad(-3.0, 1.345) == -1.345

    @pytest.mark.parametrize("r", [0.7, 2.0, -2.5])
    def test_grad_matches_fd(self, r):
        fd = central_diff(lambda x: float(huber_rho(x, 1.345)), r, 1e-5)
        assert huber_rho_grad(r, 1.345) == pytest.approx(fd, abs=1e-8)

    def test_clipping_bound(self, rng):
        r = rng.standard_normal(100_000) * 10
        c = rng.uniform(1e-3, 5, 100_000)
        assert np.all(np.abs(huber_rho_grad(r, c)) <= c)

    @given(st.floats(1e-3, 1e3))
    def test_branches_agree_at_threshold(self, c):
        inner = 0.5 * c * c
        outer = c * c - 0.5 * c * c
        assert math.isclose(float(huber_rho(c, c)), inner, rel_tol=1e-12)
        assert math.isclose(inner, outer, rel_tol=1e-12)
        assert float(huber_rho_grad(c, c)) == c
        assert float(huber_rho_grad(-c, c)) == -c


class TestScale:
    def test_hand_residuals(self):
        r = np.array([1, 2, 3, 4, 100], dtype=float)
        c = scale_from_residuals(r[:, None], t=2)
        # median 3, |r-3| = {2,1,0,1,97} -> MAD 1 -> sigma 1.485
        assert c[0] == pytest.approx(1.345 * 1.485, abs=1e-12)
        assert c[0] == pytest.approx(1.997325, abs=1e-12)

    def test_floor(self):
        c = scale_from_residuals(np.full((10, 3), 0.4), t=2)
        np.testing.assert_allclose(c, 1.345e-6)

    def test_warmup_is_seven_times(self, rng):
        H = np.tanh(rng.standard_normal((9, 5)))
        np.testing.assert_array_equal(estimate_scale(H, 1), 7.0 * estimate_scale(H, 2))

    def test_residual_population_is_pairs(self):
        H = np.array([[0.0], [1.0], [3.0]])
        # residuals i<j: -1, -3, -2 ; median -2, |dev| 1,1,0 -> MAD 1
        assert estimate_scale(H, 2)[0] == pytest.approx(1.345 * 1.485)

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            estimate_scale(np.zeros((1, 4)), 2)


class TestPairwise:
    def test_identical_rows(self):
        L = pairwise_huber(np.ones((3, 4)), np.ones(4))
        np.testing.assert_array_equal(L, 0.0)

    def test_hand_case(self):
        L = pairwise_huber(np.array([[1.0, 1.0], [-1.0, 1.0]]), np.array([1.0, 1.0]))
        assert L[0, 1] == pytest.approx(1.5)
        assert L[1, 0] == pytest.approx(1.5)

    @pytest.mark.parametrize("seed", range(5))
    def test_large_c_is_half_squared_euclidean(self, seed):
        r = np.random.default_rng(seed)
        H = r.uniform(-1, 1, (8, 8))
        L = pairwise_huber(H, np.full(8, 10.0))
        ref = np.array([[0.5 * np.sum((a - b) ** 2) for b in H] for a in H])
        np.testing.assert_allclose(L, ref, atol=1e-12)
        np.testing.assert_allclose(pairwise_huber(H, robust="l2"), ref, atol=1e-12)

    def test_symmetric_zero_diagonal(self, rng):
        H = np.tanh(rng.standard_normal((6, 3)))
        L = pairwise_huber(H, estimate_scale(H, 2))
        np.testing.assert_allclose(L, L.T, atol=1e-15)
        assert np.all(np.diag(L) == 0)


class TestNeighborProbs:
    def test_two_items(self):
        p = neighbor_probs(np.array([[0.0, 3.0], [3.0, 0.0]]))
        np.testing.assert_array_equal(p, [[0, 1], [1, 0]])

    def test_equal_distances(self):
        L = np.ones((3, 3)) - np.eye(3)
        p = neighbor_probs(L)
        np.testing.assert_allclose(p[~np.eye(3, dtype=bool)], 0.5)

    def test_rows_sum_to_one(self, rng):
        L = rng.uniform(0, 50, (10, 10))
        L = L + L.T
        p = neighbor_probs(L)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(np.diag(p) == 0)

    def test_shift_invariance(self, rng):
        L = rng.uniform(0, 5, (6, 6))
        shifted = L + rng.uniform(-100, 100, (6, 1))
        np.testing.assert_allclose(neighbor_probs(L), neighbor_probs(shifted), atol=1e-12)

    def test_no_overflow(self):
        L = np.array([[0, 1e4, 2e4], [1e4, 0, 5e3], [2e4, 5e3, 0]])
        p = neighbor_probs(L)
        assert np.all(np.isfinite(p))


class TestNcaLoss:
    def test_no_similar_pairs(self):
        p = neighbor_probs(np.ones((4, 4)))
        assert nca_loss(p, np.eye(4)) == 1.0

    def test_two_same_label(self):
        p = neighbor_probs(np.array([[0, 0.3], [0.3, 0]]))
        assert nca_loss(p, np.ones((2, 2))) == pytest.approx(0.5)

    @pytest.mark.parametrize("seed", range(5))
    def test_bounds(self, seed):
        H, S = random_problem(seed, n=7)
        p = neighbor_probs(pairwise_huber(H, robust="l2"))
        J = nca_loss(p, S)
        n = 7
        assert 1 - (n * n - n) / n ** 2 - 1e-12 <= J <= 1.0

    def test_monotone_in_similar_pair(self):
        H, S = random_problem(0, n=5)
        S[0, 1] = S[1, 0] = 1.0
        p = neighbor_probs(pairwise_huber(H, robust="l2"))
        q = p.copy()
        q[0, 1] += 0.01
        assert nca_loss(q, S) < nca_loss(p, S)


class TestNcaGrad:
    def test_symmetric_case_zero(self):
        H = np.full((4, 3), 0.3)
        S = np.ones((4, 4))
        c = np.ones(3)
        p = neighbor_probs(pairwise_huber(H, c))
        np.testing.assert_array_equal(nca_grad(H, S, p, c), 0.0)

    @pytest.mark.parametrize("robust", ["huber", "l2"])
    @pytest.mark.parametrize("seed", range(4))
    def test_matches_fd(self, seed, robust):
        H, S = random_problem(seed, n=5, k=4)
        c = estimate_scale(H, 2) if robust == "huber" else None

        def J(X):
            return nca_loss(neighbor_probs(pairwise_huber(X, c, robust)), S)

        g = nca_grad(H, S, neighbor_probs(pairwise_huber(H, c, robust)), c, robust)
        fd = fd_grad(J, H)
        rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-8)
        assert rel.max() <= 1e-5

    def test_bounded_by_thresholds(self, rng):
        # grad_i = sum_b (W_ib + W_bi) rho'(h_i - h_b) with |W_ab| <= p_ab / N^2;
        # rows of p sum to 1 and columns to at most N - 1, so |grad| <= max(c) / N
        H = rng.uniform(-1, 1, (12, 6)) * 50
        S = np.ones((12, 12))
        c = estimate_scale(np.tanh(H), 2)
        p = neighbor_probs(pairwise_huber(H, c))
        g = nca_grad(H, S, p, c)
        assert np.abs(g).max() <= c.max() / 12


class TestQuant:
    def test_binary_codes_zero(self):
        assert quant_loss(np.array([[1.0, -1.0], [-1.0, 1.0]])) == 0.0

    def test_zero_code(self):
        assert quant_loss(np.zeros((1, 2))) == pytest.approx(0.8675616609660542, abs=1e-12)

    def test_nonnegative(self, rng):
        assert quant_loss(rng.uniform(-3, 3, (20, 8))) >= 0.0

    def test_grad_values(self):
        assert quant_grad(np.array([1.0]))[0] == 0.0
        assert quant_grad(np.array([0.5]))[0] == pytest.approx(-0.46211715726000974, abs=1e-12)
        assert quant_grad(np.array([0.0]))[0] == pytest.approx(np.tanh(-1.0))

    @pytest.mark.parametrize("h", [-0.8, 0.3, 1.7])
    def test_grad_fd(self, h):
        fd = central_diff(lambda x: quant_loss(np.array([x])), h, 1e-5)
        assert quant_grad(np.array([h]))[0] == pytest.approx(fd, abs=1e-8)

    def test_large_values_stable(self):
        assert np.isfinite(quant_loss(np.array([1e6])))
        assert quant_loss(np.array([1e6])) == pytest.approx(1e6 - 1 - math.log(2))


class TestSchedule:
    def test_endpoints(self):
        assert tradeoff_schedule(0, 150) == (0.5, 0.5)
        assert tradeoff_schedule(150, 150) == (1.0, 0.0)

    def test_reference_point(self):
        lam_mi, lam_si = tradeoff_schedule(1.00671140939597, 150)
        assert lam_mi == pytest.approx(0.506688887887933, abs=1e-12)
        assert lam_mi == pytest.approx(0.506689, abs=1e-5)
        assert lam_si == pytest.approx(0.493311112112067, abs=1e-12)

    def test_clamped(self):
        assert tradeoff_schedule(200, 150) == (1.0, 0.0)

    @given(st.floats(0, 150), st.floats(0, 150))
    def test_sum_and_monotone(self, a, b):
        lo, hi = sorted((a, b))
        mi_lo, si_lo = tradeoff_schedule(lo, 150)
        mi_hi, _ = tradeoff_schedule(hi, 150)
        assert mi_lo + si_lo == pytest.approx(1.0, abs=1e-15)
        assert mi_lo <= mi_hi

    def test_modes(self):
        assert tradeoff_weights("equal", 3, 10) == (0.5, 0.5)
        assert tradeoff_weights("no_si", 3, 10) == (1.0, 0.0)
        with pytest.raises(ValueError):
            tradeoff_weights("bogus", 1, 10)


class TestComposite:
    def setup_method(self):
        r = np.random.default_rng(5)
        self.h_mi = np.tanh(r.standard_normal((4, 6)))
        self.h_si = np.tanh(r.standard_normal((9, 6)))
        self.S_mi = np.array([[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]], float)
        lab = np.array([0, 0, 0, 1, 1, 2, 2, 3, 3]) // 2
        self.S_si = (lab[:, None] == lab[None, :]).astype(float)

    def test_mi_only(self):
        w = LossWeights(1.0, 0.0, 0.0, 0.0, 2, 10)
        out = composite_loss(self.h_mi, self.h_si, self.S_mi, self.S_si, w, r_w=3.0)
        c = estimate_scale(self.h_mi, 2)
        ref = nca_loss(neighbor_probs(pairwise_huber(self.h_mi, c)), self.S_mi)
        assert out.total == pytest.approx(ref, abs=1e-15)
        np.testing.assert_array_equal(out.grad_si, 0.0)

    def test_all_zero_weights(self):
        w = LossWeights(0.0, 0.0, 0.0, 0.0)
        out = composite_loss(self.h_mi, self.h_si, self.S_mi, self.S_si, w, r_w=3.0)
        assert out.total == 0.0
        np.testing.assert_array_equal(out.grad_mi, 0.0)
        np.testing.assert_array_equal(out.grad_si, 0.0)

    @pytest.mark.parametrize("quant_norm", ["pairs_bits", "pairs", "sum"])
    def test_head_gradients_fd(self, quant_norm):
        w = LossWeights(0.7, 0.3, 0.05, 0.0, 2, 10)
        base = composite_loss(self.h_mi, self.h_si, self.S_mi, self.S_si, w, 0.0,
                              quant_norm=quant_norm)

        def J_mi(X):
            return composite_loss(X, self.h_si, self.S_mi, self.S_si, w, 0.0, "huber",
                                  base.scale_mi, base.scale_si, quant_norm).total

        def J_si(X):
            return composite_loss(self.h_mi, X, self.S_mi, self.S_si, w, 0.0, "huber",
                                  base.scale_mi, base.scale_si, quant_norm).total

        np.testing.assert_allclose(base.grad_mi, fd_grad(J_mi, self.h_mi), rtol=1e-5, atol=1e-10)
        np.testing.assert_allclose(base.grad_si, fd_grad(J_si, self.h_si), rtol=1e-5, atol=1e-10)

    def test_quant_norm(self):
        w = LossWeights(0.0, 0.0, 1.0, 0.0)
        a = composite_loss(self.h_mi, self.h_si, self.S_mi, self.S_si, w, 0.0, quant_norm="sum")
        b = composite_loss(self.h_mi, self.h_si, self.S_mi, self.S_si, w, 0.0, quant_norm="pairs")
        assert a.total == pytest.approx(quant_loss(self.h_mi))
        c = composite_loss(self.h_mi, self.h_si, self.S_mi, self.S_si, w, 0.0)
        assert b.total == pytest.approx(quant_loss(self.h_mi) / 16)
        assert c.total == pytest.approx(quant_loss(self.h_mi) / (16 * 6))
        with pytest.raises(ValueError):
            composite_loss(self.h_mi, self.h_si, self.S_mi, self.S_si, w, 0.0, quant_norm="x")
