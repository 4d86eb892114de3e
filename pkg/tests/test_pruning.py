import numpy as np
import pytest

from sparsecbm.errors import ConfigError
from sparsecbm.pruning import (
    FisherEstimate,
    PruneConfig,
    obs_score,
    obs_update,
    quadratic_loss_increase,
)


def make_fisher(blocks, block_size=None):
    if block_size is None:
        block_size = blocks[0].shape[0]
    n = sum(b.shape[0] for b in blocks)
    return FisherEstimate(blocks, block_size, n, concept_index=0)


def random_psd(dim, rng, zeta=1e-4):
    g = rng.normal(0, 1, size=(max(dim // 2, 1), dim))
    return g.T @ g / g.shape[0] + zeta * np.eye(dim)


def brute_force_qp(fisher_block, theta, q):
    """Reduced-linear-system solve of min 1/2 d^T F d s.t. d_q = -theta_q."""
    dim = fisher_block.shape[0]
    q = sorted(q)
    rest = [i for i in range(dim) if i not in q]
    d = np.zeros(dim)
    d[q] = -theta[q]
    if rest:
        f_rr = fisher_block[np.ix_(rest, rest)]
        f_rq = fisher_block[np.ix_(rest, q)]
        d[rest] = np.linalg.solve(f_rr, -f_rq @ d[q])
    rho = 0.5 * d @ fisher_block @ d
    return d, rho


class TestObsScore:
    def test_zero_weight_costs_nothing(self):
        fisher = make_fisher([np.diag([2.0, 4.0])])
        theta = np.array([0.0, 3.0])
        assert obs_score([0], theta, fisher) == pytest.approx(0.0, abs=1e-15)

    def test_diagonal_fisher_hand_example(self):
        fisher = make_fisher([np.diag([2.0, 4.0])])
        theta = np.array([1.0, 3.0])
        # F^-1 = diag(0.5, 0.25); rho = 3^2 / (2 * 0.25) = 18
        assert obs_score([1], theta, fisher) == pytest.approx(18.0, abs=1e-12)

    def test_coupled_fisher_hand_example(self):
        fisher = make_fisher([np.array([[2.0, 1.0], [1.0, 2.0]])])
        theta = np.array([1.0, 1.0])
        # F^-1 = (1/3)[[2,-1],[-1,2]]; rho = 1 / (2 * 2/3) = 0.75
        assert obs_score([0], theta, fisher) == pytest.approx(0.75, abs=1e-12)

    def test_singleton_matches_classic_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            dim = int(rng.integers(2, 16))
            f = random_psd(dim, rng)
            fisher = make_fisher([f])
            theta = rng.normal(0, 1, dim)
            inv = np.linalg.inv(f)
            b = int(rng.integers(0, dim))
            expected = theta[b] ** 2 / (2 * inv[b, b])
            assert obs_score([b], theta, fisher) == pytest.approx(expected, rel=1e-10)

    def test_group_must_stay_in_one_block(self):
        fisher = make_fisher([np.eye(2), np.eye(2)], block_size=2)
        theta = np.ones(4)
        with pytest.raises(ValueError):
            obs_score([1, 2], theta, fisher)


class TestObsUpdate:
    def test_diagonal_fisher_zeroes_only_the_group(self):
        fisher = make_fisher([np.diag([2.0, 4.0, 1.0])])
        theta = np.array([1.0, 3.0, -2.0])
        delta = obs_update([1], theta, fisher)
        assert delta[1] == pytest.approx(-3.0, abs=1e-12)
        assert delta[0] == pytest.approx(0.0, abs=1e-12)
        assert delta[2] == pytest.approx(0.0, abs=1e-12)

    def test_coupled_fisher_hand_example(self):
        fisher = make_fisher([np.array([[2.0, 1.0], [1.0, 2.0]])])
        theta = np.array([1.0, 1.0])
        delta = obs_update([0], theta, fisher)
        assert np.allclose(delta, [-1.0, 0.5], atol=1e-12)
        assert np.allclose(theta + delta, [0.0, 1.5], atol=1e-12)

    def test_zero_weight_needs_no_update(self):
        rng = np.random.default_rng(1)
        f = random_psd(5, rng)
        fisher = make_fisher([f])
        theta = rng.normal(0, 1, 5)
        theta[2] = 0.0
        delta = obs_update([2], theta, fisher)
        assert np.allclose(delta, np.zeros(5), atol=1e-12)

    def test_constraint_satisfied_exactly(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            dim = int(rng.integers(3, 20))
            f = random_psd(dim, rng)
            fisher = make_fisher([f])
            theta = rng.normal(0, 1, dim)
            q = sorted(rng.choice(dim, size=int(rng.integers(1, 4)), replace=False).tolist())
            delta = obs_update(q, theta, fisher)
            assert np.max(np.abs((theta + delta)[q])) <= 1e-10


class TestClosedFormsAgainstBruteForce:
    def test_score_and_update_match_reduced_qp(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            dim = int(rng.integers(2, 21))
            f = random_psd(dim, rng)
            fisher = make_fisher([f])
            theta = rng.normal(0, 1, dim)
            size = int(rng.integers(1, min(4, dim + 1)))
            q = sorted(rng.choice(dim, size=size, replace=False).tolist())
            delta = obs_update(q, theta, fisher)
            rho = obs_score(q, theta, fisher)
            d_ref, rho_ref = brute_force_qp(f, theta, q)
            assert np.allclose(delta, d_ref, atol=1e-8)
            assert rho == pytest.approx(rho_ref, abs=1e-8, rel=1e-8)

    def test_quadratic_model_consistency(self):
        # 1/2 d^T F d evaluated at the optimal update equals rho
        rng = np.random.default_rng(4)
        for _ in range(50):
            dim = int(rng.integers(2, 21))
            f = random_psd(dim, rng)
            fisher = make_fisher([f])
            theta = rng.normal(0, 1, dim)
            size = int(rng.integers(1, min(4, dim + 1)))
            q = sorted(rng.choice(dim, size=size, replace=False).tolist())
            delta = obs_update(q, theta, fisher)
            rho = obs_score(q, theta, fisher)
            assert quadratic_loss_increase(delta, fisher) == pytest.approx(rho, abs=1e-10, rel=1e-10)


class TestPruneConfig:
    def test_default_sparsity_is_one_minus_one_over_k(self):
        cfg = PruneConfig()
        assert cfg.resolved_sparsity(4) == pytest.approx(0.75)
        assert cfg.resolved_sparsity(2) == pytest.approx(0.5)

    def test_validation(self):
        with pytest.raises(ConfigError):
            PruneConfig(target_sparsity=1.0)
        with pytest.raises(ConfigError):
            PruneConfig(dampening=0.0)
        with pytest.raises(ConfigError):
            PruneConfig(fisher_samples=0)
        with pytest.raises(ConfigError):
            PruneConfig(compensation="bogus")
