import math

import numpy as np
import pytest
import torch

from clnet.errors import NumericError, ValidationError
from clnet.objective import InfoNCELoss, info_nce, similarity_matrix


def nested_loop_nce(sims: np.ndarray, tau: float) -> float:
    """Direct per-row evaluation of -log(exp(M_ii/tau) / sum_j exp(M_ij/tau))."""
    b = sims.shape[0]
    total = 0.0
    for i in range(b):
        denom = 0.0
        for j in range(b):
            denom += math.exp(sims[i, j] / tau)
        total += -(sims[i, i] / tau - math.log(denom))
    return total / b


def unit_rows(n, d, seed):
    x = np.random.default_rng(seed).normal(size=(n, d))
    return torch.from_numpy(x / np.linalg.norm(x, axis=1, keepdims=True))


class TestSimilarityMatrix:
    def test_orthonormal_rows_give_identity(self):
        e = torch.eye(4, dtype=torch.float64)
        assert torch.equal(similarity_matrix(e, e), e)

    def test_antipodal_diagonal(self):
        e = unit_rows(5, 3, 0)
        sims = similarity_matrix(e, -e)
        assert torch.allclose(sims.diagonal(), -torch.ones(5, dtype=torch.float64))

    def test_matches_pairwise_dots(self):
        g, s = unit_rows(4, 6, 1), unit_rows(4, 6, 2)
        sims = similarity_matrix(g, s)
        for i in range(4):
            for j in range(4):
                assert sims[i, j].item() == pytest.approx(float(torch.dot(g[i], s[j])), abs=1e-12)

    def test_batch_mismatch(self):
        with pytest.raises(ValidationError):
            similarity_matrix(unit_rows(3, 4, 0), unit_rows(4, 4, 0))


class TestInfoNCE:
    def test_all_equal_similarities_give_log_b(self):
        for b in (2, 5, 8):
            sims = torch.full((b, b), 0.3, dtype=torch.float64)
            assert info_nce(sims, tau=0.07).item() == pytest.approx(math.log(b), abs=1e-9)

    def test_two_by_two_closed_form(self):
        sims = torch.eye(2, dtype=torch.float64)
        expected = -math.log(math.e / (math.e + 1))
        for direction in ("g2s", "s2g", "symmetric"):
            assert info_nce(sims, tau=1.0, direction=direction).item() == pytest.approx(expected, abs=1e-12)

    def test_lower_temperature_sharpens_correct_diagonal(self):
        sims = torch.eye(2, dtype=torch.float64)
        assert info_nce(sims, tau=0.1).item() < info_nce(sims, tau=1.0).item()

    def test_nested_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            b = int(rng.integers(1, 9))
            sims = rng.uniform(-1, 1, size=(b, b))
            tau = float(rng.uniform(0.05, 1.0))
            m = torch.from_numpy(sims)
            assert info_nce(m, tau, "g2s").item() == pytest.approx(nested_loop_nce(sims, tau), abs=1e-9)
            assert info_nce(m, tau, "s2g").item() == pytest.approx(nested_loop_nce(sims.T, tau), abs=1e-9)
            sym = 0.5 * (nested_loop_nce(sims, tau) + nested_loop_nce(sims.T, tau))
            assert info_nce(m, tau).item() == pytest.approx(sym, abs=1e-9)

    def test_row_shift_invariance(self):
        sims = torch.rand(4, 4, dtype=torch.float64)
        shifted = sims + torch.arange(4, dtype=torch.float64)[:, None]
        assert info_nce(shifted, 0.5, "g2s").item() == pytest.approx(info_nce(sims, 0.5, "g2s").item(), abs=1e-12)

    def test_joint_permutation_invariance(self):
        sims = torch.rand(6, 6, dtype=torch.float64)
        perm = torch.randperm(6)
        permuted = sims[perm][:, perm]
        assert info_nce(permuted, 0.2).item() == pytest.approx(info_nce(sims, 0.2).item(), abs=1e-12)

    def test_large_logits_stay_finite(self):
        sims = torch.tensor([[1.0, -1.0], [-1.0, 1.0]], dtype=torch.float64)
        loss = info_nce(sims, tau=1e-4)
        assert torch.isfinite(loss)

    @pytest.mark.parametrize("tau", [0.0, -0.1])
    def test_non_positive_tau(self, tau):
        with pytest.raises(ValidationError):
            info_nce(torch.eye(2), tau=tau)

    def test_non_finite_similarity(self):
        sims = torch.eye(3)
        sims[0, 1] = float("inf")
        with pytest.raises(NumericError):
            info_nce(sims)

    def test_gradcheck(self):
        sims = torch.rand(5, 5, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda m: info_nce(m, 0.3), (sims,), eps=1e-6, atol=1e-8, rtol=1e-6)


class TestInfoNCELoss:
    def test_fixed_tau_is_not_a_parameter(self):
        loss = InfoNCELoss(0.07)
        assert list(loss.parameters()) == []
        assert float(loss.tau) == pytest.approx(0.07)

    def test_learnable_tau_gets_gradient(self):
        loss = InfoNCELoss(0.5, learnable=True)
        g, s = unit_rows(4, 3, 5).float(), unit_rows(4, 3, 6).float()
        loss(g, s).backward()
        assert loss.log_tau.grad is not None

    def test_matches_functional_form(self):
        g, s = unit_rows(3, 4, 7), unit_rows(3, 4, 8)
        module = InfoNCELoss(0.2, direction="g2s").double()
        expected = info_nce(similarity_matrix(g, s), 0.2, "g2s")
        assert module(g, s).item() == pytest.approx(expected.item(), abs=1e-6)
