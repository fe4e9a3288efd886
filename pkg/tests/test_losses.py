import numpy as np
import pytest
import torch

from liversearch.errors import DegenerateVectorError
from liversearch.selfsup.losses import neg_cosine, simsiam_loss


def _negcos_oracle(a, b):
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    sims = [
        float(np.dot(x, y) / (np.linalg.norm(x) * np.linalg.norm(y)))
        for x, y in zip(a, b)
    ]
    return -float(np.mean(sims))


def test_neg_cosine_identities():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = torch.from_numpy(rng.normal(size=(4, 16)).astype(np.float32))
        assert abs(neg_cosine(x, x).item() + 1.0) < 1e-6
        assert abs(neg_cosine(x, -x).item() - 1.0) < 1e-6
        assert abs(neg_cosine(x, 3.5 * x).item() + 1.0) < 1e-6


def test_neg_cosine_orthogonal():
    a = torch.tensor([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    b = torch.tensor([[0.0, 5.0, 0.0], [0.0, 0.0, 1.0]])
    assert abs(neg_cosine(a, b).item()) < 1e-7


def test_neg_cosine_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n, d = int(rng.integers(1, 9)), int(rng.integers(2, 33))
        a = rng.normal(size=(n, d)).astype(np.float32)
        b = rng.normal(size=(n, d)).astype(np.float32)
        got = neg_cosine(torch.from_numpy(a), torch.from_numpy(b)).item()
        assert abs(got - _negcos_oracle(a, b)) < 1e-5


def test_neg_cosine_one_dimensional_inputs():
    rng = np.random.default_rng(2)
    a = rng.normal(size=8).astype(np.float32)
    b = rng.normal(size=8).astype(np.float32)
    got = neg_cosine(torch.from_numpy(a), torch.from_numpy(b)).item()
    assert abs(got - _negcos_oracle(a, b)) < 1e-6


def test_neg_cosine_range():
    rng = np.random.default_rng(3)
    for _ in range(30):
        a = torch.from_numpy(rng.normal(size=(6, 10)).astype(np.float32))
        b = torch.from_numpy(rng.normal(size=(6, 10)).astype(np.float32))
        assert -1.0 - 1e-6 <= neg_cosine(a, b).item() <= 1.0 + 1e-6


def test_neg_cosine_zero_vector_rejected():
    a = torch.zeros(2, 4)
    b = torch.ones(2, 4)
    with pytest.raises(DegenerateVectorError):
        neg_cosine(a, b)
    with pytest.raises(DegenerateVectorError):
        neg_cosine(b, a)


def test_simsiam_loss_value_oracle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        p1, p2, z1, z2 = (rng.normal(size=(5, 12)).astype(np.float32) for _ in range(4))
        got = simsiam_loss(*map(torch.from_numpy, (p1, p2, z1, z2))).item()
        want = 0.5 * _negcos_oracle(p1, z2) + 0.5 * _negcos_oracle(p2, z1)
        assert abs(got - want) < 1e-5
        assert -1.0 - 1e-6 <= got <= 1.0 + 1e-6


def test_simsiam_loss_symmetry():
    rng = np.random.default_rng(5)
    p1, p2, z1, z2 = (
        torch.from_numpy(rng.normal(size=(3, 8)).astype(np.float32)) for _ in range(4)
    )
    assert simsiam_loss(p1, p2, z1, z2).item() == simsiam_loss(p2, p1, z2, z1).item()


def test_simsiam_loss_perfect_alignment():
    rng = np.random.default_rng(6)
    z1 = torch.from_numpy(rng.normal(size=(4, 8)).astype(np.float32))
    z2 = torch.from_numpy(rng.normal(size=(4, 8)).astype(np.float32))
    assert abs(simsiam_loss(z2, z1, z1, z2).item() + 1.0) < 1e-6


def test_stop_gradient_blocks_target_branch():
    torch.manual_seed(0)
    p1 = torch.randn(4, 8, requires_grad=True)
    p2 = torch.randn(4, 8, requires_grad=True)
    z1 = torch.randn(4, 8, requires_grad=True)
    z2 = torch.randn(4, 8, requires_grad=True)
    loss = simsiam_loss(p1, p2, z1, z2)
    loss.backward()
    assert p1.grad is not None and p1.grad.abs().sum() > 0
    assert p2.grad is not None and p2.grad.abs().sum() > 0
    assert z1.grad is None
    assert z2.grad is None


def test_neg_cosine_gradient_finite_difference():
    torch.manual_seed(1)
    a0 = torch.randn(3, 6, dtype=torch.float64)
    b0 = torch.randn(3, 6, dtype=torch.float64)
    a = a0.clone().requires_grad_(True)
    neg_cosine(a, b0).backward()
    eps = 1e-6
    for i in range(3):
        for j in range(6):
            lo, hi = a0.clone(), a0.clone()
            lo[i, j] -= eps
            hi[i, j] += eps
            fd = (neg_cosine(hi, b0).item() - neg_cosine(lo, b0).item()) / (2 * eps)
            assert abs(fd - a.grad[i, j].item()) < 1e-6
