import numpy as np
import pytest
import torch

from smartgen import autodiff as ad
from smartgen.exceptions import NonFiniteError, ShapeError

D = torch.float64


def test_identity_linear():
    x = torch.randn(3, 4, dtype=D)
    assert torch.equal(ad.linear(x, torch.eye(4, dtype=D), torch.zeros(4, dtype=D)), x)


def test_softmax_rows_sum_to_one():
    s = torch.randn(5, 7) * 10
    mask = torch.rand(5, 7) > 0.4
    mask[:, 0] = True
    p = ad.masked_softmax(s, mask)
    assert torch.allclose(p.sum(-1), torch.ones(5), atol=1e-6)
    assert torch.all(p[~mask] == 0)
    empty = ad.masked_softmax(s, torch.zeros_like(mask))
    assert torch.all(empty == 0)


def test_dropout_modes():
    x = torch.randn(100, 10)
    assert ad.dropout(x, 0.1, False, None) is x
    g1, g2 = torch.Generator().manual_seed(3), torch.Generator().manual_seed(3)
    a, b = ad.dropout(x, 0.1, True, g1), ad.dropout(x, 0.1, True, g2)
    assert torch.equal(a, b)
    frac = float((a == 0).float().mean())
    assert 0.07 < frac < 0.13


def test_shape_errors_name_op():
    with pytest.raises(ShapeError, match="linear"):
        ad.linear(torch.randn(3, 5), torch.randn(4, 4))
    with pytest.raises(ShapeError, match="cross_entropy"):
        ad.cross_entropy(torch.randn(3, 4), torch.tensor([0, 1]))
    with pytest.raises(ShapeError, match="myattn"):
        ad.attention(torch.randn(2, 1, 4), torch.randn(2, 3, 1, 4), torch.randn(2, 3, 1, 4),
                     torch.ones(2, 2, dtype=torch.bool), "myattn")
    with pytest.raises(ShapeError):
        ad.embedding(torch.tensor([5]), torch.randn(3, 2))


def test_non_finite_trips():
    w = torch.randn(2, 2)
    with pytest.raises(NonFiniteError):
        ad.linear(torch.tensor([[float("inf"), 0.0]]), w)


def test_sum_gradient_is_ones():
    x = torch.randn(4, 3, dtype=D, requires_grad=True)
    x.sum().backward()
    assert torch.equal(x.grad, torch.ones_like(x))


def test_cross_entropy_stationary_at_optimum():
    logits = torch.full((1, 5), -50.0, dtype=D)
    logits[0, 2] = 50.0
    logits.requires_grad_(True)
    ad.cross_entropy(logits, torch.tensor([2])).backward()
    assert float(logits.grad.abs().max()) < 1e-7


def test_grad_check_scalar_examples():
    d = ad.numerical_gradient(lambda x: float((x ** 2).sum()), [3.0])
    assert d[0] == pytest.approx(6.0, abs=1e-8)
    assert ad.grad_check(lambda x: (x ** 2).sum(), [3.0]) < 1e-8
    assert np.all(ad.numerical_gradient(lambda x: 4.0, np.ones(3)) == 0)
    assert ad.grad_check(lambda x: x.sum() * 0 + 4.0, np.ones(3)) == 0.0


def test_two_layer_net_gradcheck():
    g = torch.Generator().manual_seed(0)
    w1, b1 = torch.randn(6, 4, generator=g, dtype=D), torch.randn(6, generator=g, dtype=D)
    w2 = torch.randn(3, 6, generator=g, dtype=D)
    x = torch.randn(5, 4, generator=g, dtype=D)
    tgt = torch.tensor([0, 2, 1, 1, 0])
    net = lambda a, b: ad.cross_entropy(ad.linear(ad.gelu(ad.linear(x, a, b)), w2), tgt)
    assert ad.grad_check(lambda t: net(t, b1), w1) < 1e-4
    assert ad.grad_check(lambda t: net(w1, t), b1) < 1e-4


def test_every_op_gradcheck():
    from smartgen.selftest import op_grad_checks

    assert op_grad_checks() < 1e-4


def test_forward_determinism():
    x = torch.randn(3, 2, 4, dtype=D)
    k = torch.randn(3, 5, 2, 4, dtype=D)
    mask = torch.ones(3, 5, dtype=torch.bool)
    assert torch.equal(ad.attention(x, k, k, mask), ad.attention(x, k, k, mask))
