import math

import pytest
import torch

from pyvptr.core import ConfigError, ShapeError
from pyvptr.losses import (
    LossWeights,
    _infonce_terms,
    contrastive_feature_loss,
    contrastive_terms,
    far_loss,
    gdl_loss,
    l2_loss,
    loss_steps,
    nar_loss,
    par_loss,
    reconstruction_loss,
    variant_loss,
)


def infonce_reference(anchor, positive):
    """Per-location infoNCE by explicit loops over `[S, D]` vectors."""
    values = []
    for s in range(anchor.shape[0]):
        logits = [float(anchor[s] @ positive[j]) for j in range(anchor.shape[0])]
        top = max(logits)
        denominator = sum(math.exp(logit - top) for logit in logits)
        values.append(-(logits[s] - top - math.log(denominator)))
    return values


def test_l2_loss():
    x = torch.zeros(1, 1, 1, 2, 2)
    x_hat = x.clone()
    assert l2_loss(x, x_hat) == 0
    x_hat[..., 0, 0] = 1.0
    assert l2_loss(x, x_hat) == 1
    assert l2_loss(x, x_hat, reduction="mean") == 0.25
    a, b = torch.randn(2, 3, 1, 4, 4, dtype=torch.float64), torch.randn(2, 3, 1, 4, 4, dtype=torch.float64)
    reference = sum(float(p - q) ** 2 for p, q in zip(a.flatten(), b.flatten()))
    assert abs(l2_loss(a, b).item() - reference) <= 1e-6
    with pytest.raises(ShapeError):
        l2_loss(a, b[:, :2])
    with pytest.raises(ValueError):
        l2_loss(a, b, reduction="max")


def test_gdl_hand_example():
    x = torch.tensor([[0.0, 1.0], [0.0, 1.0]])
    assert gdl_loss(x, torch.zeros(2, 2)) == 2


def test_gdl_is_shift_invariant():
    x = torch.rand(2, 3, 1, 8, 8, dtype=torch.float64)
    x_hat = torch.rand(2, 3, 1, 8, 8, dtype=torch.float64)
    assert gdl_loss(x, x) == 0
    assert gdl_loss(x, x + 0.25).abs() <= 1e-10
    torch.testing.assert_close(gdl_loss(x + 0.5, x_hat + 0.5), gdl_loss(x, x_hat))
    with pytest.raises(ShapeError):
        gdl_loss(torch.zeros(3, 1), torch.zeros(3, 1))


def test_pixel_losses_gradcheck():
    x = torch.rand(1, 2, 1, 3, 3, dtype=torch.float64)
    x_hat = torch.rand(1, 2, 1, 3, 3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda y: l2_loss(x, y), (x_hat,))
    assert torch.autograd.gradcheck(lambda y: gdl_loss(x, y, alpha=2.0), (x_hat,))
    assert torch.autograd.gradcheck(lambda y: reconstruction_loss(x, y), (x_hat,))


@pytest.mark.parametrize("side", [(1, 2), (2, 2), (4, 4)])
def test_contrastive_uniform_case(side):
    locations = side[0] * side[1]
    z = torch.ones(1, *side, 3, dtype=torch.float64)
    terms = contrastive_terms(z, z.clone())
    torch.testing.assert_close(terms, torch.full_like(terms, math.log(locations)), rtol=0, atol=1e-6)
    loss = contrastive_feature_loss(z, z.clone())
    assert abs(loss.item() - locations * math.log(locations)) <= 1e-6


def test_contrastive_matches_loop_reference():
    z = torch.randn(2, 2, 5, dtype=torch.float64)
    z_hat = torch.randn(2, 2, 5, dtype=torch.float64)
    terms = contrastive_terms(z, z_hat)
    v, v_hat = z.reshape(4, 5), z_hat.reshape(4, 5)
    expected = torch.tensor([infonce_reference(v_hat, v), infonce_reference(v, v_hat)], dtype=torch.float64)
    torch.testing.assert_close(terms, expected, rtol=0, atol=1e-6)
    assert abs(contrastive_feature_loss(z, z_hat).item() - 0.5 * expected.sum().item()) <= 1e-6


def test_contrastive_separated_features_approach_zero():
    a, b = torch.tensor([1.0]), torch.tensor([-1.0])
    previous = float("inf")
    for scale in (1.0, 3.0, 10.0):
        z = torch.stack([a * scale, b * scale]).reshape(1, 2, 1)
        loss = contrastive_feature_loss(z, z.clone()).item()
        assert loss < previous
        previous = loss
    assert previous < 1e-6


def test_contrastive_negatives_get_no_gradient():
    z = torch.randn(2, 2, 4, requires_grad=True)
    z_hat = torch.randn(2, 2, 4, requires_grad=True)
    # prediction at location 0 against the ground truth: location 0 is the
    # positive, every other ground-truth location a negative
    contrastive_terms(z, z_hat)[0, 0].backward()
    grad = z.grad.reshape(4, 4)
    assert grad[0].abs().sum() > 0
    assert torch.all(grad[1:] == 0)
    assert torch.all(z_hat.grad.reshape(4, 4)[1:] == 0)


def test_infonce_gradcheck():
    anchor = torch.randn(3, 2, dtype=torch.float64, requires_grad=True)
    positive = torch.randn(3, 2, dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda a: _infonce_terms(a, positive, 1.0), (anchor,))


def test_contrastive_errors():
    with pytest.raises(ShapeError):
        contrastive_feature_loss(torch.zeros(1, 1, 3), torch.zeros(1, 1, 3))
    with pytest.raises(ShapeError):
        contrastive_feature_loss(torch.zeros(2, 2, 3), torch.zeros(2, 1, 3))


def test_variant_index_ranges():
    far, par = loss_steps("far", 2, 2), loss_steps("par", 2, 2)
    assert list(far) == [2, 3, 4]
    assert list(par) == [3, 4]
    assert list(loss_steps("nar", 2, 2)) == list(par)


def test_composites_vanish_on_perfect_predictions():
    x = torch.rand(2, 4, 1, 4, 4)
    assert far_loss(x, x[:, 1:].clone()) == 0
    assert par_loss(x, x[:, 2:].clone(), past=2) == 0
    with pytest.raises(ShapeError):
        far_loss(x, x[:, 2:].clone())
    with pytest.raises(ShapeError):
        par_loss(x, x[:, 1:].clone(), past=2)

    z = torch.zeros(2, 2, 1, 2, 1)
    z[:, :, 0, 0, 0], z[:, :, 0, 1, 0] = 20.0, -20.0
    loss = nar_loss(x, x[:, 2:].clone(), z, z.clone(), past=2)
    assert 0 <= loss.item() < 1e-6


def test_nar_loss_adds_weighted_contrastive_term():
    x = torch.rand(1, 3, 1, 4, 4)
    x_hat = torch.rand(1, 2, 1, 4, 4)
    z, z_hat = torch.randn(1, 2, 2, 2, 4), torch.randn(1, 2, 2, 2, 4)
    pixel = par_loss(x, x_hat, past=1)
    assert nar_loss(x, x_hat, z, z_hat, past=1, lambda2=0) == pixel
    expected = pixel + 0.1 * contrastive_feature_loss(z, z_hat)
    torch.testing.assert_close(nar_loss(x, x_hat, z, z_hat, past=1), expected)
    torch.testing.assert_close(variant_loss("nar", x, x_hat, 1, z, z_hat), expected)
    with pytest.raises(ShapeError):
        nar_loss(x, x_hat, z[:, :1], z_hat[:, :1], past=1)


def test_nar_loss_gradcheck():
    x = torch.rand(1, 3, 1, 2, 2, dtype=torch.float64)
    x_hat = torch.rand(1, 2, 1, 2, 2, dtype=torch.float64, requires_grad=True)
    z = torch.randn(1, 2, 1, 2, 2, dtype=torch.float64)
    z_hat = torch.randn(1, 2, 1, 2, 2, dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda y: nar_loss(x, y, z, z_hat, past=1), (x_hat,))


def test_loss_weights_validation():
    assert LossWeights().lambda2 == 0.1
    with pytest.raises(ConfigError):
        LossWeights(lambda1=0.01)
    with pytest.raises(ConfigError):
        LossWeights(lambda2=-1)
    with pytest.raises(ConfigError):
        LossWeights(alpha=0.5)
