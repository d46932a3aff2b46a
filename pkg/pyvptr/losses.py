"""
Training objectives.

Every pixel loss sums over frames (and pixels) by default, which is the
optimisation objective. `reduction="mean"` divides by the element count
and is what gets logged, so numbers stay comparable across shapes.

Index conventions for the composites are 1-based like the model
description: a clip holds frames `1..L+N`, FAR is supervised on
`2..L+N`, PAR and NAR on `L+1..L+N`.
"""

from dataclasses import dataclass

import torch

from pyvptr.core import ShapeError, ConfigError, Variant


@dataclass
class LossWeights:
    lambda1: float = 0.0
    lambda2: float = 0.1
    alpha: float = 1.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.lambda1 != 0:
            raise ConfigError("lambda1 weights the adversarial term, which is not implemented; it must be 0")
        if self.lambda2 < 0:
            raise ConfigError(f"lambda2 must be >= 0, got {self.lambda2}")
        if self.alpha < 1:
            raise ConfigError(f"alpha must be >= 1, got {self.alpha}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")


def _same_shape(x, x_hat):
    if x.shape != x_hat.shape:
        raise ShapeError(f"Loss inputs differ in shape: {tuple(x.shape)} vs {tuple(x_hat.shape)}")


def _reduce(total, x, reduction):
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total / x.numel()
    raise ValueError(f"Unknown reduction {reduction!r}")


def l2_loss(x, x_hat, reduction="sum"):
    _same_shape(x, x_hat)
    return _reduce(((x - x_hat) ** 2).sum(), x, reduction)


def gdl_loss(x, x_hat, alpha=1.0, reduction="sum"):
    """Gradient difference loss over the last two (row, column) axes.

    Compares absolute differences of neighbouring pixels, so it does not
    see a constant offset between `x` and `x_hat`.
    """
    _same_shape(x, x_hat)
    if x.ndim < 2 or x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ShapeError(f"gdl_loss needs at least 2x2 images, got {tuple(x.shape)}")
    rows = (x[..., 1:, :] - x[..., :-1, :]).abs() - (x_hat[..., 1:, :] - x_hat[..., :-1, :]).abs()
    cols = (x[..., :, :-1] - x[..., :, 1:]).abs() - (x_hat[..., :, :-1] - x_hat[..., :, 1:]).abs()
    total = rows.abs().pow(alpha).sum() + cols.abs().pow(alpha).sum()
    return _reduce(total, x, reduction)


def reconstruction_loss(x, x_hat, alpha=1.0, reduction="sum"):
    return l2_loss(x, x_hat, reduction) + gdl_loss(x, x_hat, alpha, reduction)


def _infonce_terms(anchor, positive, temperature):
    """`l_c(anchor_s, positive_s, sg(positive_others))` for every location s."""
    logits = anchor @ positive.detach().transpose(-2, -1)
    diagonal = (anchor * positive).sum(-1)
    logits = torch.diagonal_scatter(logits, diagonal, dim1=-2, dim2=-1) / temperature
    return -logits.log_softmax(dim=-1).diagonal(dim1=-2, dim2=-1)


def contrastive_terms(z, z_hat, temperature=1.0):
    """Per-location infoNCE values `[..., 2, S]`.

    Row 0 anchors on the prediction (ground truth is the positive, other
    ground-truth locations the negatives); row 1 the other way round.
    Negatives never receive gradient.
    """
    _same_shape(z, z_hat)
    if z.ndim < 3:
        raise ShapeError(f"Contrastive loss expects [..., Hf, Wf, D], got {tuple(z.shape)}")
    if z.shape[-3] * z.shape[-2] < 2:
        raise ShapeError("Contrastive loss needs at least 2 spatial locations")
    v = z.flatten(-3, -2)
    v_hat = z_hat.flatten(-3, -2)
    return torch.stack([_infonce_terms(v_hat, v, temperature), _infonce_terms(v, v_hat, temperature)], dim=-2)


def contrastive_feature_loss(z, z_hat, temperature=1.0):
    """Symmetric infoNCE between feature maps `[..., Hf, Wf, D]`.

    Half the sum of both terms over locations; leading axes (batch,
    time) are averaged.
    """
    per_map = 0.5 * contrastive_terms(z, z_hat, temperature).sum(dim=(-2, -1))
    return per_map.mean()


def loss_steps(variant, past, future):
    if Variant(variant) is Variant.far:
        return range(2, past + future + 1)
    return range(past + 1, past + future + 1)


def _check_steps(x, x_hat, steps):
    if x_hat.shape[1] != len(steps) or x.shape[1] < steps[-1]:
        raise ShapeError(
            f"Predictions cover {x_hat.shape[1]} steps, expected {len(steps)} "
            f"(frames {steps[0]}..{steps[-1]} of a clip of {x.shape[1]})"
        )
    return x[:, steps[0] - 1 : steps[-1]]


def far_loss(x, x_hat, alpha=1.0, reduction="sum"):
    """`x` is the whole clip `[N, L+N, ...]`, `x_hat` predicts frames `2..L+N`."""
    target = _check_steps(x, x_hat, loss_steps(Variant.far, 1, x.shape[1] - 1))
    return reconstruction_loss(target, x_hat, alpha, reduction)


def par_loss(x, x_hat, past, alpha=1.0, reduction="sum"):
    target = _check_steps(x, x_hat, loss_steps(Variant.par, past, x.shape[1] - past))
    return reconstruction_loss(target, x_hat, alpha, reduction)


def nar_loss(x, x_hat, z, z_hat, past, lambda2=0.1, alpha=1.0, temperature=1.0, reduction="sum"):
    """PAR's pixel terms plus `lambda2` times the contrastive feature loss.

    `z`/`z_hat` are the ground-truth and predicted future features
    `[N, N_f, Hf, Wf, D]`.
    """
    target = _check_steps(x, x_hat, loss_steps(Variant.nar, past, x.shape[1] - past))
    if z.shape[1] != x_hat.shape[1]:
        raise ShapeError(f"Feature pairs cover {z.shape[1]} steps, predictions {x_hat.shape[1]}")
    pixel = reconstruction_loss(target, x_hat, alpha, reduction)
    if lambda2 == 0:
        return pixel
    return pixel + lambda2 * contrastive_feature_loss(z, z_hat, temperature)


def variant_loss(variant, x, x_hat, past, z=None, z_hat=None, weights=None, reduction="sum"):
    weights = weights or LossWeights()
    variant = Variant(variant)
    if variant is Variant.far:
        return far_loss(x, x_hat, weights.alpha, reduction)
    if variant is Variant.par:
        return par_loss(x, x_hat, past, weights.alpha, reduction)
    return nar_loss(x, x_hat, z, z_hat, past, weights.lambda2, weights.alpha, weights.temperature, reduction)
