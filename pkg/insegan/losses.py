"""Training objectives: adversarial losses and the three-part encoder loss."""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .assignment import match
from .config import SCORE_EPS

logger = logging.getLogger(__name__)


@dataclass
class EncoderLossWeights:
    """Weights of L_E = L_a + λ_i L_i + λ_p L_p; disabled terms weigh zero."""

    lambda_inter: float = 1.0
    lambda_pose: float = 1.0
    use_inter: bool = True
    use_pose: bool = True


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def pairwise_costs(Z: torch.Tensor, Zhat: torch.Tensor) -> np.ndarray:
    """Squared Euclidean distances between instance vectors, (B, n, n)."""
    Z64 = Z.detach().to("cpu", torch.float64)
    Zhat64 = Zhat.detach().to("cpu", torch.float64)
    return (torch.cdist(Z64, Zhat64) ** 2).numpy()


def align(Z: torch.Tensor, Zhat: torch.Tensor, mode: str = "ot") -> torch.Tensor:
    """Permutation indices (B, n) pairing row i of Z with row pi[i] of Zhat.

    The matching is a constant of the step: nothing is differentiated
    through it.
    """
    costs = pairwise_costs(Z, Zhat)
    perms = np.stack([match(cost, mode) for cost in costs])
    return torch.as_tensor(perms, dtype=torch.long, device=Zhat.device)


def alignment_loss(Z: torch.Tensor, Zhat: torch.Tensor, mode: str = "ot") -> torch.Tensor:
    """‖Z − π(Ẑ)‖² per latent set after aligning instances, batch mean.

    Args:
        Z: Sampled latent sets (n, d) or (B, n, d).
        Zhat: Encoded latent sets of the same shape, instance order arbitrary.
        mode: ``ot``, ``hungarian`` or ``greedy``.
    """
    _check_same_shape(Z, Zhat, "alignment_loss")
    single = Z.dim() == 2
    if single:
        Z, Zhat = Z.unsqueeze(0), Zhat.unsqueeze(0)
    perms = align(Z, Zhat, mode)
    aligned = torch.gather(Zhat, 1, perms.unsqueeze(-1).expand_as(Zhat))
    return ((Z - aligned) ** 2).sum(dim=(1, 2)).mean()


def intermediate_loss(fbar: torch.Tensor, derendered: torch.Tensor) -> torch.Tensor:
    """Mean squared error between pooled and derendered feature maps."""
    _check_same_shape(fbar, derendered, "intermediate_loss")
    return F.mse_loss(derendered, fbar)


def pose_loss(x_gen: torch.Tensor, x_regen: torch.Tensor, norm: str = "l1") -> torch.Tensor:
    """Distance between generated and re-generated depth images.

    ``l1`` is the mean absolute difference, ``l2`` the mean squared one.
    """
    _check_same_shape(x_gen, x_regen, "pose_loss")
    if norm == "l1":
        return F.l1_loss(x_regen, x_gen)
    if norm == "l2":
        return F.mse_loss(x_regen, x_gen)
    raise ValueError(f"Unknown pose norm: {norm!r}")


def encoder_loss(
    align_term: torch.Tensor,
    inter_term: torch.Tensor,
    pose_term: torch.Tensor,
    weights: Optional[EncoderLossWeights] = None,
) -> torch.Tensor:
    """Weighted sum of the three encoder terms; all enabled at weight 1 by default."""
    if weights is None:
        weights = EncoderLossWeights()
    total = align_term
    if weights.use_inter:
        total = total + weights.lambda_inter * inter_term
    if weights.use_pose:
        total = total + weights.lambda_pose * pose_term
    return total


def adversarial_losses(
    real_scores: torch.Tensor, fake_scores: torch.Tensor, eps: float = SCORE_EPS
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Discriminator loss and non-saturating generator loss.

    L_D = −E log D(x) − E log(1 − D(G(Z))),  L_G = −E log D(G(Z)).
    Scores are clamped to [eps, 1 − eps] before the logs.
    """
    real = real_scores.clamp(eps, 1.0 - eps)
    fake = fake_scores.clamp(eps, 1.0 - eps)
    loss_d = -torch.log(real).mean() - torch.log1p(-fake).mean()
    loss_g = -torch.log(fake).mean()
    return loss_d, loss_g
