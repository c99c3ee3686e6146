"""Training objectives. All functions take torch tensors and keep the autograd graph."""

from __future__ import annotations

from typing import Iterable, Optional, Sequence

import torch

from .config import LossConfig
from .encoders import LatentGaussian, gaussian_nll


class NumericError(FloatingPointError):
    pass


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def kl_diagonal_gaussian(g: LatentGaussian) -> torch.Tensor:
    """KL(N(mean, exp(log_var)) || N(0, I)) summed over the last axis.

    Leading axes are kept, so a batched latent gives one value per sample.
    """
    if not (torch.isfinite(g.mean).all() and torch.isfinite(g.log_var).all()):
        raise NumericError("non-finite latent parameters")
    return 0.5 * (torch.exp(g.log_var) + g.mean ** 2 - 1.0 - g.log_var).sum(-1)


def rmse_trajectory(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """sqrt of the mean squared box-vector error over all N*n predicted steps."""
    _same_shape(pred, gt, "rmse_trajectory")
    sq = ((pred - gt) ** 2).sum(-1)
    return torch.sqrt(sq.mean())


def trajectory_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    latents: Iterable[LatentGaussian],
    cfg: LossConfig = LossConfig(),
    reconstructions: Optional[Sequence[tuple[LatentGaussian, torch.Tensor]]] = None,
) -> torch.Tensor:
    """beta * sum of per-block KL (batch mean) + RMSE, plus the optional
    reconstruction NLL of each ``(per-step Gaussian, observed sequence)`` pair."""
    loss = rmse_trajectory(pred, gt)
    kl = sum((kl_diagonal_gaussian(g).mean() for g in latents), pred.new_zeros(()))
    loss = loss + cfg.beta * kl
    if cfg.reconstruction_reg and reconstructions:
        for g, target in reconstructions:
            loss = loss + gaussian_nll(g, target)
    return loss


def intention_loss(probs: torch.Tensor, labels: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    _same_shape(probs, labels, "intention_loss")
    eps = cfg.epsilon
    p = probs.clamp(eps, 1.0 - eps)
    labels = labels.to(p.dtype)
    return -(labels * torch.log(p) + (1 - labels) * torch.log(1 - p)).mean()


def total_loss(traj: torch.Tensor, intent: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    return cfg.lambda_traj * traj + cfg.lambda_int * intent
