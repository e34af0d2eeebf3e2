"""Masked chunk prediction and latent alignment losses (mean reductions)."""

import torch
from torch.nn import functional as F

from jala.errors import DataError, ShapeError
from jala.model.masking import MaskPlan


def mcp_loss(logits: torch.Tensor, targets: torch.Tensor, plan, per_sample: bool = False) -> torch.Tensor:
    """Mean negative log-likelihood of the true ids at masked positions.

    ``plan`` is a ``MaskPlan`` or a boolean mask tensor shaped like ``targets``.
    With ``per_sample`` the mean is taken per batch row.
    """
    if isinstance(plan, MaskPlan):
        if not plan.labeled:
            raise DataError("masked chunk prediction needs a labeled plan")
        masked = plan.masked
    else:
        masked = plan
    if logits.shape[:-1] != targets.shape or masked.shape != targets.shape:
        raise ShapeError(f"logits {tuple(logits.shape)}, targets {tuple(targets.shape)} and mask "
                         f"{tuple(masked.shape)} disagree")
    if not bool(masked.any()):
        raise DataError("no masked positions to score")
    nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none")
    nll = nll.reshape(targets.shape) * masked
    if per_sample:
        if targets.dim() != 2:
            raise ShapeError("per-sample reduction needs (B, L) targets")
        return nll.sum(-1) / masked.sum(-1).clamp_min(1)
    return nll.sum() / masked.sum()


def align_loss(h: torch.Tensor, z: torch.Tensor, per_sample: bool = False) -> torch.Tensor:
    """Mean absolute difference between predictive embeddings and latents, over (K, d)."""
    if h.shape != z.shape:
        raise ShapeError(f"h {tuple(h.shape)} and z {tuple(z.shape)} differ")
    diff = (h - z).abs()
    if per_sample:
        return diff.flatten(1).mean(-1)
    return diff.mean()
