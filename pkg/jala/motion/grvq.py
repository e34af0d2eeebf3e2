"""Grouped residual vector quantization (GRVQ).

Channels are split into G groups; each group is quantized through R residual
levels of C codewords. Codeword 0 of every level is the zero vector and never
moves, so adding a level can never increase the residual norm.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple

import torch
from torch import nn

from jala.errors import NotTrainedError, ShapeError
from jala.numeric.backend import Rng

logger = logging.getLogger(__name__)

DEAD_LEVEL_UTILIZATION = 0.01


@dataclass
class Codebook:
    part: str
    codewords: torch.Tensor  # (G, R, C, code_dim // G)

    def __post_init__(self):
        if self.codewords.dim() != 4:
            raise ShapeError("codewords must be (groups, levels, entries, group_dim)")
        if not torch.isfinite(self.codewords).all():
            raise ValueError(f"{self.part} codebook has non-finite codewords")

    @property
    def groups(self) -> int:
        return self.codewords.shape[0]

    @property
    def levels(self) -> int:
        return self.codewords.shape[1]

    @property
    def entries_per_level(self) -> int:
        return self.codewords.shape[2]

    @property
    def code_dim(self) -> int:
        return self.codewords.shape[0] * self.codewords.shape[3]

    def truncated(self, levels: int) -> "Codebook":
        return Codebook(self.part, self.codewords[:, :levels].clone())

    @classmethod
    def random(cls, part: str, groups: int, levels: int, entries: int, code_dim: int, rng: Rng, scale: float = 1.0):
        if code_dim % groups:
            raise ShapeError("code_dim must be divisible by groups")
        words = rng.normal((groups, levels, entries, code_dim // groups)) * scale
        words[:, :, 0] = 0
        return cls(part, words)


def nearest_codeword(residual: torch.Tensor, codewords: torch.Tensor) -> torch.Tensor:
    """Index of the nearest codeword per row (Euclidean; ties go to the lowest index)."""
    dist = ((residual[:, None, :] - codewords[None, :, :]) ** 2).sum(-1)
    return torch.argmin(dist, dim=-1)


def grvq_quantize_batch(x: torch.Tensor, codewords: torch.Tensor):
    """Quantize (B, code_dim) vectors.

    Returns indices (B, G, R), quantized (B, code_dim) and the residual fed to
    every level (B, G, R, group_dim), which the EMA update consumes.
    """
    groups, levels, _, group_dim = codewords.shape
    if x.dim() != 2 or x.shape[1] != groups * group_dim:
        raise ShapeError(f"expected vectors of length {groups * group_dim}, got {tuple(x.shape)}")
    parts = x.reshape(x.shape[0], groups, group_dim)
    indices = torch.zeros(x.shape[0], groups, levels, dtype=torch.long)
    level_inputs = torch.zeros(x.shape[0], groups, levels, group_dim, dtype=x.dtype)
    quantized = torch.zeros_like(parts)
    for g in range(groups):
        residual = parts[:, g]
        for r in range(levels):
            level_inputs[:, g, r] = residual
            idx = nearest_codeword(residual, codewords[g, r])
            chosen = codewords[g, r][idx]
            indices[:, g, r] = idx
            quantized[:, g] = quantized[:, g] + chosen
            residual = residual - chosen
    return indices, quantized.reshape(x.shape[0], -1), level_inputs


def grvq_quantize(vector: torch.Tensor, codebook: Codebook) -> Tuple[torch.Tensor, torch.Tensor, float]:
    if vector.dim() != 1 or vector.shape[0] != codebook.code_dim:
        raise ShapeError(f"vector length {tuple(vector.shape)} does not match code_dim {codebook.code_dim}")
    indices, quantized, _ = grvq_quantize_batch(vector[None], codebook.codewords.to(vector.dtype))
    residual_norm = float(torch.linalg.vector_norm(vector - quantized[0]))
    return indices[0], quantized[0], residual_norm


def dequantize(indices: torch.Tensor, codewords: torch.Tensor) -> torch.Tensor:
    """Sum of selected codewords; indices (..., G, R) -> (..., code_dim)."""
    groups, levels, entries, group_dim = codewords.shape
    if indices.shape[-2:] != (groups, levels):
        raise ShapeError(f"indices must end in ({groups}, {levels}), got {tuple(indices.shape)}")
    if indices.numel() and (indices.min() < 0 or indices.max() >= entries):
        raise ValueError(f"code index out of range [0, {entries})")
    lead = indices.shape[:-2]
    flat = indices.reshape(-1, groups, levels)
    out = torch.zeros(flat.shape[0], groups, group_dim, dtype=codewords.dtype)
    for g in range(groups):
        for r in range(levels):
            out[:, g] = out[:, g] + codewords[g, r][flat[:, g, r]]
    return out.reshape(*lead, groups * group_dim)


class GroupedResidualVQ(nn.Module):
    """GRVQ with EMA codebook updates and dead-code reinitialization."""

    def __init__(self, part: str, groups: int, levels: int, entries: int, code_dim: int,
                 decay: float = 0.99, dead_code_epochs: int = 2, eps: float = 1e-5):
        super().__init__()
        if code_dim % groups:
            raise ShapeError("code_dim must be divisible by groups")
        self.part = part
        self.decay = decay
        self.dead_code_epochs = dead_code_epochs
        self.eps = eps
        group_dim = code_dim // groups
        self.register_buffer("codewords", torch.zeros(groups, levels, entries, group_dim))
        self.register_buffer("ema_count", torch.ones(groups, levels, entries))
        self.register_buffer("ema_sum", torch.zeros(groups, levels, entries, group_dim))
        self.register_buffer("epoch_usage", torch.zeros(groups, levels, entries, dtype=torch.long))
        self.register_buffer("idle_epochs", torch.zeros(groups, levels, entries, dtype=torch.long))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))
        self._last_inputs = None

    @property
    def codebook(self) -> Codebook:
        return Codebook(self.part, self.codewords.detach().clone())

    def forward(self, x: torch.Tensor, rng: Rng = None):
        """Quantize (B, code_dim); returns straight-through output, indices and commitment loss."""
        if self.training and not bool(self.initialized):
            if rng is None:
                raise NotTrainedError(f"{self.part} codebook is not initialized; the first training call needs an rng")
            self._init_from(x.detach(), rng)
        indices, quantized, level_inputs = grvq_quantize_batch(x, self.codewords.to(x.dtype))
        if self.training:
            self._ema_update(level_inputs.detach(), indices)
        commitment = ((x - quantized.detach()) ** 2).mean()
        return x + (quantized - x).detach(), indices, commitment

    @torch.no_grad()
    def _init_from(self, x: torch.Tensor, rng: Rng):
        groups, levels, entries, group_dim = self.codewords.shape
        residual = x.reshape(x.shape[0], groups, group_dim).to(self.codewords.dtype)
        for r in range(levels):
            for g in range(groups):
                pool = _tile(residual[:, g], entries - 1, rng)
                self.codewords[g, r, 1:] = pool
                self.codewords[g, r, 0] = 0
            idx = torch.stack([nearest_codeword(residual[:, g], self.codewords[g, r]) for g in range(groups)], 1)
            for g in range(groups):
                residual[:, g] = residual[:, g] - self.codewords[g, r][idx[:, g]]
        self.ema_sum.copy_(self.codewords)
        self.ema_count.fill_(1.0)
        self.initialized.fill_(True)

    @torch.no_grad()
    def _ema_update(self, level_inputs: torch.Tensor, indices: torch.Tensor):
        groups, levels, entries, _ = self.codewords.shape
        level_inputs = level_inputs.to(self.codewords.dtype)
        for g in range(groups):
            for r in range(levels):
                onehot = torch.nn.functional.one_hot(indices[:, g, r], entries).to(self.codewords.dtype)
                counts = onehot.sum(0)
                sums = onehot.t() @ level_inputs[:, g, r]
                self.epoch_usage[g, r] += counts.long()
                self.ema_count[g, r].mul_(self.decay).add_(counts, alpha=1 - self.decay)
                self.ema_sum[g, r].mul_(self.decay).add_(sums, alpha=1 - self.decay)
                total = self.ema_count[g, r].sum()
                smoothed = (self.ema_count[g, r] + self.eps) / (total + entries * self.eps) * total
                self.codewords[g, r] = self.ema_sum[g, r] / smoothed[:, None]
                self.codewords[g, r, 0] = 0
        self._last_inputs = level_inputs

    @torch.no_grad()
    def end_epoch(self, rng: Rng) -> Dict[str, List[List[int]]]:
        """Close an epoch: report usage and reinitialize codes idle for too long."""
        groups, levels, entries, _ = self.codewords.shape
        usage = self.epoch_usage.clone()
        self.idle_epochs = torch.where(usage > 0, torch.zeros_like(self.idle_epochs), self.idle_epochs + 1)
        self.idle_epochs[:, :, 0] = 0
        if self._last_inputs is not None:
            for g in range(groups):
                for r in range(levels):
                    dead = torch.nonzero(self.idle_epochs[g, r] >= self.dead_code_epochs).reshape(-1)
                    if dead.numel() == 0:
                        continue
                    fresh = _tile(self._last_inputs[:, g, r], dead.numel(), rng)
                    self.codewords[g, r, dead] = fresh
                    self.ema_sum[g, r, dead] = fresh
                    self.ema_count[g, r, dead] = 1.0
                    self.idle_epochs[g, r, dead] = 0
        for g in range(groups):
            for r in range(levels):
                used = float((usage[g, r] > 0).float().mean())
                if used < DEAD_LEVEL_UTILIZATION:
                    logger.warning("%s codebook group %d level %d utilization %.3f below %.2f",
                                   self.part, g, r, used, DEAD_LEVEL_UTILIZATION)
        self.epoch_usage.zero_()
        return {"counts": usage.tolist()}


def _tile(x: torch.Tensor, n: int, rng: Rng) -> torch.Tensor:
    """Draw n rows from x, repeating with small jitter when x has fewer rows."""
    if x.shape[0] >= n:
        return x[rng.permutation(x.shape[0])[:n]].clone()
    repeats = (n + x.shape[0] - 1) // x.shape[0]
    out = x.repeat(repeats, 1)
    out = out + rng.normal(out.shape, dtype=out.dtype) * (0.01 / max(1, x.shape[1]) ** 0.5)
    return out[rng.permutation(out.shape[0])[:n]]
