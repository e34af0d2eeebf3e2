"""Hybrid masking plans for masked chunk prediction.

Labeled streams pick one target chunk: earlier chunks stay visible, the target
is masked at a ratio drawn from ``TARGET_MASK_RATIOS`` and later chunks are
masked token-wise at ``SUFFIX_MASK_RATE``. Unlabeled streams mask every motion
position. Delimiters and the prefix are never masked.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import torch

from jala.config import SUFFIX_MASK_RATE, TARGET_MASK_RATIOS
from jala.errors import DataError
from jala.motion.stream import TokenStream, Vocab
from jala.numeric.backend import Rng


class ChunkRole(str, Enum):
    CONTEXT = "context"
    TARGET = "target"
    SUFFIX = "suffix"
    UNLABELED = "unlabeled"


@dataclass
class MaskPlan:
    masked: torch.Tensor  # (L,) or (B, L) bool
    labeled: bool
    target_chunk: Optional[int] = None
    roles: Tuple[ChunkRole, ...] = ()
    target_ratio: float = float("nan")

    def __post_init__(self):
        if self.masked.dtype != torch.bool:
            raise DataError("mask must be boolean")


def _motion_positions(stream: TokenStream) -> torch.Tensor:
    if stream.n_chunks < 1:
        raise DataError("stream has no motion chunks")
    return stream.motion_positions()


def sample_hybrid_mask(stream: TokenStream, rng: Rng, labeled: bool = True) -> MaskPlan:
    positions = _motion_positions(stream)
    n, k = positions.shape
    masked = torch.zeros(len(stream), dtype=torch.bool)
    if not labeled:
        masked[positions.reshape(-1)] = True
        return MaskPlan(masked, False, None, (ChunkRole.UNLABELED,) * n)

    target = rng.integer(n)
    ratio = TARGET_MASK_RATIOS[rng.integer(len(TARGET_MASK_RATIOS))]
    while True:
        chosen = rng.bernoulli(ratio, (k,))
        if chosen.any():
            break
    masked[positions[target][chosen]] = True
    for i in range(target + 1, n):
        masked[positions[i][rng.bernoulli(SUFFIX_MASK_RATE, (k,))]] = True
    roles = tuple(
        ChunkRole.CONTEXT if i < target else ChunkRole.TARGET if i == target else ChunkRole.SUFFIX
        for i in range(n)
    )
    return MaskPlan(masked, True, target, roles, ratio)


def full_chunk_plan(stream: TokenStream, chunk_index: int, labeled: bool = True) -> MaskPlan:
    """Plan with one chunk fully masked and every other chunk visible."""
    positions = _motion_positions(stream)
    n = positions.shape[0]
    if not 0 <= chunk_index < n:
        raise DataError(f"chunk index {chunk_index} outside [0, {n})")
    masked = torch.zeros(len(stream), dtype=torch.bool)
    masked[positions[chunk_index]] = True
    roles = tuple(ChunkRole.TARGET if i == chunk_index else ChunkRole.CONTEXT for i in range(n))
    return MaskPlan(masked, labeled, chunk_index, roles, 1.0)


def stack_plans(plans: Sequence[MaskPlan]) -> torch.Tensor:
    return torch.stack([p.masked for p in plans])


def apply_mask(stream: TokenStream, masked: torch.Tensor, vocab: Vocab) -> torch.Tensor:
    """Input ids with masked positions replaced by [MASK]."""
    if isinstance(masked, MaskPlan):
        masked = masked.masked
    return torch.where(masked, torch.full_like(stream.ids, vocab.MASK), stream.ids)
