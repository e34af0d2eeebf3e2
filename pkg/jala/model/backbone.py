"""VLA backbone: a small transformer over tagged token streams.

Prefix positions (instruction, visual, latent-state) attend bidirectionally
among themselves. Motion and delimiter positions of chunk c attend to the
prefix, to every earlier chunk and bidirectionally within chunk c. Predictive
embeddings ``h`` are read at the motion positions after the residual of block
``align_layer`` (1-based).
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
from torch import nn

from jala.config import BackboneConfig
from jala.errors import ShapeError
from jala.model.layers import Block
from jala.model.masking import MaskPlan, apply_mask
from jala.motion.stream import NONE, Modality, TokenStream, Vocab

logger = logging.getLogger(__name__)

_CHUNKED = (int(Modality.MOTION), int(Modality.DELIMITER), int(Modality.MASK))
_PREFIX = (int(Modality.INSTRUCTION), int(Modality.VISUAL))


@dataclass
class BackboneOutput:
    logits: torch.Tensor  # (B, L, V)
    h: torch.Tensor  # (B, N, K, d)
    hidden: torch.Tensor  # (B, L, d), final block output before the output norm
    align_hidden: torch.Tensor  # (B, L, d)
    layers: Tuple[torch.Tensor, ...] = ()  # output of every block, (B, L, d) each
    positions: Optional[torch.Tensor] = None  # (N, K) motion positions

    def motion_states(self, layer: int) -> torch.Tensor:
        """(B, N, K, d) states at the motion positions after block ``layer`` (1-based)."""
        if not 1 <= layer <= len(self.layers):
            raise ShapeError(f"layer {layer} outside [1, {len(self.layers)}]")
        return self.layers[layer - 1][:, self.positions]


def _row(t: torch.Tensor) -> torch.Tensor:
    return t[0] if t.dim() == 2 else t


def build_attention_mask(stream: TokenStream, plan: Optional[MaskPlan] = None) -> torch.Tensor:
    """(L, L) boolean matrix, True where query row may attend to key column.

    Masking replaces ids, not connectivity, so ``plan`` does not change the result.
    """
    modality = _row(stream.modality)
    chunk = _row(stream.chunk_index)
    is_prefix = torch.zeros_like(modality, dtype=torch.bool)
    for m in _PREFIX:
        is_prefix |= modality == m
    is_chunked = torch.zeros_like(is_prefix)
    for m in _CHUNKED:
        is_chunked |= modality == m
    untagged = ~(is_prefix | is_chunked) | (is_chunked & (chunk == NONE)) | (is_prefix & (chunk != NONE))
    if bool(untagged.any()):
        p = int(torch.nonzero(untagged)[0])
        raise ShapeError(f"position {p} has no valid modality/chunk tag")
    key_prefix = is_prefix[None, :]
    same_or_earlier = chunk[None, :] <= chunk[:, None]
    return key_prefix | (is_chunked[:, None] & is_chunked[None, :] & same_or_earlier)


class VLABackbone(nn.Module):
    def __init__(self, config: BackboneConfig, vocab: Vocab, obs_token_dim: int):
        super().__init__()
        self.config = config
        self.vocab = vocab
        d = config.d_model
        self.token_embed = nn.Embedding(vocab.size, d)
        self.pos_embed = nn.Embedding(config.max_positions, d)
        self.modality_embed = nn.Embedding(len(Modality), d)
        self.hand_embed = nn.Embedding(3, d)
        self.visual_proj = nn.Linear(obs_token_dim, d)
        self.blocks = nn.ModuleList([Block(d, config.heads, config.mlp_ratio) for _ in range(config.layers)])
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, vocab.size)

    @property
    def align_layer(self) -> int:
        return self.config.resolved_align_layer

    def _place(self, x, ids_row, token_id, values, name):
        positions = torch.nonzero(ids_row == token_id).reshape(-1)
        if values is None:
            return x
        if values.shape[1] != positions.numel():
            raise ShapeError(f"{positions.numel()} {name} positions but {values.shape[1]} {name} vectors")
        x = x.clone()
        x[:, positions] = x[:, positions] + values
        return x

    def embed(self, input_ids, stream: TokenStream, visual=None, latents=None):
        if input_ids.dim() == 1:
            input_ids = input_ids[None]
        length = input_ids.shape[1]
        if length > self.config.max_positions:
            raise ShapeError(f"stream of {length} tokens exceeds max_positions {self.config.max_positions}")
        modality = stream.modality if stream.modality.dim() == 2 else stream.modality[None]
        hand = stream.hand_side if stream.hand_side.dim() == 2 else stream.hand_side[None]
        x = self.token_embed(input_ids)
        x = x + self.pos_embed(torch.arange(length))[None]
        x = x + self.modality_embed(modality) + self.hand_embed(hand + 1)
        ids_row = _row(stream.ids)
        if visual is not None:
            x = self._place(x, ids_row, self.vocab.VIS, self.visual_proj(visual), "visual")
        return self._place(x, ids_row, self.vocab.LAT, latents, "latent")

    def forward(self, stream: TokenStream, plan: Optional[MaskPlan] = None, visual=None, latents=None,
                input_ids=None) -> BackboneOutput:
        """Run the stream; masked positions (from ``plan`` or ``input_ids``) see only [MASK]."""
        if input_ids is None:
            input_ids = stream.ids if plan is None else apply_mask(stream, plan.masked, self.vocab)
        mask = build_attention_mask(stream)
        x = self.embed(input_ids, stream, visual, latents)
        layers = []
        for block in self.blocks:
            x = block(x, mask)
            layers.append(x)
        align_hidden = layers[self.align_layer - 1]
        positions = stream.motion_positions()
        h = align_hidden[:, positions]
        return BackboneOutput(self.head(self.norm(x)), h, x, align_hidden, tuple(layers), positions)
