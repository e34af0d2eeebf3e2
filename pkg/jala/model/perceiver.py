"""Latent action (LAP) and latent state (LSP) perceivers.

Both are the same module: K learnable queries cross-attend to the features of
two frames, self-attend, and pass through a two-head MLP whose doubled output
is split into a left-hand and a right-hand half. LSP is LAP applied to a
duplicated initial frame.

Parameters split into the backbone part (everything except the queries,
including the heads) and the query part. Gradients update the LSP backbone and
the LAP queries; the other two halves follow by EMA.
"""

import copy
import logging
from typing import Dict, Iterator, List, Tuple

import torch
from torch import nn
from torch.func import functional_call
from torch.nn import functional as F

from jala.config import PerceiverConfig
from jala.errors import ShapeError
from jala.model.layers import Block, CrossBlock

logger = logging.getLogger(__name__)

QUERY_PARAMS = ("queries",)


class LatentPerceiver(nn.Module):
    def __init__(self, config: PerceiverConfig, d_model: int, obs_token_dim: int, n_queries: int):
        super().__init__()
        self.d_model = d_model
        self.queries = nn.Parameter(torch.randn(n_queries, d_model) * 0.02)
        self.input_proj = nn.Linear(obs_token_dim, d_model)
        # frame-order embedding: (start, end)
        self.frame_embed = nn.Parameter(torch.randn(2, d_model) * 0.02)
        self.cross = nn.ModuleList([CrossBlock(d_model, config.heads) for _ in range(config.layers)])
        self.latent = nn.ModuleList([Block(d_model, config.heads) for _ in range(config.layers)])
        self.norm = nn.LayerNorm(d_model)
        self.head_hidden = nn.Linear(d_model, config.head_hidden)
        self.head_out = nn.Linear(config.head_hidden, 2 * d_model)

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]

    def forward(self, start: torch.Tensor, end: torch.Tensor, hand_side: torch.Tensor, queries=None):
        """(B, n_tok, obs_token_dim) x 2 -> (B, K, d) latents for the given hand sides."""
        if start.shape != end.shape:
            raise ShapeError(f"frame features differ in shape: {tuple(start.shape)} vs {tuple(end.shape)}")
        if start.dim() == 2:
            start, end = start[None], end[None]
        hand_side = torch.as_tensor(hand_side, dtype=torch.long).reshape(-1).expand(start.shape[0])
        context = torch.cat([self.input_proj(start) + self.frame_embed[0],
                             self.input_proj(end) + self.frame_embed[1]], 1)
        queries = self.queries if queries is None else queries
        x = queries[None].expand(start.shape[0], -1, -1)
        for cross, latent in zip(self.cross, self.latent):
            x = latent(cross(x, context))
        out = self.head_out(F.gelu(self.head_hidden(self.norm(x))))
        left, right = out.chunk(2, dim=-1)
        return torch.where(hand_side[:, None, None] == 0, left, right)

    def backbone_named_parameters(self) -> Iterator[Tuple[str, nn.Parameter]]:
        return ((n, p) for n, p in self.named_parameters() if n not in QUERY_PARAMS)

    def query_named_parameters(self) -> Iterator[Tuple[str, nn.Parameter]]:
        return ((n, p) for n, p in self.named_parameters() if n in QUERY_PARAMS)


def lap_forward(perceiver: LatentPerceiver, start, end, hand_side, detach_backbone: bool = False):
    """Latent actions from boundary frames.

    With ``detach_backbone`` the backbone parameters enter as constants, so only
    the queries receive gradients.
    """
    if not detach_backbone:
        return perceiver(start, end, hand_side)
    params = {n: p.detach() for n, p in perceiver.backbone_named_parameters()}
    params.update(dict(perceiver.query_named_parameters()))
    return functional_call(perceiver, params, (start, end, hand_side))


def lsp_forward(perceiver: LatentPerceiver, first, hand_side, detach_queries: bool = False):
    """Latent state from a duplicated initial frame."""
    queries = perceiver.queries.detach() if detach_queries else None
    return perceiver(first, first, hand_side, queries=queries)


class PerceiverPair(nn.Module):
    """LAP plus LSP. With ``decoupled=False`` both names refer to one shared module."""

    def __init__(self, config: PerceiverConfig, d_model: int, obs_token_dim: int, n_queries: int):
        super().__init__()
        self.config = config
        self.lap = LatentPerceiver(config, d_model, obs_token_dim, n_queries)
        if config.decoupled:
            self.lsp = copy.deepcopy(self.lap)
        else:
            self.lsp = self.lap

    @property
    def decoupled(self) -> bool:
        return self.config.decoupled

    def action_latents(self, start, end, hand_side):
        return lap_forward(self.lap, start, end, hand_side, detach_backbone=self.decoupled)

    def state_latents(self, first, hand_side):
        return lsp_forward(self.lsp, first, hand_side, detach_queries=self.decoupled)

    def ema_step(self):
        if self.decoupled and self.config.ema:
            decoupled_ema_update(self.lap, self.lsp, self.config.alpha)


def gradient_routing(pair: PerceiverPair) -> Dict[str, bool]:
    """Which perceiver parameters the optimizer updates, by qualified name."""
    routing = {}
    if not pair.decoupled:
        for name, _ in pair.lap.named_parameters():
            routing[f"lap.{name}"] = True
        return routing
    for name, _ in pair.lap.backbone_named_parameters():
        routing[f"lap.{name}"] = False
        routing[f"lsp.{name}"] = True
    for name, _ in pair.lap.query_named_parameters():
        routing[f"lap.{name}"] = True
        routing[f"lsp.{name}"] = False
    return routing


def trainable_parameters(pair: PerceiverPair) -> List[nn.Parameter]:
    routing = gradient_routing(pair)
    params = dict(pair.named_parameters())
    return [params[name] for name, trainable in routing.items() if trainable]


@torch.no_grad()
def decoupled_ema_update(lap: LatentPerceiver, lsp: LatentPerceiver, alpha: float):
    """lap.backbone <- a*lap.backbone + (1-a)*lsp.backbone; lsp.queries <- a*lsp.queries + (1-a)*lap.queries."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"EMA coefficient must lie in [0, 1), got {alpha}")
    source = dict(lsp.backbone_named_parameters())
    for name, target in lap.backbone_named_parameters():
        _ema(target, source[name], alpha)
    source = dict(lap.query_named_parameters())
    for name, target in lsp.query_named_parameters():
        _ema(target, source[name], alpha)


def _ema(target: torch.Tensor, source: torch.Tensor, alpha: float):
    if alpha == 0.0:
        target.copy_(source)
    else:
        mixed = alpha * target + (1.0 - alpha) * source
        # equal entries stay bitwise fixed
        target.copy_(torch.where(target == source, target, mixed))


def z_std(z: torch.Tensor) -> float:
    """Standard deviation of latents across the batch, averaged over (K, d)."""
    if z.shape[0] < 2:
        return 0.0
    return float(z.detach().std(0, unbiased=False).mean())
