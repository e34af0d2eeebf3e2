"""Flow-matching action head.

Tokens are ``[proprio; A^tau_1 .. A^tau_H]``; each block self-attends over them
and cross-attends to the predictive embeddings. The regression target follows
``FlowConfig.target``:

* ``noise``: eps - A. The sampler integrates from noise (tau=0) to data
  (tau=1) by subtracting the field.
* ``velocity``: A - eps, the path velocity. The sampler adds the field.
"""

import logging
from typing import Callable

import torch
from torch import nn
from torch.nn import functional as F

from jala.config import FlowConfig
from jala.errors import ShapeError
from jala.model.layers import Block, CrossBlock, sinusoidal_embedding
from jala.numeric.backend import Rng

logger = logging.getLogger(__name__)

Field = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


class FlowHead(nn.Module):
    def __init__(self, config: FlowConfig, context_dim: int, action_dim: int, proprio_dim: int, horizon: int):
        super().__init__()
        self.config = config
        self.horizon = horizon
        self.action_dim = action_dim
        w = config.width
        self.action_in = nn.Linear(action_dim, w)
        self.proprio_in = nn.Linear(proprio_dim, w)
        self.time_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        self.pos_embed = nn.Parameter(torch.randn(horizon + 1, w) * 0.02)
        self.self_blocks = nn.ModuleList([Block(w, config.heads) for _ in range(config.depth)])
        self.cross_blocks = nn.ModuleList([CrossBlock(w, config.heads, context_dim) for _ in range(config.depth)])
        self.norm = nn.LayerNorm(w)
        self.out = nn.Linear(w, action_dim)

    def forward(self, h: torch.Tensor, noised: torch.Tensor, q: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
        """h (B, K, d), A^tau (B, H, D_a), q (B, D_p), tau (B,) -> field (B, H, D_a)."""
        if noised.shape[1:] != (self.horizon, self.action_dim):
            raise ShapeError(f"expected (B, {self.horizon}, {self.action_dim}) actions, got {tuple(noised.shape)}")
        tau = torch.as_tensor(tau, dtype=noised.dtype).reshape(-1).expand(noised.shape[0])
        t = self.time_mlp(sinusoidal_embedding(tau, self.config.width))
        x = torch.cat([self.proprio_in(q)[:, None], self.action_in(noised) + t[:, None]], 1)
        x = x + self.pos_embed[None]
        for attn, cross in zip(self.self_blocks, self.cross_blocks):
            x = cross(attn(x), h)
        return self.out(self.norm(x[:, 1:]))


def noise_action(actions: torch.Tensor, tau, eps: torch.Tensor) -> torch.Tensor:
    """A^tau = tau * A + (1 - tau) * eps, with tau scalar or per sample."""
    if actions.shape != eps.shape:
        raise ShapeError(f"actions {tuple(actions.shape)} and noise {tuple(eps.shape)} differ")
    tau = torch.as_tensor(tau, dtype=actions.dtype)
    if bool(((tau < 0) | (tau > 1)).any()):
        raise ValueError("tau must lie in [0, 1]")
    if tau.dim() == 1:
        tau = tau.reshape(-1, *([1] * (actions.dim() - 1)))
    return tau * actions + (1 - tau) * eps


def flow_target(actions: torch.Tensor, eps: torch.Tensor, target: str = "noise") -> torch.Tensor:
    if target == "noise":
        return eps - actions
    if target == "velocity":
        return actions - eps
    raise ValueError(f"unknown flow target {target!r}")


def fm_loss(field: Field, h, actions, q, tau, eps, target: str = "noise") -> torch.Tensor:
    """Mean squared error between the predicted field and the regression target."""
    predicted = field(h, noise_action(actions, tau, eps), q, torch.as_tensor(tau, dtype=actions.dtype))
    expected = flow_target(actions, eps, target)
    if predicted.shape != expected.shape:
        raise ShapeError(f"field output {tuple(predicted.shape)} does not match actions {tuple(expected.shape)}")
    return F.mse_loss(predicted, expected)


def sample_actions(field: Field, h, q, steps: int, rng: Rng = None, shape=None, eps=None,
                   target: str = "noise") -> torch.Tensor:
    """Forward Euler from tau=0 (noise) to tau=1 in ``steps`` equal steps."""
    if steps < 1:
        raise ValueError("at least one integration step is required")
    if eps is None:
        if rng is None or shape is None:
            raise ValueError("sampling needs either eps or (rng, shape)")
        eps = rng.normal(shape, dtype=q.dtype)
    sign = -1.0 if target == "noise" else 1.0
    delta = 1.0 / steps
    a = eps
    for n in range(steps):
        tau = torch.full((a.shape[0],), n * delta, dtype=a.dtype)
        a = a + sign * delta * field(h, a, q, tau)
    return a
