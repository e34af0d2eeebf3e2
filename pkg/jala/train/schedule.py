"""Warmup + cosine learning-rate schedule and AdamW construction."""

import math
from typing import Iterable

import torch


def warmup_steps(total: int, warmup_fraction: float) -> int:
    return max(1, math.ceil(round(warmup_fraction * total, 9)))


def lr_schedule(step: int, total: int, base_lr: float, warmup_fraction: float = 0.05) -> float:
    """Linear warmup from 0 over the first warmup steps, then cosine decay to 0 at ``total``."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warmup = warmup_steps(total, warmup_fraction)
    if step < warmup:
        return base_lr * step / warmup
    if total == warmup:
        return base_lr
    progress = (step - warmup) / (total - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def build_optimizer(params: Iterable[torch.nn.Parameter], config) -> torch.optim.AdamW:
    """AdamW with decoupled weight decay; ``config`` is a pretrain or posttrain section."""
    return torch.optim.AdamW(list(params), lr=config.base_lr, betas=tuple(config.betas),
                             weight_decay=config.weight_decay, eps=1e-8)


def set_lr(optimizer: torch.optim.Optimizer, lr: float):
    for group in optimizer.param_groups:
        group["lr"] = lr
