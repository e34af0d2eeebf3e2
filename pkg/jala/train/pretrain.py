"""Pretraining: hybrid masked-chunk prediction plus latent alignment.

Per sample the loss is ``mcp (labeled only) + align_weight * align``; the batch
loss is the mean over samples. After every optimizer step the perceivers take
their decoupled EMA update.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import torch
from torch.nn.utils import clip_grad_norm_

from jala.config import JalaConfig, config_hash
from jala.errors import EmptyResultError
from jala.model.backbone import VLABackbone
from jala.model.losses import align_loss, mcp_loss
from jala.model.perceiver import PerceiverPair, trainable_parameters, z_std
from jala.motion.stream import Vocab
from jala.numeric.backend import Rng
from jala.train.batches import PretrainBatch, PretrainData, assemble_pretrain_batch, make_vocab
from jala.train.metrics import MetricWriter
from jala.train.schedule import build_optimizer, lr_schedule, set_lr

logger = logging.getLogger(__name__)

PHASE = "pretrain"


def build_models(config: JalaConfig, vocab: Vocab, seed: Optional[int] = None):
    """Backbone and perceiver pair, initialized from a seed-derived torch stream."""
    seed = config.runtime.seed if seed is None else seed
    init_seed = int(Rng(seed, "init").randint(2**62, (1,))[0])
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        backbone = VLABackbone(config.backbone, vocab, config.world.obs_token_dim)
        perceivers = PerceiverPair(config.perceiver, config.backbone.d_model, config.world.obs_token_dim,
                                   config.tokenizer.tokens_per_chunk)
    return backbone, perceivers


class PretrainState:
    phase = PHASE

    def __init__(self, config: JalaConfig, tokenizer_hash: str = ""):
        self.config = config
        self.vocab = make_vocab(config)
        self.backbone, self.perceivers = build_models(config, self.vocab)
        self.parameters: List[torch.nn.Parameter] = list(self.backbone.parameters()) + trainable_parameters(self.perceivers)
        self.optimizer = build_optimizer(self.parameters, config.pretrain)
        self.rng = Rng(config.runtime.seed, PHASE)
        self.step = 0
        self.tokenizer_hash = tokenizer_hash

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def modules(self) -> Dict[str, torch.nn.Module]:
        return {"backbone": self.backbone, "perceivers": self.perceivers}


@dataclass
class PretrainLosses:
    total: torch.Tensor
    mcp: torch.Tensor  # (B,), zero for unlabeled rows
    align: torch.Tensor  # (B,)
    labeled: torch.Tensor  # (B,)
    z: torch.Tensor  # (B, N, K, d)


def compute_pretrain_losses(batch: PretrainBatch, state: PretrainState) -> PretrainLosses:
    if len(batch) == 0:
        raise EmptyResultError("empty batch")
    b, n = batch.starts.shape[:2]
    latents = state.perceivers.state_latents(batch.first_frames, batch.hand)
    out = state.backbone(batch.stream, input_ids=_masked_ids(batch, state.vocab),
                         visual=batch.first_frames, latents=latents)
    z = state.perceivers.action_latents(batch.starts.flatten(0, 1), batch.ends.flatten(0, 1),
                                        batch.hand.repeat_interleave(n))
    z = z.reshape(out.h.shape)
    align = align_loss(out.h, z, per_sample=True)
    mcp = torch.zeros_like(align)
    labeled = batch.labeled
    if bool(labeled.any()):
        rows = torch.nonzero(labeled).reshape(-1)
        mcp = mcp.index_put((rows,), mcp_loss(out.logits[rows], batch.stream.ids[rows], batch.masked[rows],
                                              per_sample=True))
    total = (mcp + state.config.pretrain.align_weight * align).mean()
    return PretrainLosses(total, mcp, align, labeled, z)


def _masked_ids(batch: PretrainBatch, vocab: Vocab) -> torch.Tensor:
    return torch.where(batch.masked, torch.full_like(batch.stream.ids, vocab.MASK), batch.stream.ids)


def pretrain_step(batch: PretrainBatch, state: PretrainState) -> Dict[str, float]:
    """One optimizer step; the k-th step (1-based) runs at lr_schedule(k)."""
    cfg = state.config.pretrain
    lr = lr_schedule(min(state.step + 1, cfg.total_steps), cfg.total_steps, cfg.base_lr, cfg.warmup_fraction)
    set_lr(state.optimizer, lr)
    losses = compute_pretrain_losses(batch, state)
    state.optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    grad_norm = clip_grad_norm_(state.parameters, cfg.clip_norm)
    state.optimizer.step()
    state.perceivers.ema_step()
    state.step += 1
    labeled = losses.labeled
    mcp = float(losses.mcp.detach()[labeled].mean()) if bool(labeled.any()) else float("nan")
    return {
        "step": state.step,
        "lr": lr,
        "total_loss": float(losses.total.detach()),
        "mcp": mcp,
        "align": float(losses.align.detach().mean()),
        "grad_norm": float(grad_norm),
        "z_std": z_std(losses.z.detach()),
        "labeled_fraction": float(labeled.double().mean()),
    }


def next_batch(state: PretrainState, data: PretrainData) -> PretrainBatch:
    """Batch for the current step; draws come from step-named substreams, so resuming replays them."""
    rng = state.rng.substream(f"step/{state.step}")
    items = data.sample(rng.substream("batch"), state.config.pretrain.batch_size)
    return assemble_pretrain_batch(items, state.config, state.vocab, rng.substream("mask"))


def run_pretraining(config: JalaConfig, tokenizer, out_dir, steps: Optional[int] = None,
                    state: Optional[PretrainState] = None, data: Optional[PretrainData] = None,
                    splits: Optional[dict] = None, tokenizer_hash: str = "") -> Dict[str, float]:
    """Train until ``steps`` (default: pretrain.total_steps); writes metrics and a checkpoint."""
    from jala.train.checkpoint import save_checkpoint
    from jala.world.synthetic import make_splits

    out_dir = Path(out_dir)
    cfg = config.pretrain
    steps = cfg.total_steps if steps is None else steps
    if data is None:
        data = PretrainData.from_splits(splits or make_splits(config.world), tokenizer, config)
    resume_step = state.step if state is not None else None
    state = state or PretrainState(config, tokenizer_hash)
    writer = MetricWriter(out_dir / "pretrain_metrics.csv", wall_time=config.logging.wall_time,
                          config_hash=state.config_hash, resume_step=resume_step)
    checkpoint = out_dir / "pretrain.ckpt"
    first_z = last = None
    while state.step < steps:
        metrics = pretrain_step(next_batch(state, data), state)
        writer.write(metrics)
        first_z = metrics["z_std"] if first_z is None else first_z
        last = metrics
        if state.step % cfg.log_every == 0:
            logger.info("step %d/%d loss %.4f mcp %.4f align %.4f z_std %.4f", state.step, steps,
                        metrics["total_loss"], metrics["mcp"], metrics["align"], metrics["z_std"])
        if state.step % cfg.checkpoint_every == 0:
            save_checkpoint(state, checkpoint)
    save_checkpoint(state, checkpoint)
    summary = {"step": state.step, "checkpoint": str(checkpoint)}
    if last is not None:
        summary.update({k: last[k] for k in ("total_loss", "mcp", "align", "z_std")})
        summary["z_std_ratio"] = last["z_std"] / first_z if first_z else float("nan")
    return summary
