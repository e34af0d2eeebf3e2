"""Post-training: flow-matching action head on top of the backbone's predictive embeddings.

The backbone runs once per sample with the acted chunk fully masked; its
embeddings condition the flow head. Backbone and head train; the perceivers
stay frozen and only supply latent-state context tokens.
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Sequence

import torch
from torch.nn.utils import clip_grad_norm_

from jala.config import JalaConfig, config_hash
from jala.errors import DataError, EmptyResultError, NotTrainedError
from jala.model.flow_head import FlowHead, fm_loss, sample_actions
from jala.numeric.backend import Rng
from jala.train.batches import PostTrainBatch, action_chunk_starts, assemble_posttrain_batch, make_vocab
from jala.train.metrics import MetricWriter
from jala.train.pretrain import build_models
from jala.train.schedule import build_optimizer, lr_schedule, set_lr
from jala.world.synthetic import EpisodeSample

logger = logging.getLogger(__name__)

PHASE = "posttrain"
COLUMNS = ("step", "lr", "total_loss", "grad_norm", "wall_ms")


class PostTrainState:
    phase = PHASE

    def __init__(self, config: JalaConfig, tokenizer_hash: str = ""):
        self.config = config
        self.vocab = make_vocab(config)
        self.backbone, self.perceivers = build_models(config, self.vocab)
        self.perceivers.requires_grad_(False)
        w = config.world
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(Rng(config.runtime.seed, "flow-init").randint(2**62, (1,))[0]))
            self.flow_head = FlowHead(config.flow, config.backbone.d_model, w.action_dim, w.proprio_dim,
                                      w.action_horizon)
        self.parameters = list(self.backbone.parameters()) + list(self.flow_head.parameters())
        self.optimizer = build_optimizer(self.parameters, config.posttrain)
        self.rng = Rng(config.runtime.seed, PHASE)
        self.step = 0
        self.tokenizer_hash = tokenizer_hash
        self.init_source = "random"

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def modules(self) -> Dict[str, torch.nn.Module]:
        return {"backbone": self.backbone, "perceivers": self.perceivers, "flow_head": self.flow_head}


def init_posttrain_state(config: JalaConfig, pretrained=None) -> PostTrainState:
    """Fresh post-training state; ``posttrain.init=pretrained`` copies weights from a pretraining checkpoint."""
    from jala.train.checkpoint import load_model_weights

    state = PostTrainState(config)
    if config.posttrain.init == "pretrained":
        if pretrained is None:
            raise NotTrainedError("posttrain.init=pretrained needs a pretraining checkpoint")
        load_model_weights(pretrained, config, backbone=state.backbone, perceivers=state.perceivers)
        state.init_source = str(pretrained)
    return state


def embeddings(state: PostTrainState, batch: PostTrainBatch) -> torch.Tensor:
    """(B, K, d) states of the masked chunk after block ``flow_layer`` (the align layer by default)."""
    with torch.no_grad():
        latents = state.perceivers.lsp(batch.first_frames, batch.first_frames, batch.hand)
    ids = torch.where(batch.masked, torch.full_like(batch.stream.ids, state.vocab.MASK), batch.stream.ids)
    out = state.backbone(batch.stream, input_ids=ids, visual=batch.first_frames, latents=latents)
    return out.motion_states(state.config.flow_layer)[:, 0]


def posttrain_step(batch: PostTrainBatch, state: PostTrainState) -> Dict[str, float]:
    if not isinstance(batch, PostTrainBatch):
        raise DataError("post-training needs a robot action batch")
    if len(batch) == 0:
        raise EmptyResultError("empty batch")
    cfg = state.config.posttrain
    lr = lr_schedule(min(state.step + 1, cfg.total_steps), cfg.total_steps, cfg.base_lr, cfg.warmup_fraction)
    set_lr(state.optimizer, lr)
    rng = state.rng.substream(f"step/{state.step}/noise")
    tau = rng.uniform((len(batch),), dtype=batch.actions.dtype)
    eps = rng.normal(batch.actions.shape, dtype=batch.actions.dtype)
    loss = fm_loss(state.flow_head, embeddings(state, batch), batch.actions, batch.proprio, tau, eps,
                   state.config.flow.target)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    grad_norm = clip_grad_norm_(state.parameters, cfg.clip_norm)
    state.optimizer.step()
    state.step += 1
    return {"step": state.step, "lr": lr, "total_loss": float(loss.detach()), "grad_norm": float(grad_norm)}


@torch.no_grad()
def predict_actions(state: PostTrainState, batch: PostTrainBatch, rng: Rng) -> torch.Tensor:
    h = embeddings(state, batch)
    return sample_actions(state.flow_head, h, batch.proprio, state.config.flow.steps, rng=rng,
                          shape=batch.actions.shape, target=state.config.flow.target)


@torch.no_grad()
def held_out_action_mse(state: PostTrainState, episodes: Sequence[EpisodeSample], seed: int = 0) -> float:
    """Mean squared action error over every valid action chunk of the given episodes."""
    episodes = list(episodes)
    pairs = [(e, t) for e in episodes for t in action_chunk_starts(e, state.config)]
    if not pairs:
        raise EmptyResultError("no held-out action chunks")
    rng = Rng(seed, "held-out-noise")
    total, count = 0.0, 0
    size = state.config.posttrain.batch_size
    for i in range(0, len(pairs), size):
        chunk = pairs[i:i + size]
        batch = assemble_posttrain_batch([e for e, _ in chunk], state.config, state.vocab,
                                         starts=[t for _, t in chunk])
        predicted = predict_actions(state, batch, rng)
        total += float(((predicted - batch.actions) ** 2).sum())
        count += batch.actions.numel()
    return total / count


def next_batch(state: PostTrainState, episodes: Sequence[EpisodeSample]) -> PostTrainBatch:
    rng = state.rng.substream(f"step/{state.step}/batch")
    picks = rng.randint(len(episodes), (state.config.posttrain.batch_size,))
    return assemble_posttrain_batch([episodes[int(i)] for i in picks], state.config, state.vocab, rng)


def run_posttraining(config: JalaConfig, out_dir, pretrained=None, steps: Optional[int] = None,
                     state: Optional[PostTrainState] = None, splits: Optional[dict] = None) -> Dict[str, float]:
    from jala.train.checkpoint import save_checkpoint
    from jala.world.synthetic import make_splits

    out_dir = Path(out_dir)
    splits = splits or make_splits(config.world)
    train_eps, eval_eps = list(splits["robot_train"]), list(splits["robot_eval"])
    resume_step = state.step if state is not None else None
    state = state or init_posttrain_state(config, pretrained)
    steps = config.posttrain.total_steps if steps is None else steps
    initial = held_out_action_mse(state, eval_eps, config.runtime.seed)
    writer = MetricWriter(out_dir / "posttrain_metrics.csv", COLUMNS, wall_time=config.logging.wall_time,
                          config_hash=state.config_hash, resume_step=resume_step)
    while state.step < steps:
        metrics = posttrain_step(next_batch(state, train_eps), state)
        writer.write(metrics)
        if state.step % config.posttrain.log_every == 0:
            logger.info("step %d/%d fm %.4f", state.step, steps, metrics["total_loss"])
    checkpoint = out_dir / "posttrain.ckpt"
    save_checkpoint(state, checkpoint)
    final = held_out_action_mse(state, eval_eps, config.runtime.seed)
    logger.info("held-out action MSE %.5f (before training %.5f)", final, initial)
    return {
        "step": state.step,
        "init": config.posttrain.init,
        "initial_mse": initial,
        "held_out_mse": final,
        "checkpoint": str(checkpoint),
    }
