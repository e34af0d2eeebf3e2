"""Episode -> token stream -> batch assembly for pre- and post-training."""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch

from jala.config import JalaConfig
from jala.errors import DataError, EmptyResultError
from jala.model.masking import MaskPlan, full_chunk_plan, sample_hybrid_mask, stack_plans
from jala.motion.pose import chunk_sequence
from jala.motion.stream import TokenChunk, TokenStream, Vocab, collate_streams, format_stream
from jala.numeric.backend import Rng
from jala.world.synthetic import EpisodeSample, Split, boundary_frames, n_chunks

logger = logging.getLogger(__name__)


def make_vocab(config: JalaConfig) -> Vocab:
    return Vocab(config.world.n_verbs + config.world.n_targets, config.tokenizer.codebook_size)


def tokenize_episode(episode: EpisodeSample, tokenizer, chunk_length: int) -> List[TokenChunk]:
    if not episode.labeled:
        raise DataError("only labeled episodes can be tokenized")
    chunks = chunk_sequence(episode.poses, chunk_length, episode.hand_side)
    wrist, finger = tokenizer.tokenize_batch(torch.stack([c.poses for c in chunks]))
    return [TokenChunk(tuple(w.tolist()), tuple(f.tolist()), episode.hand_side) for w, f in zip(wrist, finger)]


def placeholder_chunk(config: JalaConfig, hand_side) -> TokenChunk:
    t = config.tokenizer
    return TokenChunk((0,) * t.tokens_wrist, (0,) * t.tokens_finger, hand_side)


def build_stream(episode: EpisodeSample, chunks: Sequence[TokenChunk], config: JalaConfig, vocab: Vocab) -> TokenStream:
    """``[instruction][VIS x obs_tokens][LAT x K][chunks...]`` for one episode."""
    visual = [vocab.VIS] * config.world.obs_tokens + [vocab.LAT] * config.tokenizer.tokens_per_chunk
    return format_stream(episode.instruction_ids, visual, chunks, vocab)


@dataclass
class PretrainBatch:
    stream: TokenStream  # batched, shared layout
    masked: torch.Tensor  # (B, L)
    labeled: torch.Tensor  # (B,)
    first_frames: torch.Tensor  # (B, obs_tokens, obs_token_dim)
    starts: torch.Tensor  # (B, N, obs_tokens, obs_token_dim)
    ends: torch.Tensor  # (B, N, obs_tokens, obs_token_dim)
    hand: torch.Tensor  # (B,)
    plans: List[MaskPlan]

    def __len__(self):
        return self.labeled.shape[0]


Item = Tuple[EpisodeSample, Optional[List[TokenChunk]]]


def assemble_pretrain_batch(items: Sequence[Item], config: JalaConfig, vocab: Vocab, rng: Rng) -> PretrainBatch:
    if not items:
        raise EmptyResultError("empty batch")
    t_c = config.tokenizer.chunk_length
    streams, plans, starts, ends = [], [], [], []
    for episode, chunks in items:
        count = n_chunks(episode, t_c)
        if chunks is None:
            chunks = [placeholder_chunk(config, episode.hand_side)] * count
        stream = build_stream(episode, chunks, config, vocab)
        streams.append(stream)
        plans.append(sample_hybrid_mask(stream, rng, labeled=episode.labeled))
        frames = [boundary_frames(episode, i, t_c) for i in range(count)]
        starts.append(torch.stack([a for a, _ in frames]))
        ends.append(torch.stack([b for _, b in frames]))
    episodes = [e for e, _ in items]
    return PretrainBatch(
        stream=collate_streams(streams),
        masked=stack_plans(plans),
        labeled=torch.tensor([e.labeled for e in episodes]),
        first_frames=torch.stack([e.observations[0] for e in episodes]),
        starts=torch.stack(starts),
        ends=torch.stack(ends),
        hand=torch.tensor([int(e.hand_side) for e in episodes]),
        plans=plans,
    )


class PretrainData:
    """Labeled (with cached tokens) and unlabeled episode pools sampled at a fixed ratio."""

    def __init__(self, labeled: Sequence[Item], unlabeled: Sequence[EpisodeSample], labeled_ratio: float):
        if not labeled and not unlabeled:
            raise EmptyResultError("no pretraining episodes")
        self.labeled = list(labeled)
        self.unlabeled = list(unlabeled)
        self.labeled_ratio = labeled_ratio

    @classmethod
    def from_splits(cls, splits: dict, tokenizer, config: JalaConfig) -> "PretrainData":
        t_c = config.tokenizer.chunk_length
        wild = splits["wild_train"]
        wild = wild.subset(round(config.pretrain.wild_fraction * len(wild)))
        labeled, unlabeled = [], []
        for episode in list(splits["lab_train"]) + list(wild):
            if episode.labeled:
                labeled.append((episode, tokenize_episode(episode, tokenizer, t_c)))
            else:
                unlabeled.append(episode)
        logger.info("pretraining pools: %d labeled, %d unlabeled", len(labeled), len(unlabeled))
        return cls(labeled, unlabeled, config.pretrain.labeled_ratio)

    def split_sizes(self, batch_size: int) -> Tuple[int, int]:
        if not self.unlabeled:
            return batch_size, 0
        if not self.labeled:
            return 0, batch_size
        n_labeled = round(batch_size * self.labeled_ratio / (1 + self.labeled_ratio))
        n_labeled = min(max(n_labeled, 1), batch_size - 1) if batch_size > 1 else n_labeled
        return n_labeled, batch_size - n_labeled

    def sample(self, rng: Rng, batch_size: int) -> List[Item]:
        n_labeled, n_unlabeled = self.split_sizes(batch_size)
        items = [self.labeled[int(i)] for i in rng.randint(len(self.labeled), (n_labeled,))] if n_labeled else []
        if n_unlabeled:
            items += [(self.unlabeled[int(i)], None) for i in rng.randint(len(self.unlabeled), (n_unlabeled,))]
        return items


@dataclass
class PostTrainBatch:
    stream: TokenStream
    masked: torch.Tensor
    first_frames: torch.Tensor  # (B, obs_tokens, obs_token_dim), frame at the acted chunk start
    hand: torch.Tensor
    proprio: torch.Tensor  # (B, D_p)
    actions: torch.Tensor  # (B, H, D_a)

    def __len__(self):
        return self.actions.shape[0]


def action_chunk_starts(episode: EpisodeSample, config: JalaConfig) -> List[int]:
    t_c, horizon = config.tokenizer.chunk_length, config.world.action_horizon
    return [c * t_c for c in range(n_chunks(episode, t_c)) if c * t_c + horizon <= len(episode)]


def assemble_posttrain_batch(episodes: Sequence[EpisodeSample], config: JalaConfig, vocab: Vocab,
                             rng: Rng = None, starts: Sequence[int] = None) -> PostTrainBatch:
    """One fully masked chunk per episode, acted on from its first frame."""
    if not episodes:
        raise EmptyResultError("empty batch")
    horizon = config.world.action_horizon
    streams, frames, proprio, actions = [], [], [], []
    for i, episode in enumerate(episodes):
        if episode.split != Split.ROBOT or episode.actions is None:
            raise DataError(f"post-training needs robot episodes, got a {episode.split.value} episode")
        if starts is not None:
            t = starts[i]
        else:
            valid = action_chunk_starts(episode, config)
            if not valid:
                raise DataError("episode too short for one action chunk")
            t = valid[rng.integer(len(valid))]
        streams.append(build_stream(episode, [placeholder_chunk(config, episode.hand_side)], config, vocab))
        frames.append(episode.observations[t])
        proprio.append(episode.proprio[t])
        actions.append(episode.actions[t:t + horizon])
    stream = collate_streams(streams)
    masked = stack_plans([full_chunk_plan(s, 0) for s in streams])
    return PostTrainBatch(stream, masked, torch.stack(frames),
                          torch.tensor([int(e.hand_side) for e in episodes]),
                          torch.stack(proprio), torch.stack(actions))
