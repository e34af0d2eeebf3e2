"""End-to-end motion generation evaluation over a split.

For every labeled episode the chosen chunk is fully masked after the
instruction, the frame at the chunk start and any earlier ground-truth chunks;
a decoder fills it in, the tokenizer decodes it to poses and the four motion
metrics compare against the ground-truth poses.
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict

import torch

from jala.errors import EmptyResultError
from jala.evaluation.metrics import all_metrics
from jala.model.decode import backbone_logits_fn, decode_chunk_iterative
from jala.motion.pose import chunk_sequence
from jala.motion.stream import TokenChunk, TokenStream
from jala.numeric.backend import Rng
from jala.train.batches import build_stream, make_vocab, placeholder_chunk, tokenize_episode
from jala.world.synthetic import EpisodeSample, n_chunks

logger = logging.getLogger(__name__)

METRICS = ("mpjpe", "pa_mpjpe", "mwte", "mde")

# (episode, stream, chunk_index) -> decoded chunk
Decoder = Callable[[EpisodeSample, TokenStream, int], TokenChunk]


@dataclass
class MetricReport:
    split: str
    means: Dict[str, float] = field(default_factory=dict)
    count: int = 0
    skipped: int = 0
    config_hash: str = ""
    checkpoint_id: str = ""

    def rows(self):
        return [{"split": self.split, "metric": m, "mean": self.means[m], "count": self.count} for m in METRICS]

    def write(self, out_dir, stem: str):
        """Write ``<stem>.csv`` (one row per metric) and ``<stem>.json``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / f"{stem}.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["split", "metric", "mean", "count"], lineterminator="\n")
            writer.writeheader()
            for row in self.rows():
                writer.writerow({**row, "mean": f"{row['mean']:.10g}"})
        (out_dir / f"{stem}.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return out_dir / f"{stem}.csv"


def model_decoder(state, config, rng: Rng) -> Decoder:
    """Iterative decoder over a trained backbone and its LSP."""
    ev = config.eval
    t_c = config.tokenizer.chunk_length

    def decode(episode: EpisodeSample, stream: TokenStream, chunk_index: int) -> TokenChunk:
        frame = episode.observations[chunk_index * t_c][None]
        hand = torch.tensor([int(episode.hand_side)])
        with torch.no_grad():
            latents = state.perceivers.lsp(frame, frame, hand)
        logits_fn = backbone_logits_fn(state.backbone, stream, visual=frame, latents=latents)
        return decode_chunk_iterative(logits_fn, stream, chunk_index, state.vocab, config.tokenizer.tokens_wrist,
                                      ev.step_fraction, ev.runs, rng.substream(f"episode/{episode.seed}"),
                                      ev.confidence_noise)

    return decode


def oracle_decoder(tokenizer, config) -> Decoder:
    """Decoder that returns the tokenized ground truth; its report is the tokenizer floor."""
    t_c = config.tokenizer.chunk_length

    def decode(episode: EpisodeSample, stream: TokenStream, chunk_index: int) -> TokenChunk:
        return tokenize_episode(episode, tokenizer, t_c)[chunk_index]

    return decode


def eval_motion_generation(split, tokenizer, config, decoder: Decoder, split_name: str = "",
                           config_hash: str = "", checkpoint_id: str = "") -> MetricReport:
    episodes = list(split)
    if config.eval.max_episodes is not None:
        episodes = episodes[:config.eval.max_episodes]
    if not episodes:
        raise EmptyResultError(f"split {split_name or '?'} is empty")
    t_c = config.tokenizer.chunk_length
    c = config.eval.chunk_index
    vocab = make_vocab(config)
    predicted, truth, skipped = [], [], 0
    for episode in episodes:
        if not episode.labeled:
            skipped += 1
            continue
        if c >= n_chunks(episode, t_c):
            raise EmptyResultError(f"episode {episode.seed} has no chunk {c}")
        context = tokenize_episode(episode, tokenizer, t_c)[:c] if c else []
        stream = build_stream(episode, context + [placeholder_chunk(config, episode.hand_side)], config, vocab)
        tokens = decoder(episode, stream, c)
        predicted.append(tokenizer.detokenize_chunk(tokens).poses)
        truth.append(chunk_sequence(episode.poses, t_c, episode.hand_side)[c].poses)
    if skipped:
        logger.warning("skipped %d unlabeled episodes in %s", skipped, split_name or "split")
    if not predicted:
        raise EmptyResultError(f"split {split_name or '?'} has no labeled episodes")
    pred, gt = torch.stack(predicted), torch.stack(truth).to(predicted[0].dtype)
    means = all_metrics(pred, gt, mde_mode=config.eval.mde_mode, pa_scale=config.eval.pa_scale)
    return MetricReport(split_name, means, len(predicted), skipped, config_hash, checkpoint_id)
