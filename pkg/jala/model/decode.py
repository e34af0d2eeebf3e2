"""Iterative masked-chunk decoding with run ensembling.

Each run starts from a fully masked chunk and commits the most confident
still-masked positions, a fixed fraction per pass. Run 1 is greedy; later runs
perturb only the choice of positions to commit, with Gumbel noise on the
confidence. The final id per position is the majority vote over runs, ties
going to the earliest run.
"""

import logging
import math
from typing import Callable, List

import torch

from jala.motion.stream import TokenChunk, TokenStream, Vocab
from jala.motion.pose import HandSide
from jala.numeric.backend import Rng

logger = logging.getLogger(__name__)

LogitsFn = Callable[[torch.Tensor], torch.Tensor]


def _ceil(x: float) -> int:
    return math.ceil(round(x, 9))


def decode_schedule(k: int, step_fraction: float):
    """(number of passes, tokens committed per pass)."""
    return _ceil(1.0 / step_fraction), max(1, _ceil(step_fraction * k))


def part_ranges(k: int, k_wrist: int, vocab: Vocab) -> torch.Tensor:
    """(K, 2) allowed [low, high) vocab range per within-chunk index."""
    ranges = torch.zeros(k, 2, dtype=torch.long)
    for j in range(k):
        base = vocab.wrist_base if j < k_wrist else vocab.finger_base
        ranges[j] = torch.tensor([base, base + vocab.codebook_size])
    return ranges


def _restricted(logits: torch.Tensor, ranges: torch.Tensor) -> torch.Tensor:
    vocab_ids = torch.arange(logits.shape[-1])
    allowed = (vocab_ids[None] >= ranges[:, :1]) & (vocab_ids[None] < ranges[:, 1:])
    return logits.masked_fill(~allowed, float("-inf"))


def decode_run(logits_fn: LogitsFn, stream: TokenStream, positions: torch.Tensor, ranges: torch.Tensor,
               vocab: Vocab, step_fraction: float, rng: Rng = None, noise: float = 0.0) -> torch.Tensor:
    """One iterative run; returns committed vocab ids (K,)."""
    k = positions.numel()
    passes, per_pass = decode_schedule(k, step_fraction)
    ids = stream.ids.clone()
    ids[positions] = vocab.MASK
    committed = torch.zeros(k, dtype=torch.bool)
    out = torch.full((k,), vocab.MASK, dtype=torch.long)
    for step in range(passes):
        remaining = int((~committed).sum())
        if remaining == 0:
            break
        logits = _restricted(logits_fn(ids)[positions], ranges)
        log_probs = torch.log_softmax(logits, -1)
        confidence, best = log_probs.max(-1)
        score = confidence
        if rng is not None and noise > 0:
            u = rng.uniform((k,), 1e-12, 1.0, dtype=score.dtype)
            score = score + noise * -torch.log(-torch.log(u))
        score = score.masked_fill(committed, float("-inf"))
        take = remaining if step == passes - 1 else min(per_pass, remaining)
        # stable sort keeps the lowest position first among equal scores
        chosen = torch.sort(score, descending=True, stable=True).indices[:take]
        out[chosen] = best[chosen]
        committed[chosen] = True
        ids[positions[chosen]] = best[chosen]
    return out


def vote(runs: List[torch.Tensor]) -> torch.Tensor:
    """Per-position majority id; ties go to the id seen in the earliest run."""
    stacked = torch.stack(runs)
    result = stacked[0].clone()
    for j in range(stacked.shape[1]):
        column = stacked[:, j].tolist()
        counts = {}
        for token in column:
            counts[token] = counts.get(token, 0) + 1
        top = max(counts.values())
        result[j] = next(token for token in column if counts[token] == top)
    return result


def decode_chunk_iterative(logits_fn: LogitsFn, stream: TokenStream, chunk_index: int, vocab: Vocab,
                           k_wrist: int, step_fraction: float = 0.05, runs: int = 5, rng: Rng = None,
                           confidence_noise: float = 1.0) -> TokenChunk:
    """Decode one chunk of an unbatched stream.

    ``logits_fn`` maps (L,) input ids to (L, V) logits with the stream's layout.
    """
    positions = stream.motion_positions()[chunk_index]
    ranges = part_ranges(positions.numel(), k_wrist, vocab)
    results = []
    for r in range(runs):
        run_rng = None if r == 0 or rng is None else rng.substream(f"run{r}")
        results.append(decode_run(logits_fn, stream, positions, ranges, vocab, step_fraction,
                                  run_rng, confidence_noise))
    ids = vote(results)
    wrist = tuple(int(i) - vocab.wrist_base for i in ids[:k_wrist])
    finger = tuple(int(i) - vocab.finger_base for i in ids[k_wrist:])
    hand = HandSide(int(stream.hand_side[positions[0]]))
    return TokenChunk(wrist, finger, hand)


def backbone_logits_fn(backbone, stream: TokenStream, visual=None, latents=None) -> LogitsFn:
    """Adapter from an unbatched stream plus conditioning to a ``logits_fn``."""
    batched = stream.as_batch()

    @torch.no_grad()
    def logits_fn(ids: torch.Tensor) -> torch.Tensor:
        return backbone(batched, visual=visual, latents=latents, input_ids=ids[None]).logits[0]

    return logits_fn
