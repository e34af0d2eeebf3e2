"""Joint 2-D linear projection of predictive embeddings and latent actions."""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import torch

from jala.errors import DataError

logger = logging.getLogger(__name__)

MIN_SAMPLES = 10


@dataclass
class Projection:
    coords: torch.Tensor  # (n_h + n_z, components)
    sources: List[str]
    splits: List[str]
    explained_variance: List[float]  # fraction per component
    rank_deficient: bool
    mean_l1: float  # mean |h - z| over paired samples, nan when unpaired

    def __len__(self):
        return self.coords.shape[0]


def project_embeddings(h: torch.Tensor, z: torch.Tensor, splits: Sequence[str] = None,
                       components: int = 2) -> Projection:
    """PCA of the pooled {h} u {z}; rows of h come first, then rows of z.

    ``splits`` labels each pooled row (defaults to "lab").
    """
    h, z = h.reshape(h.shape[0], -1), z.reshape(z.shape[0], -1)
    if h.shape[0] < MIN_SAMPLES or z.shape[0] < MIN_SAMPLES:
        raise DataError(f"projection needs at least {MIN_SAMPLES} samples of each source")
    if h.shape[1] != z.shape[1]:
        raise DataError(f"h and z dimensions differ: {h.shape[1]} vs {z.shape[1]}")
    pooled = torch.cat([h, z]).detach()
    centered = pooled - pooled.mean(0)
    _, s, vt = torch.linalg.svd(centered, full_matrices=False)
    variance = s ** 2
    tol = variance.max().clamp_min(1e-30) * 1e-12
    rank = int((variance > tol).sum())
    k = min(components, rank)
    if k < components:
        logger.warning("pooled covariance has rank %d; projecting onto %d components", rank, k)
    # fix the sign of each axis so the projection is deterministic
    axes = vt[:k]
    signs = torch.sign(axes[torch.arange(k), axes.abs().argmax(-1)])
    axes = axes * signs[:, None]
    coords = centered @ axes.T
    total = float(variance.sum()) or 1.0
    splits = list(splits) if splits is not None else ["lab"] * pooled.shape[0]
    if len(splits) != pooled.shape[0]:
        raise DataError(f"{len(splits)} split labels for {pooled.shape[0]} rows")
    mean_l1 = float((h - z).abs().mean()) if h.shape == z.shape else float("nan")
    return Projection(coords, ["h"] * h.shape[0] + ["z"] * z.shape[0], splits,
                      [float(v) / total for v in variance[:k]], k < components, mean_l1)


def write_projection_csv(projection: Projection, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["x", "y", "source", "split"])
        for row, source, split in zip(projection.coords.tolist(), projection.sources, projection.splits):
            x = row[0] if len(row) > 0 else 0.0
            y = row[1] if len(row) > 1 else 0.0
            writer.writerow([f"{x:.10g}", f"{y:.10g}", source, split])
    return path


@torch.no_grad()
def collect_embeddings(state, episodes, config, split_name: str, chunk_index: int = 0):
    """Per-token h at ``chunk_index`` (whole motion fully masked) and the matching LAP latents."""
    from jala.motion.stream import Modality
    from jala.train.batches import build_stream, make_vocab, placeholder_chunk
    from jala.world.synthetic import boundary_frames, n_chunks

    vocab = make_vocab(config)
    t_c = config.tokenizer.chunk_length
    hs, zs = [], []
    for episode in episodes:
        count = n_chunks(episode, t_c)
        stream = build_stream(episode, [placeholder_chunk(config, episode.hand_side)] * count, config, vocab)
        batched = stream.as_batch()
        frame = episode.observations[0][None]
        hand = torch.tensor([int(episode.hand_side)])
        latents = state.perceivers.lsp(frame, frame, hand)
        motion = stream.modality == Modality.MOTION
        ids = torch.where(motion, torch.full_like(stream.ids, vocab.MASK), stream.ids)[None]
        out = state.backbone(batched, input_ids=ids, visual=frame, latents=latents)
        start, end = boundary_frames(episode, chunk_index, t_c)
        z = state.perceivers.lap(start[None], end[None], hand)
        hs.append(out.h[0, chunk_index])
        zs.append(z[0])
    h, z = torch.cat(hs), torch.cat(zs)
    return h, z, [split_name] * h.shape[0]
