"""Motion tokenizer: per-part temporal codecs over GRVQ codebooks.

Wrist features (translation + rotation, 6 per frame) and finger joints are
encoded independently. Each part maps T_c frames to S latent slots; every
slot is quantized into G x R codes, giving S * G * R tokens per part in
(slot, group, level) order. The encoders are hand-agnostic.

Checkpoint container (see ``jala.io.container``): magic ``JALA-TOK``,
version 1, meta = {"config", "finger_dims", "config_hash", "trained"},
tensors = the module state dict.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from jala.config import TokenizerConfig
from jala.errors import DataError, NotTrainedError, ShapeError
from jala.io.container import read_container, write_container
from jala.motion.grvq import GroupedResidualVQ, dequantize, grvq_quantize_batch
from jala.motion.pose import HandSide, MotionChunk
from jala.motion.stream import TokenChunk
from jala.numeric.backend import Rng

logger = logging.getLogger(__name__)

MAGIC = b"JALA-TOK"
FORMAT_VERSION = 1
STD_FLOOR = 1e-6


class PartCodec(nn.Module):
    """Two temporal conv blocks plus a learned time mixing between frames and slots."""

    def __init__(self, features: int, frames: int, slots: int, hidden: int, code_dim: int):
        super().__init__()
        self.enc_in = nn.Conv1d(features, hidden, 3, padding=1)
        self.enc_mid = nn.Conv1d(hidden, hidden, 3, padding=1)
        self.enc_time = nn.Linear(frames, slots)
        self.enc_out = nn.Linear(hidden, code_dim)
        self.dec_in = nn.Linear(code_dim, hidden)
        self.dec_time = nn.Linear(slots, frames)
        self.dec_mid = nn.Conv1d(hidden, hidden, 3, padding=1)
        self.dec_out = nn.Conv1d(hidden, features, 1)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        # (B, T, F) -> (B, S, D)
        h = F.gelu(self.enc_in(x.transpose(1, 2)))
        h = h + F.gelu(self.enc_mid(h))
        h = self.enc_time(h)
        return self.enc_out(h.transpose(1, 2))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        # (B, S, D) -> (B, T, F)
        h = self.dec_in(z).transpose(1, 2)
        h = F.gelu(self.dec_time(h))
        h = h + F.gelu(self.dec_mid(h))
        return self.dec_out(h).transpose(1, 2)


class MotionTokenizer(nn.Module):
    def __init__(self, config: TokenizerConfig, finger_dims: int):
        super().__init__()
        self.config = config
        self.finger_dims = finger_dims
        c = config
        self.wrist = PartCodec(6, c.chunk_length, c.slots_wrist, c.hidden, c.code_dim)
        self.finger = PartCodec(finger_dims, c.chunk_length, c.slots_finger, c.hidden, c.code_dim)
        vq = lambda part: GroupedResidualVQ(part, c.groups, c.levels, c.codebook_size, c.code_dim,
                                            decay=c.ema_decay, dead_code_epochs=c.dead_code_epochs)
        self.wrist_vq = vq("wrist")
        self.finger_vq = vq("finger")
        self.register_buffer("mean", torch.zeros(6 + finger_dims))
        self.register_buffer("std", torch.ones(6 + finger_dims))
        self.register_buffer("trained", torch.zeros((), dtype=torch.bool))

    @property
    def k_wrist(self) -> int:
        return self.config.tokens_wrist

    @property
    def k_finger(self) -> int:
        return self.config.tokens_finger

    def _normalize(self, poses):
        return (poses - self.mean) / self.std

    def _denormalize(self, x):
        return x * self.std + self.mean

    def _split(self, x):
        return x[..., :6], x[..., 6:]

    def _check_trained(self):
        if not bool(self.trained):
            raise NotTrainedError("tokenizer has not been trained")

    def _flat_ids(self, indices: torch.Tensor, batch: int) -> torch.Tensor:
        # (B * S, G, R) -> (B, S * G * R)
        return indices.reshape(batch, -1)

    def _slot_indices(self, ids: torch.Tensor, slots: int) -> torch.Tensor:
        return ids.reshape(ids.shape[0], slots, self.config.groups, self.config.levels)

    def reconstruct(self, poses: torch.Tensor, rng: Rng = None):
        """Training forward pass: returns (reconstruction in pose units, commitment loss)."""
        x = self._normalize(poses)
        wrist, finger = self._split(x)
        parts = []
        commitment = 0.0
        for codec, vq, feats in ((self.wrist, self.wrist_vq, wrist), (self.finger, self.finger_vq, finger)):
            z = codec.encode(feats)
            b, s, d = z.shape
            q, _, commit = vq(z.reshape(b * s, d), rng)
            parts.append(codec.decode(q.reshape(b, s, d)))
            commitment = commitment + commit
        return self._denormalize(torch.cat(parts, -1)), commitment

    @torch.no_grad()
    def tokenize_batch(self, poses: torch.Tensor):
        """(B, T_c, P) poses -> (wrist ids (B, K_w), finger ids (B, K_f))."""
        self._check_trained()
        if poses.dim() != 3 or poses.shape[1:] != (self.config.chunk_length, 6 + self.finger_dims):
            raise ShapeError(f"expected (B, {self.config.chunk_length}, {6 + self.finger_dims}) poses, "
                             f"got {tuple(poses.shape)}")
        x = self._normalize(poses.to(self.mean.dtype))
        wrist, finger = self._split(x)
        out = []
        for codec, vq, feats in ((self.wrist, self.wrist_vq, wrist), (self.finger, self.finger_vq, finger)):
            z = codec.encode(feats)
            b, s, d = z.shape
            indices, _, _ = grvq_quantize_batch(z.reshape(b * s, d), vq.codewords)
            out.append(self._flat_ids(indices, b))
        return out[0], out[1]

    @torch.no_grad()
    def detokenize_batch(self, wrist_ids: torch.Tensor, finger_ids: torch.Tensor) -> torch.Tensor:
        self._check_trained()
        c = self.config
        for ids, k in ((wrist_ids, self.k_wrist), (finger_ids, self.k_finger)):
            if ids.dim() != 2 or ids.shape[1] != k:
                raise ShapeError(f"expected (B, {k}) ids, got {tuple(ids.shape)}")
            if ids.min() < 0 or ids.max() >= c.codebook_size:
                raise ValueError(f"motion id out of range [0, {c.codebook_size})")
        parts = []
        for codec, vq, ids, slots in ((self.wrist, self.wrist_vq, wrist_ids, c.slots_wrist),
                                      (self.finger, self.finger_vq, finger_ids, c.slots_finger)):
            z = dequantize(self._slot_indices(ids, slots), vq.codewords)
            parts.append(codec.decode(z))
        return self._denormalize(torch.cat(parts, -1))

    def tokenize_chunk(self, chunk: MotionChunk) -> TokenChunk:
        wrist, finger = self.tokenize_batch(chunk.poses[None])
        return TokenChunk(tuple(wrist[0].tolist()), tuple(finger[0].tolist()), chunk.hand_side)

    def detokenize_chunk(self, tokens: TokenChunk) -> MotionChunk:
        tokens.validate(self.config.codebook_size, self.k_wrist, self.k_finger)
        poses = self.detokenize_batch(torch.tensor([tokens.wrist_ids]), torch.tensor([tokens.finger_ids]))
        return MotionChunk(poses[0], tokens.hand_side)


@dataclass
class TokenizerReport:
    val_mse: List[float] = field(default_factory=list)
    val_mpjpe: float = float("nan")
    utilization: Dict[str, List] = field(default_factory=dict)
    assignments: Dict[str, int] = field(default_factory=dict)


def _as_batch(chunks) -> torch.Tensor:
    if isinstance(chunks, torch.Tensor):
        return chunks
    return torch.stack([c.poses for c in chunks])


def train_tokenizer(chunks, config: TokenizerConfig, finger_dims: int, rng: Rng):
    """Fit encoders, decoders and EMA codebooks on a chunk corpus."""
    from jala.evaluation.metrics import mpjpe

    data = _as_batch(chunks).to(torch.get_default_dtype())
    if data.shape[0] < config.min_chunks:
        raise DataError(f"tokenizer training needs at least {config.min_chunks} chunks, got {data.shape[0]}")
    order = rng.substream("split").permutation(data.shape[0])
    n_val = max(1, int(data.shape[0] * config.val_fraction))
    val, train = data[order[:n_val]], data[order[n_val:]]

    tok = MotionTokenizer(config, finger_dims)
    tok.mean.copy_(train.reshape(-1, train.shape[-1]).mean(0))
    tok.std.copy_(train.reshape(-1, train.shape[-1]).std(0, unbiased=False).clamp_min(STD_FLOOR))
    optimizer = torch.optim.Adam(tok.parameters(), lr=config.lr)
    batch_rng, vq_rng = rng.substream("batches"), rng.substream("codes")
    report = TokenizerReport()

    for epoch in range(config.epochs):
        tok.train()
        perm = batch_rng.permutation(train.shape[0])
        for start in range(0, train.shape[0], config.batch_size):
            batch = train[perm[start:start + config.batch_size]]
            recon, commitment = tok.reconstruct(batch, vq_rng)
            loss = F.mse_loss(tok._normalize(recon), tok._normalize(batch)) + config.commitment * commitment
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        usage = {part: vq.end_epoch(vq_rng)["counts"] for part, vq in (("wrist", tok.wrist_vq), ("finger", tok.finger_vq))}
        tok.eval()
        tok.trained.fill_(True)
        with torch.no_grad():
            w, f = tok.tokenize_batch(val)
            recon = tok.detokenize_batch(w, f)
            val_mse = float(F.mse_loss(tok._normalize(recon), tok._normalize(val)))
        report.val_mse.append(val_mse)
        report.utilization = usage
        logger.info("tokenizer epoch %d/%d val_mse %.5f", epoch + 1, config.epochs, val_mse)

    with torch.no_grad():
        w, f = tok.tokenize_batch(val)
        recon = tok.detokenize_batch(w, f)
    report.val_mpjpe = float(mpjpe(recon, val))
    # every level of every group sees each quantized vector once
    report.assignments = {part: int(sum(counts[0][0])) for part, counts in report.utilization.items()}
    if report.val_mpjpe > config.mpjpe_threshold:
        logger.warning("tokenizer validation MPJPE %.4f above threshold %.4f", report.val_mpjpe, config.mpjpe_threshold)
    return tok, report


def tokenize_chunk(chunk: MotionChunk, tokenizer: MotionTokenizer) -> TokenChunk:
    return tokenizer.tokenize_chunk(chunk)


def detokenize_chunk(tokens: TokenChunk, tokenizer: MotionTokenizer) -> MotionChunk:
    return tokenizer.detokenize_chunk(tokens)


def save_tokenizer(tokenizer: MotionTokenizer, path, config_hash: str = ""):
    meta = {
        "config": tokenizer.config.model_dump(mode="json"),
        "finger_dims": tokenizer.finger_dims,
        "config_hash": config_hash,
        "trained": bool(tokenizer.trained),
    }
    write_container(path, MAGIC, FORMAT_VERSION, meta, dict(tokenizer.state_dict()))


def load_tokenizer(path) -> MotionTokenizer:
    _, meta, tensors = read_container(path, MAGIC, (FORMAT_VERSION,))
    config = TokenizerConfig.model_validate(meta["config"])
    dtype = tensors["mean"].dtype
    tok = MotionTokenizer(config, meta["finger_dims"]).to(dtype)
    tok.load_state_dict(tensors)
    tok.eval()
    return tok
