"""Token vocabulary and the interleaved instruction/visual/motion token stream.

Vocabulary layout::

    0 [MASK]   1 <mot>   2 </mot>   3 [VIS]   4 [LAT]
    5 .. 5+I-1                    instruction ids
    wrist_base .. +C-1            wrist codes
    finger_base .. +C-1           finger codes

``[VIS]`` positions carry projected observation features and ``[LAT]``
positions carry latent-state vectors; both are tagged as visual context.
"""

from dataclasses import dataclass, field
from enum import IntEnum
from typing import List, Optional, Sequence, Tuple

import torch

from jala.errors import DataError, ShapeError
from jala.motion.pose import HandSide

NONE = -1


class Modality(IntEnum):
    INSTRUCTION = 0
    VISUAL = 1
    MOTION = 2
    DELIMITER = 3
    MASK = 4


@dataclass(frozen=True)
class Vocab:
    n_instruction: int
    codebook_size: int
    MASK: int = 0
    MOT_OPEN: int = 1
    MOT_CLOSE: int = 2
    VIS: int = 3
    LAT: int = 4

    @property
    def instruction_base(self) -> int:
        return 5

    @property
    def wrist_base(self) -> int:
        return self.instruction_base + self.n_instruction

    @property
    def finger_base(self) -> int:
        return self.wrist_base + self.codebook_size

    @property
    def size(self) -> int:
        return self.finger_base + self.codebook_size


@dataclass(frozen=True)
class TokenChunk:
    wrist_ids: Tuple[int, ...]
    finger_ids: Tuple[int, ...]
    hand_side: HandSide = HandSide.RIGHT

    def validate(self, codebook_size: int, k_wrist: int = None, k_finger: int = None):
        if k_wrist is not None and len(self.wrist_ids) != k_wrist:
            raise ShapeError(f"expected {k_wrist} wrist ids, got {len(self.wrist_ids)}")
        if k_finger is not None and len(self.finger_ids) != k_finger:
            raise ShapeError(f"expected {k_finger} finger ids, got {len(self.finger_ids)}")
        for i in (*self.wrist_ids, *self.finger_ids):
            if not 0 <= i < codebook_size:
                raise ValueError(f"motion id {i} outside [0, {codebook_size})")

    @property
    def ids(self) -> Tuple[int, ...]:
        return self.wrist_ids + self.finger_ids


@dataclass
class TokenStream:
    """Token ids plus per-position tags. Tensors may carry a leading batch dim."""

    ids: torch.Tensor
    modality: torch.Tensor
    chunk_index: torch.Tensor
    within_index: torch.Tensor
    hand_side: torch.Tensor
    n_chunks: int = 0
    tokens_per_chunk: int = 0

    def __len__(self):
        return self.ids.shape[-1]

    @property
    def batched(self) -> bool:
        return self.ids.dim() == 2

    def as_batch(self) -> "TokenStream":
        """Batch of one; batched streams are returned as is."""
        if self.batched:
            return self
        return TokenStream(self.ids[None], self.modality[None], self.chunk_index[None], self.within_index[None],
                           self.hand_side[None], self.n_chunks, self.tokens_per_chunk)

    def motion_positions(self) -> torch.Tensor:
        """Positions of motion tokens in (chunk, within) order; uses the first row of a batch."""
        chunk = self.chunk_index[0] if self.batched else self.chunk_index
        within = self.within_index[0] if self.batched else self.within_index
        modality = self.modality[0] if self.batched else self.modality
        pos = torch.full((self.n_chunks, self.tokens_per_chunk), NONE, dtype=torch.long)
        is_motion = modality == Modality.MOTION
        for p in torch.nonzero(is_motion).reshape(-1).tolist():
            pos[int(chunk[p]), int(within[p])] = p
        return pos

    def chunk_hands(self) -> List[int]:
        hands = self.hand_side[0] if self.batched else self.hand_side
        positions = self.motion_positions()
        return [int(hands[positions[i, 0]]) for i in range(self.n_chunks)]


@dataclass(frozen=True)
class ChunkSpan:
    chunk_index: int
    start: int  # position of <mot>
    end: int  # position of </mot>
    hand_side: HandSide


def format_stream(instruction_ids: Sequence[int], visual_ids: Sequence[int], chunks: Sequence[TokenChunk],
                  vocab: Vocab, bimanual: bool = False) -> TokenStream:
    """Lay out ``[instruction][visual][<mot> wrist finger </mot>]...``.

    Bimanual streams interleave the left and right chunk of each time step.
    Instruction ids are local (0-based) and shifted into the vocabulary here.
    """
    if bimanual:
        left = [c for c in chunks if c.hand_side == HandSide.LEFT]
        right = [c for c in chunks if c.hand_side == HandSide.RIGHT]
        if len(left) != len(right):
            raise DataError(f"bimanual stream needs equal left/right chunk counts, got {len(left)}/{len(right)}")
        ordered = [c for pair in zip(left, right) for c in pair]
    else:
        ordered = list(chunks)
    k = len(ordered[0].ids) if ordered else 0
    ids, modality, chunk_index, within, hands = [], [], [], [], []

    def push(token, mod, ci=NONE, wi=NONE, hand=NONE):
        ids.append(token)
        modality.append(int(mod))
        chunk_index.append(ci)
        within.append(wi)
        hands.append(hand)

    for tok in instruction_ids:
        if not 0 <= tok < vocab.n_instruction:
            raise ValueError(f"instruction id {tok} outside [0, {vocab.n_instruction})")
        push(vocab.instruction_base + tok, Modality.INSTRUCTION)
    for tok in visual_ids:
        push(tok, Modality.VISUAL)
    for i, chunk in enumerate(ordered):
        if len(chunk.ids) != k:
            raise ShapeError("all chunks in a stream must have the same token count")
        chunk.validate(vocab.codebook_size)
        hand = int(chunk.hand_side)
        push(vocab.MOT_OPEN, Modality.DELIMITER, i, NONE, hand)
        for j, tok in enumerate(chunk.wrist_ids):
            push(vocab.wrist_base + tok, Modality.MOTION, i, j, hand)
        for j, tok in enumerate(chunk.finger_ids):
            push(vocab.finger_base + tok, Modality.MOTION, i, len(chunk.wrist_ids) + j, hand)
        push(vocab.MOT_CLOSE, Modality.DELIMITER, i, NONE, hand)

    as_long = lambda xs: torch.tensor(xs, dtype=torch.long)
    return TokenStream(as_long(ids), as_long(modality), as_long(chunk_index), as_long(within), as_long(hands),
                       n_chunks=len(ordered), tokens_per_chunk=k)


def parse_stream(stream: TokenStream, vocab: Vocab) -> List[ChunkSpan]:
    """Recover chunk boundaries from delimiter ids and tags."""
    ids = stream.ids.tolist()
    spans, open_at = [], None
    for p, tok in enumerate(ids):
        if tok == vocab.MOT_OPEN:
            if open_at is not None:
                raise DataError(f"nested <mot> at position {p}")
            open_at = p
        elif tok == vocab.MOT_CLOSE:
            if open_at is None:
                raise DataError(f"unmatched </mot> at position {p}")
            spans.append(ChunkSpan(int(stream.chunk_index[p]), open_at, p, HandSide(int(stream.hand_side[p]))))
            open_at = None
    if open_at is not None:
        raise DataError("unterminated motion chunk")
    return spans


def chunk_ids_from_stream(stream: TokenStream, chunk_index: int, vocab: Vocab, k_wrist: int) -> TokenChunk:
    positions = stream.motion_positions()[chunk_index]
    ids = stream.ids[positions].tolist()
    wrist = tuple(i - vocab.wrist_base for i in ids[:k_wrist])
    finger = tuple(i - vocab.finger_base for i in ids[k_wrist:])
    return TokenChunk(wrist, finger, HandSide(int(stream.hand_side[positions[0]])))


def collate_streams(streams: Sequence[TokenStream]) -> TokenStream:
    """Stack streams with identical layout into one batched stream."""
    if not streams:
        raise DataError("cannot collate an empty list of streams")
    first = streams[0]
    for s in streams[1:]:
        if len(s) != len(first) or not torch.equal(s.modality, first.modality) \
                or not torch.equal(s.chunk_index, first.chunk_index):
            raise DataError("streams in a batch must share one layout")
    stack = lambda name: torch.stack([getattr(s, name) for s in streams])
    return TokenStream(stack("ids"), stack("modality"), stack("chunk_index"), stack("within_index"),
                       stack("hand_side"), first.n_chunks, first.tokens_per_chunk)
