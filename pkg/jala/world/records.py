"""Episode record stream and its JSON sidecar manifest.

Record stream layout (little-endian)::

    magic     8 bytes  b"JALA-EPS"
    version   uint32
    count     uint64
    then per episode:
      meta_len  uint32
      meta      UTF-8 JSON, keys sorted: {"instruction_ids", "labeled", "split",
                "hand_side", "seed", "arrays": [[name, shape], ...]}
      arrays    float64 values, C order, in the order listed in "arrays"

The manifest (``<name>.json``) lists counts, seed ranges, labeled counts and the
config hash.
"""

import json
import struct
from pathlib import Path
from typing import Iterable, List

import numpy as np
import torch

from jala.errors import DataError
from jala.motion.pose import HandSide
from jala.world.synthetic import EpisodeSample, Split

MAGIC = b"JALA-EPS"
FORMAT_VERSION = 1
ARRAY_FIELDS = ("observations", "poses", "proprio", "actions")


def _pack(episode: EpisodeSample) -> bytes:
    arrays = [(name, getattr(episode, name)) for name in ARRAY_FIELDS if getattr(episode, name) is not None]
    meta = {
        "instruction_ids": [int(i) for i in episode.instruction_ids],
        "labeled": bool(episode.labeled),
        "split": episode.split.value,
        "hand_side": int(episode.hand_side),
        "seed": int(episode.seed),
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(a.detach().cpu().numpy().astype("<f8").tobytes() for _, a in arrays)
    return struct.pack("<I", len(blob)) + blob + body


def write_records(episodes: Iterable[EpisodeSample], path) -> int:
    episodes = list(episodes)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(episodes)))
        for episode in episodes:
            f.write(_pack(episode))
    return len(episodes)


def read_records(path, dtype=None) -> List[EpisodeSample]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise DataError(f"{path} is not an episode record stream")
    version, count = struct.unpack_from("<IQ", data, 8)
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported record version {version} in {path}")
    dtype = dtype or torch.get_default_dtype()
    offset = 8 + struct.calcsize("<IQ")
    episodes = []
    for _ in range(count):
        (meta_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        meta = json.loads(data[offset:offset + meta_len])
        offset += meta_len
        arrays = {}
        for name, shape in meta["arrays"]:
            n = int(np.prod(shape)) if shape else 1
            values = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape)
            arrays[name] = torch.from_numpy(values.copy()).to(dtype)
            offset += n * 8
        episodes.append(EpisodeSample(
            instruction_ids=meta["instruction_ids"],
            labeled=meta["labeled"],
            split=Split(meta["split"]),
            hand_side=HandSide(meta["hand_side"]),
            seed=meta["seed"],
            observations=arrays["observations"],
            poses=arrays.get("poses"),
            proprio=arrays.get("proprio"),
            actions=arrays.get("actions"),
        ))
    if offset != len(data):
        raise DataError(f"{len(data) - offset} trailing bytes in {path}")
    return episodes


def write_manifest(path, splits: dict, config_hash: str, files: dict = None):
    """Sidecar manifest for a set of written splits (``EpisodeSet`` handles)."""
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "splits": {
            name: {
                "count": len(s),
                "labeled": s.labeled_count,
                "seed_start": s.seeds[0] if s.seeds else None,
                "seed_stop": s.seeds[-1] + 1 if s.seeds else None,
                "split": s.split.value,
                "file": (files or {}).get(name),
            }
            for name, s in splits.items()
        },
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
