"""Versioned binary container for tensors plus JSON metadata.

Layout (little-endian):

    magic        8 bytes   e.g. b"JALA-TOK", b"JALA-CKP"
    version      uint32
    header_len   uint64
    header       header_len bytes of UTF-8 JSON, keys sorted:
                 {"meta": {...}, "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload      raw tensor bytes, concatenated in header order (sorted by name)

Identical inputs produce identical bytes.
"""

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import torch

from jala.errors import CheckpointError

_DTYPES = {
    "float32": (torch.float32, np.float32),
    "float64": (torch.float64, np.float64),
    "int64": (torch.int64, np.int64),
    "uint8": (torch.uint8, np.uint8),
    "bool": (torch.bool, np.bool_),
}
_NAMES = {torch_dtype: name for name, (torch_dtype, _) in _DTYPES.items()}


def write_container(path, magic: bytes, version: int, meta: dict, tensors: Dict[str, torch.Tensor]):
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _NAMES:
            raise CheckpointError(f"unsupported tensor dtype {t.dtype} for {name}")
        raw = t.numpy().tobytes()
        entries.append({"name": name, "dtype": _NAMES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<IQ", version, len(header)))
        f.write(header)
        for raw in chunks:
            f.write(raw)


def read_container(path, magic: bytes, versions=(1,)) -> Tuple[int, dict, Dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"file not found: {path}")
    data = path.read_bytes()
    if data[:8] != magic:
        raise CheckpointError(f"bad magic in {path}: expected {magic!r}")
    try:
        version, header_len = struct.unpack_from("<IQ", data, 8)
    except struct.error as e:
        raise CheckpointError(f"truncated header in {path}") from e
    if version not in versions:
        raise CheckpointError(f"unsupported format version {version} in {path}")
    start = 8 + struct.calcsize("<IQ")
    try:
        header = json.loads(data[start:start + header_len])
    except ValueError as e:
        raise CheckpointError(f"corrupt header in {path}") from e
    payload = start + header_len
    tensors = {}
    for entry in header["tensors"]:
        torch_dtype, np_dtype = _DTYPES[entry["dtype"]]
        lo = payload + entry["offset"]
        raw = data[lo:lo + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"truncated tensor {entry['name']} in {path}")
        array = np.frombuffer(raw, dtype=np_dtype).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(array).to(torch_dtype)
    return version, header["meta"], tensors


def pack_state(obj, prefix: str, tensors: dict):
    """Split a nested state object into a JSON tree plus a flat tensor table."""
    if isinstance(obj, torch.Tensor):
        tensors[prefix] = obj
        return {"__tensor__": prefix}
    if isinstance(obj, dict):
        return {"__map__": [[k, pack_state(v, f"{prefix}/{k}", tensors)] for k, v in obj.items()]}
    if isinstance(obj, (list, tuple)):
        return {"__list__": [pack_state(v, f"{prefix}/{i}", tensors) for i, v in enumerate(obj)],
                "tuple": isinstance(obj, tuple)}
    return obj


def unpack_state(tree, tensors: dict):
    if isinstance(tree, dict):
        if "__tensor__" in tree:
            return tensors[tree["__tensor__"]]
        if "__map__" in tree:
            return {k: unpack_state(v, tensors) for k, v in tree["__map__"]}
        if "__list__" in tree:
            items = [unpack_state(v, tensors) for v in tree["__list__"]]
            return tuple(items) if tree["tuple"] else items
        return {k: unpack_state(v, tensors) for k, v in tree.items()}
    return tree
