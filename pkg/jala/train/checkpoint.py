"""Training checkpoints in the ``JALA-CKP`` container.

meta = {"phase", "step", "config", "config_hash", "tokenizer_hash", "state"}
where "state" is the JSON skeleton of {"models", "optimizer", "rng"} and the
tensors hold every parameter, buffer, optimizer moment and generator state.
Loading refuses unknown versions and configs whose hash does not match.
"""

import hashlib
import json
import logging
from pathlib import Path

from jala.config import JalaConfig, config_hash, validate_config
from jala.errors import CheckpointError
from jala.io.container import pack_state, read_container, unpack_state, write_container

logger = logging.getLogger(__name__)

MAGIC = b"JALA-CKP"
FORMAT_VERSION = 1
# sections that fix model shapes; posttrain may start from a checkpoint that agrees on these
MODEL_SECTIONS = ("world", "tokenizer", "backbone", "perceiver")


def model_hash(config: JalaConfig) -> str:
    data = config.model_dump(mode="json")
    blob = json.dumps({k: data[k] for k in MODEL_SECTIONS}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(state, path):
    tensors = {}
    tree = {
        "models": pack_state({name: m.state_dict() for name, m in state.modules().items()}, "models", tensors),
        "optimizer": pack_state(state.optimizer.state_dict(), "optimizer", tensors),
        "rng": pack_state(state.rng.state_dict(), "rng", tensors),
    }
    meta = {
        "phase": state.phase,
        "step": state.step,
        "config": state.config.model_dump(mode="json"),
        "config_hash": state.config_hash,
        "model_hash": model_hash(state.config),
        "tokenizer_hash": state.tokenizer_hash,
        "state": tree,
    }
    write_container(path, MAGIC, FORMAT_VERSION, meta, tensors)
    logger.debug("saved %s checkpoint at step %d to %s", state.phase, state.step, path)


def read_checkpoint(path, config: JalaConfig = None):
    """Validated (meta, unpacked state); ``config`` must hash to the stored value when given."""
    _, meta, tensors = read_container(path, MAGIC, (FORMAT_VERSION,))
    stored = validate_config(meta["config"])
    if config_hash(stored) != meta["config_hash"]:
        raise CheckpointError(f"config hash mismatch in {path}: stored config does not hash to {meta['config_hash'][:12]}")
    if config is not None and config_hash(config) != meta["config_hash"]:
        raise CheckpointError(f"config hash mismatch: {path} was written with {meta['config_hash'][:12]}, "
                              f"current config is {config_hash(config)[:12]}")
    return meta, unpack_state(meta["state"], tensors)


def load_checkpoint(path, config: JalaConfig = None):
    """Rebuild the pretraining or post-training state stored at ``path``."""
    from jala.train.posttrain import PostTrainState
    from jala.train.pretrain import PretrainState

    meta, tree = read_checkpoint(path, config)
    phases = {PretrainState.phase: PretrainState, PostTrainState.phase: PostTrainState}
    if meta["phase"] not in phases:
        raise CheckpointError(f"unknown checkpoint phase {meta['phase']!r}")
    state = phases[meta["phase"]](validate_config(meta["config"]), meta.get("tokenizer_hash", ""))
    for name, module in state.modules().items():
        module.load_state_dict(tree["models"][name])
    state.optimizer.load_state_dict(tree["optimizer"])
    state.rng.load_state_dict(tree["rng"])
    state.step = meta["step"]
    return state


def load_model_weights(path, config: JalaConfig, **modules):
    """Copy named module weights from a checkpoint whose model sections match ``config``."""
    _, meta, tensors = read_container(path, MAGIC, (FORMAT_VERSION,))
    if meta.get("model_hash") != model_hash(config):
        raise CheckpointError(f"checkpoint {path} was trained with different model settings")
    tree = unpack_state(meta["state"], tensors)
    for name, module in modules.items():
        if name not in tree["models"]:
            raise CheckpointError(f"checkpoint {path} has no {name} weights")
        module.load_state_dict(tree["models"][name])
    return meta
