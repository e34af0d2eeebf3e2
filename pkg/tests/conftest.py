import pytest
import torch

from jala.config import DEFAULT_CONFIG, JalaConfig, _deep_merge, apply_overrides, validate_config
from jala.motion.pose import chunk_sequence
from jala.motion.tokenizer import train_tokenizer
from jala.numeric.backend import Rng
from jala.world.synthetic import make_splits

torch.set_default_dtype(torch.float64)

TINY = {
    "runtime": {"dtype": "float64", "seed": 7},
    "world": {
        "finger_dims": 2, "episode_length": 30, "move_frames": 20, "n_targets": 3, "n_verbs": 2,
        "obs_tokens": 2, "obs_token_dim": 8, "nuisance_dim": 4, "proprio_dim": 3, "action_dim": 2,
        "action_horizon": 5, "lab_train": 40, "lab_eval": 6, "wild_train": 20, "wild_eval": 6,
        "robot_train": 10, "robot_eval": 4, "pseudo_label_fraction": 0.2,
    },
    "tokenizer": {
        "chunk_length": 10, "codebook_size": 16, "groups": 2, "levels": 2, "slots_wrist": 1,
        "slots_finger": 1, "code_dim": 4, "hidden": 8, "epochs": 2, "batch_size": 32, "min_chunks": 50,
    },
    "backbone": {"layers": 2, "d_model": 16, "heads": 2, "mlp_ratio": 2, "max_positions": 128},
    "perceiver": {"layers": 1, "heads": 2, "head_hidden": 16},
    "flow": {"steps": 2, "depth": 1, "width": 16, "heads": 2},
    "pretrain": {"base_lr": 1e-3, "batch_size": 4, "total_steps": 6, "log_every": 1, "checkpoint_every": 100},
    "posttrain": {"base_lr": 1e-3, "batch_size": 4, "total_steps": 4, "log_every": 1},
    "eval": {"runs": 2, "step_fraction": 0.25, "max_episodes": 3, "sweep_fractions": [0.0, 1.0], "sweep_seeds": 1},
}


@pytest.fixture(autouse=True)
def _float64():
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(torch.float64)


@pytest.fixture(scope="session")
def tiny_config() -> JalaConfig:
    return validate_config(_deep_merge(DEFAULT_CONFIG, TINY))


@pytest.fixture
def make_config(tiny_config):
    """Tiny config with dotted overrides, e.g. ``make_config("perceiver.ema=false")``."""
    def make(*overrides):
        return apply_overrides(tiny_config, list(overrides))
    return make


@pytest.fixture(scope="session")
def tiny_splits(tiny_config):
    return make_splits(tiny_config.world)


@pytest.fixture(scope="session")
def tiny_tokenizer(tiny_config, tiny_splits):
    torch.set_default_dtype(torch.float64)
    t_c = tiny_config.tokenizer.chunk_length
    chunks = [c for e in tiny_splits["lab_train"] for c in chunk_sequence(e.poses, t_c, e.hand_side)]
    tok, _ = train_tokenizer(chunks, tiny_config.tokenizer, tiny_config.world.finger_dims, Rng(0, "tokenizer"))
    return tok
