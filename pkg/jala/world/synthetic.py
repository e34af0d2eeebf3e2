"""Toy desk world: scripted reach-and-grasp episodes of a single hand.

The wrist follows a minimum-jerk path from a random start to one of a few
fixed targets while the fingers close during the last part of the reach.
Observations are a fixed random nonlinear embedding of the pose concatenated
with split-specific nuisance noise, laid out as ``obs_tokens`` feature tokens
per frame. Robot episodes add proprioception and actions that are smooth
functions of the hand state.

All world constants (embeddings, targets, action maps) derive from
``WorldConfig.seed``; every episode derives from its own seed.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional

import torch

from jala.config import WorldConfig
from jala.errors import DataError
from jala.motion.pose import HandSide
from jala.numeric.backend import Rng

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("lab_train", "lab_eval", "wild_train", "wild_eval", "robot_train", "robot_eval")
# Default first episode seed per split; ranges are [start, start + size)
DEFAULT_SEED_STARTS = {name: i * 1_000_000 for i, name in enumerate(SPLIT_NAMES)}
CALIBRATION_EPISODES = 16
GRASP_START = 0.6


class Split(str, Enum):
    LAB = "lab"
    WILD = "wild"
    ROBOT = "robot"


@dataclass
class EpisodeSample:
    instruction_ids: List[int]
    observations: torch.Tensor  # (T, obs_tokens, obs_token_dim)
    poses: Optional[torch.Tensor]  # (T, 6 + D_f), present iff labeled
    labeled: bool
    split: Split
    hand_side: HandSide = HandSide.RIGHT
    seed: int = -1
    proprio: Optional[torch.Tensor] = None  # (T, proprio_dim), robot episodes only
    actions: Optional[torch.Tensor] = None  # (T, action_dim), robot episodes only

    def __post_init__(self):
        if self.labeled and self.poses is None:
            raise DataError("labeled episode needs poses")
        if self.poses is not None and self.poses.shape[0] != self.observations.shape[0]:
            raise DataError(f"{self.poses.shape[0]} pose frames for {self.observations.shape[0]} observations")
        if self.split == Split.LAB and not self.labeled:
            raise DataError("lab episodes are always labeled")

    def __len__(self):
        return self.observations.shape[0]


def minimum_jerk(phase: torch.Tensor) -> torch.Tensor:
    p = phase.clamp(0.0, 1.0)
    return p ** 3 * (10 - 15 * p + 6 * p ** 2)


class World:
    """Constants shared by every episode of one world seed."""

    def __init__(self, config: WorldConfig):
        self.config = config
        rng = Rng(config.seed, "world")
        dtype = torch.get_default_dtype()
        p, e = config.pose_dim, config.state_embed_dim
        self.embed_linear = rng.normal((e, p), dtype=dtype) / p ** 0.5
        self.embed_nonlinear = rng.normal((e, p), dtype=dtype) * 2.0 / p ** 0.5
        self.targets = rng.uniform((config.n_targets, 3), -0.3, 0.3, dtype=dtype)
        self.targets[:, 2] = self.targets[:, 2].abs() * 0.5
        self.target_rotations = rng.uniform((config.n_targets, 3), -0.6, 0.6, dtype=dtype)
        self.grasp_amplitude = rng.uniform((config.n_verbs,), 0.6, 1.4, dtype=dtype)
        self.finger_close = rng.uniform((config.finger_dims,), 0.8, 1.4, dtype=dtype)
        self.proprio_map = rng.normal((config.proprio_dim, p), dtype=dtype) / p ** 0.5
        self.action_map = rng.normal((config.action_dim, p), dtype=dtype) * 1.5 / p ** 0.5
        self.action_proprio = rng.normal((config.action_dim, config.proprio_dim), dtype=dtype) * 0.3
        self.embed_variance = self._calibrate()

    def embed(self, poses: torch.Tensor) -> torch.Tensor:
        linear = poses @ self.embed_linear.T
        return linear + self.config.nonlinear_scale * torch.tanh(poses @ self.embed_nonlinear.T)

    def _calibrate(self) -> float:
        rng = Rng(self.config.seed, "world/calibration")
        poses = torch.cat([
            trajectory(self, rng.substream(str(i)), 1.0)[0] for i in range(CALIBRATION_EPISODES)
        ])
        return float(self.embed(poses).var(0, unbiased=False).mean())

    @property
    def n_instruction(self) -> int:
        return self.config.n_verbs + self.config.n_targets


_WORLDS: Dict[str, World] = {}


def world_for(config: WorldConfig) -> World:
    key = f"{torch.get_default_dtype()}:{config.model_dump_json()}"
    if key not in _WORLDS:
        _WORLDS[key] = World(config)
    return _WORLDS[key]


def trajectory(world: World, rng: Rng, time_scale: float):
    """Pose sequence plus (verb, target, hand) for one scripted reach."""
    c = world.config
    dtype = world.targets.dtype
    verb = rng.integer(c.n_verbs)
    target = rng.integer(c.n_targets)
    hand = HandSide(rng.integer(2))
    start = rng.uniform((3,), -0.1, 0.1, dtype=dtype)
    goal = world.targets[target] + rng.normal((3,), dtype=dtype) * 0.02
    rot_start = rng.normal((3,), dtype=dtype) * 0.1
    rot_goal = world.target_rotations[target] + rng.normal((3,), dtype=dtype) * 0.05
    fingers_open = rng.uniform((c.finger_dims,), 0.0, 0.2, dtype=dtype)
    if hand == HandSide.LEFT:
        goal = goal * torch.tensor([1.0, -1.0, 1.0], dtype=dtype)
        rot_goal = rot_goal * torch.tensor([1.0, -1.0, -1.0], dtype=dtype)

    t = torch.arange(c.episode_length, dtype=dtype)
    phase = (time_scale * t) / c.move_frames
    s = minimum_jerk(phase)[:, None]
    grasp = minimum_jerk((phase - GRASP_START) / (1 - GRASP_START))[:, None]
    wrist = start + s * (goal - start)
    rot = rot_start + s * (rot_goal - rot_start)
    fingers = fingers_open + grasp * world.grasp_amplitude[verb] * world.finger_close
    return torch.cat([wrist, rot, fingers], -1), verb, target, hand


def generate_episode(config: WorldConfig, rng: Rng, split, labeled: Optional[bool] = None,
                     label_noise: float = 0.0, seed: int = -1) -> EpisodeSample:
    """Sample one episode. Wild episodes run on a slowed clock and carry heavier nuisance."""
    split = Split(split)
    world = world_for(config)
    if labeled is None:
        labeled = split != Split.WILD
    time_scale = config.wild_time_scale if split == Split.WILD else 1.0
    poses, verb, target, hand = trajectory(world, rng.substream("trajectory"), time_scale)

    if split == Split.WILD:
        nuisance_std = (config.wild_nuisance_factor * world.embed_variance) ** 0.5
    else:
        nuisance_std = config.lab_nuisance_std
    noise = rng.substream("nuisance").normal((config.episode_length, config.nuisance_dim), dtype=poses.dtype)
    obs = torch.cat([world.embed(poses), nuisance_std * noise], -1)
    obs = obs.reshape(config.episode_length, config.obs_tokens, config.obs_token_dim)

    labels = None
    if labeled:
        labels = poses
        if label_noise > 0:
            labels = poses + label_noise * rng.substream("labels").normal(poses.shape, dtype=poses.dtype)

    proprio = actions = None
    if split == Split.ROBOT:
        proprio = torch.tanh(poses @ world.proprio_map.T)
        following = torch.cat([poses[1:], poses[-1:]])
        actions = torch.tanh(following @ world.action_map.T) + proprio @ world.action_proprio.T

    return EpisodeSample(
        instruction_ids=[verb, config.n_verbs + target],
        observations=obs,
        poses=labels,
        labeled=labeled,
        split=split,
        hand_side=hand,
        seed=seed,
        proprio=proprio,
        actions=actions,
    )


def generate_robot_episode(config: WorldConfig, rng: Rng, seed: int = -1) -> EpisodeSample:
    return generate_episode(config, rng, Split.ROBOT, seed=seed)


def episode_rng(config: WorldConfig, seed: int) -> Rng:
    return Rng(config.seed, f"episode/{seed}")


class EpisodeSet:
    """Read-only handle over a split: episodes are generated on access from their seeds."""

    def __init__(self, name: str, config: WorldConfig, split: Split, seeds: List[int],
                 labeled: List[bool], label_noise: float = 0.0):
        self.name = name
        self.config = config
        self.split = split
        self.seeds = list(seeds)
        self.labeled = list(labeled)
        self.label_noise = label_noise

    def __len__(self):
        return len(self.seeds)

    def __getitem__(self, i: int) -> EpisodeSample:
        seed = self.seeds[i]
        return generate_episode(self.config, episode_rng(self.config, seed), self.split,
                                labeled=self.labeled[i], label_noise=self.label_noise, seed=seed)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def labeled_count(self) -> int:
        return sum(self.labeled)

    def subset(self, n: int) -> "EpisodeSet":
        return EpisodeSet(self.name, self.config, self.split, self.seeds[:n], self.labeled[:n], self.label_noise)


def seed_ranges(config: WorldConfig) -> Dict[str, range]:
    starts = dict(DEFAULT_SEED_STARTS)
    starts.update(config.split_seed_starts or {})
    unknown = set(starts) - set(SPLIT_NAMES)
    if unknown:
        raise DataError(f"unknown split names in split_seed_starts: {sorted(unknown)}")
    ranges = {name: range(starts[name], starts[name] + getattr(config, name)) for name in SPLIT_NAMES}
    names = list(ranges)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            ra, rb = ranges[a], ranges[b]
            if ra.start < rb.stop and rb.start < ra.stop:
                raise DataError(f"seed ranges of {a} and {b} overlap")
    return ranges


def make_splits(config: WorldConfig) -> Dict[str, EpisodeSet]:
    """Dataset handles for every split, over disjoint seed ranges."""
    ranges = seed_ranges(config)
    splits = {}
    for name, seeds in ranges.items():
        n = len(seeds)
        if name.startswith("lab"):
            splits[name] = EpisodeSet(name, config, Split.LAB, seeds, [True] * n)
        elif name.startswith("robot"):
            splits[name] = EpisodeSet(name, config, Split.ROBOT, seeds, [True] * n)
        elif name == "wild_eval":
            splits[name] = EpisodeSet(name, config, Split.WILD, seeds, [True] * n)
        else:
            n_labeled = round(config.pseudo_label_fraction * n)
            chosen = set(Rng(config.seed, "pseudo-labels").permutation(n)[:n_labeled].tolist())
            splits[name] = EpisodeSet(name, config, Split.WILD, seeds, [i in chosen for i in range(n)],
                                      label_noise=config.pseudo_label_noise)
    logger.debug("splits: %s", {k: len(v) for k, v in splits.items()})
    return splits


def n_chunks(episode: EpisodeSample, chunk_length: int) -> int:
    return len(episode) // chunk_length


def boundary_frames(episode: EpisodeSample, chunk_index: int, chunk_length: int):
    """Observation features at a chunk's first frame and chunk_length frames later (clamped)."""
    count = n_chunks(episode, chunk_length)
    if not 0 <= chunk_index < count:
        raise DataError(f"chunk index {chunk_index} outside [0, {count})")
    start = chunk_index * chunk_length
    end = min(start + chunk_length, len(episode) - 1)
    return episode.observations[start], episode.observations[end]
