import json

import numpy as np
import pytest
import torch

from jala.config import apply_overrides
from jala.errors import DataError
from jala.motion.pose import HandSide
from jala.world.records import read_records, write_manifest, write_records
from jala.world.synthetic import (
    EpisodeSample,
    Split,
    boundary_frames,
    episode_rng,
    generate_episode,
    generate_robot_episode,
    make_splits,
    minimum_jerk,
    n_chunks,
    seed_ranges,
    world_for,
)


def test_split_sizes_and_labels(tiny_config, tiny_splits):
    w = tiny_config.world
    assert {k: len(v) for k, v in tiny_splits.items()} == {
        "lab_train": w.lab_train, "lab_eval": w.lab_eval, "wild_train": w.wild_train,
        "wild_eval": w.wild_eval, "robot_train": w.robot_train, "robot_eval": w.robot_eval,
    }
    assert tiny_splits["wild_train"].labeled_count == round(w.pseudo_label_fraction * w.wild_train)
    assert tiny_splits["wild_eval"].labeled_count == w.wild_eval
    assert all(e.labeled for e in tiny_splits["lab_train"])


def test_seed_ranges_are_disjoint(tiny_config):
    ranges = seed_ranges(tiny_config.world)
    seen = set()
    for r in ranges.values():
        assert seen.isdisjoint(r)
        seen.update(r)
    overlapping = apply_overrides(tiny_config, ["world.split_seed_starts={lab_eval: 10}"])
    with pytest.raises(DataError):
        seed_ranges(overlapping.world)


def test_episodes_are_reproducible(tiny_config):
    w = tiny_config.world
    a = generate_episode(w, episode_rng(w, 5), Split.LAB, seed=5)
    b = generate_episode(w, episode_rng(w, 5), Split.LAB, seed=5)
    assert torch.equal(a.observations, b.observations) and torch.equal(a.poses, b.poses)
    assert a.observations.shape == (w.episode_length, w.obs_tokens, w.obs_token_dim)
    assert a.instruction_ids[0] < w.n_verbs <= a.instruction_ids[1]


def test_wild_clock_runs_at_half_speed(tiny_config):
    w = tiny_config.world
    lab = generate_episode(w, episode_rng(w, 9), Split.LAB)
    wild = generate_episode(w, episode_rng(w, 9), Split.WILD, labeled=True)
    for m in range(w.episode_length // 2):
        assert torch.equal(wild.poses[2 * m], lab.poses[m])


def test_wild_nuisance_scales_with_embedding_variance(tiny_config):
    w = tiny_config.world
    world = world_for(w)
    obs = torch.cat([
        generate_episode(w, episode_rng(w, s), Split.WILD).observations.reshape(w.episode_length, -1)
        for s in range(40)
    ])
    nuisance = obs[:, -w.nuisance_dim:]
    ratio = float(nuisance.var(0).mean()) / (w.wild_nuisance_factor * world.embed_variance)
    assert 0.8 < ratio < 1.2


def test_lab_poses_are_linearly_decodable(tiny_config, tiny_splits):
    x = torch.cat([e.observations.reshape(len(e), -1) for e in tiny_splits["lab_train"]]).numpy()
    y = torch.cat([e.poses for e in tiny_splits["lab_train"]]).numpy()
    x = np.hstack([x, np.ones((x.shape[0], 1))])
    lam = 1e-6
    coef = np.linalg.solve(x.T @ x + lam * np.eye(x.shape[1]), x.T @ y)
    residual = ((y - x @ coef) ** 2).sum()
    total = ((y - y.mean(0)) ** 2).sum()
    assert 1 - residual / total > 0.9


def test_both_hands_appear(tiny_splits):
    hands = {e.hand_side for e in tiny_splits["lab_train"]}
    assert hands == {HandSide.LEFT, HandSide.RIGHT}


def test_minimum_jerk_endpoints():
    phase = torch.tensor([-1.0, 0.0, 0.5, 1.0, 2.0])
    assert torch.allclose(minimum_jerk(phase), torch.tensor([0.0, 0.0, 0.5, 1.0, 1.0]))


def test_robot_episode_actions(tiny_config):
    w = tiny_config.world
    episode = generate_robot_episode(w, episode_rng(w, 3), seed=3)
    world = world_for(w)
    assert episode.proprio.shape == (w.episode_length, w.proprio_dim)
    assert episode.actions.shape == (w.episode_length, w.action_dim)
    assert torch.allclose(episode.proprio, torch.tanh(episode.poses @ world.proprio_map.T))
    expected = torch.tanh(episode.poses[1:2] @ world.action_map.T) + episode.proprio[0] @ world.action_proprio.T
    assert torch.allclose(episode.actions[0], expected[0])


def test_boundary_frames(tiny_config, tiny_splits):
    episode = tiny_splits["lab_eval"][0]
    t_c = tiny_config.tokenizer.chunk_length
    assert n_chunks(episode, t_c) == 3
    start, end = boundary_frames(episode, 0, t_c)
    assert torch.equal(start, episode.observations[0]) and torch.equal(end, episode.observations[t_c])
    _, last = boundary_frames(episode, 2, t_c)
    assert torch.equal(last, episode.observations[len(episode) - 1])
    with pytest.raises(DataError):
        boundary_frames(episode, 3, t_c)


def test_episode_validation():
    obs = torch.zeros(4, 2, 3)
    with pytest.raises(DataError):
        EpisodeSample([0], obs, None, labeled=False, split=Split.LAB)
    with pytest.raises(DataError):
        EpisodeSample([0], obs, None, labeled=True, split=Split.WILD)
    with pytest.raises(DataError):
        EpisodeSample([0], obs, torch.zeros(3, 8), labeled=True, split=Split.WILD)


def test_record_stream_round_trip(tmp_path, tiny_splits):
    episodes = [tiny_splits["wild_train"][i] for i in range(4)] + [tiny_splits["robot_eval"][0]]
    path = tmp_path / "eps.eps"
    assert write_records(episodes, path) == 5
    loaded = read_records(path)
    for a, b in zip(episodes, loaded):
        assert (a.seed, a.labeled, a.split, a.hand_side, a.instruction_ids) == \
            (b.seed, b.labeled, b.split, b.hand_side, b.instruction_ids)
        assert torch.equal(a.observations, b.observations)
        assert (a.poses is None) == (b.poses is None)
    assert torch.equal(loaded[-1].actions, episodes[-1].actions)
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(DataError):
        read_records(path)


def test_manifest(tmp_path, tiny_splits):
    manifest = write_manifest(tmp_path / "manifest.json", tiny_splits, "hash", {"lab_train": "lab_train.eps"})
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk == manifest
    assert on_disk["splits"]["wild_train"]["labeled"] == tiny_splits["wild_train"].labeled_count
    assert on_disk["splits"]["lab_train"]["file"] == "lab_train.eps"
