import logging
import math

import pytest
import torch

from jala.errors import DataError, EmptyResultError, ShapeError
from jala.evaluation.metrics import (
    all_metrics,
    joints_from_pose,
    mde,
    mpjpe,
    mwte,
    pa_mpjpe,
    procrustes_align,
    rest_joints,
)
from jala.evaluation.motion_eval import METRICS, eval_motion_generation, model_decoder, oracle_decoder
from jala.evaluation.projection import collect_embeddings, project_embeddings, write_projection_csv
from jala.evaluation.sweep import run_sweep
from jala.motion.pose import axis_angle_to_matrix, chunk_sequence
from jala.numeric.backend import Rng
from jala.train.pretrain import PretrainState


def poses(frames, finger_dims=1):
    return torch.zeros(frames, 6 + finger_dims)


class TestMpjpe:
    def test_identical(self):
        p = Rng(0).normal((4, 8))
        assert mpjpe(p, p) == 0.0

    def test_translation_offset(self):
        gt = poses(3)
        pred = gt.clone()
        pred[:, 2] = 0.1
        assert mpjpe(pred, gt) == pytest.approx(0.1)

    def test_bent_finger(self):
        gt = poses(1)
        pred = gt.clone()
        pred[0, 6] = math.pi / 2
        # tip moves from (0.13, 0, 0) to (0.08, 0, -0.05); the wrist does not move
        assert mpjpe(pred, gt) == pytest.approx(math.sqrt(2) * 0.05 / 2)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mpjpe(poses(2), poses(3))


class TestMwte:
    def test_identical(self):
        assert mwte(poses(2), poses(2)) == 0.0

    def test_per_frame_offsets(self):
        gt = poses(2)
        pred = gt.clone()
        pred[0, 0], pred[1, 0] = 0.1, 0.3
        assert mwte(pred, gt) == pytest.approx(0.2)

    def test_rotation_is_ignored(self):
        pred = poses(2)
        pred[:, 3:6] = 0.7
        assert mwte(pred, poses(2)) == 0.0


class TestMde:
    def test_perpendicular_displacements(self):
        gt, pred = poses(3), poses(3)
        gt[-1, 1] = 1.0
        pred[-1, 0] = 1.0
        assert mde(pred, gt) == pytest.approx(math.sqrt(2))
        assert mde(pred, gt, mode="angle") == pytest.approx(math.pi / 2)

    def test_constant_offset_has_no_displacement_error(self):
        gt = poses(4)
        gt[:, 0] = torch.linspace(0, 1, 4)
        pred = gt.clone()
        pred[:, :3] += 0.5
        assert mde(pred, gt) == pytest.approx(0.0, abs=1e-12)

    def test_needs_two_frames(self):
        with pytest.raises(ShapeError):
            mde(poses(1), poses(1))
        with pytest.raises(ValueError):
            mde(poses(2), poses(2), mode="other")


class TestPaMpjpe:
    def test_translation_is_removed(self):
        gt = poses(2, finger_dims=3)
        gt[:, 6:] = torch.tensor([0.2, 0.5, 0.9])
        pred = gt.clone()
        pred[:, :3] += torch.tensor([0.3, -0.1, 0.2])
        assert pa_mpjpe(pred, gt) == pytest.approx(0.0, abs=1e-9)
        assert mpjpe(pred, gt) > 0.1

    def test_similarity_transform_is_recovered(self):
        rng = Rng(1)
        gt = rng.normal((2, 6, 3))
        rot = axis_angle_to_matrix(torch.tensor([0.3, -0.4, 0.5]))
        pred = 1.7 * gt @ rot.T + torch.tensor([1.0, 2.0, 3.0])
        aligned, degenerate = procrustes_align(pred, gt)
        assert torch.allclose(aligned, gt, atol=1e-10)
        assert not bool(degenerate.any())
        rigid, _ = procrustes_align(pred, gt, scale=False)
        assert not torch.allclose(rigid, gt, atol=1e-3)

    def test_collinear_targets_are_flagged(self):
        line = torch.linspace(0, 1, 4)[:, None] * torch.tensor([1.0, 0.0, 0.0])
        _, degenerate = procrustes_align(line[None] + 0.1, line[None])
        assert bool(degenerate.all())

    def test_never_exceeds_mpjpe(self):
        rng = Rng(2)
        for _ in range(1000):
            pred, gt = rng.normal((2, 11)) * 0.5, rng.normal((2, 11)) * 0.5
            assert pa_mpjpe(pred, gt) <= mpjpe(pred, gt) + 1e-12


def test_joint_layout():
    rest = rest_joints(finger_dims=5)
    assert rest.shape == (6, 3)
    assert torch.equal(rest[0], torch.zeros(3))
    assert torch.allclose(rest[1:, 0], torch.full((5,), 0.13))
    assert joints_from_pose(torch.zeros(4, 2, 8)).shape == (4, 2, 3, 3)
    assert set(all_metrics(poses(3), poses(3))) == set(METRICS)


def test_oracle_report_is_the_tokenizer_floor(tiny_config, tiny_splits, tiny_tokenizer):
    split = tiny_splits["lab_eval"]
    report = eval_motion_generation(split, tiny_tokenizer, tiny_config, oracle_decoder(tiny_tokenizer, tiny_config),
                                    "lab_eval")
    assert report.count == tiny_config.eval.max_episodes and report.skipped == 0
    t_c = tiny_config.tokenizer.chunk_length
    gt = torch.stack([chunk_sequence(e.poses, t_c)[0].poses for e in list(split)[:report.count]])
    wrist, finger = tiny_tokenizer.tokenize_batch(gt)
    recon = tiny_tokenizer.detokenize_batch(wrist, finger)
    assert report.means["mpjpe"] == pytest.approx(mpjpe(recon, gt))


def test_report_files(tmp_path, tiny_config, tiny_splits, tiny_tokenizer):
    report = eval_motion_generation(tiny_splits["lab_eval"], tiny_tokenizer, tiny_config,
                                    oracle_decoder(tiny_tokenizer, tiny_config), "lab_eval", "hash", "oracle")
    report.write(tmp_path, "lab_eval")
    lines = (tmp_path / "lab_eval.csv").read_text().splitlines()
    assert lines[0] == "split,metric,mean,count"
    assert [line.split(",")[1] for line in lines[1:]] == list(METRICS)
    assert '"checkpoint_id": "oracle"' in (tmp_path / "lab_eval.json").read_text()


def test_unlabeled_episodes_are_skipped(make_config, tiny_splits, tiny_tokenizer, caplog):
    config = make_config("eval.max_episodes=null")
    split = tiny_splits["wild_train"]
    with caplog.at_level(logging.WARNING):
        report = eval_motion_generation(split, tiny_tokenizer, config, oracle_decoder(tiny_tokenizer, config), "wild")
    assert report.count == split.labeled_count
    assert report.skipped == len(split) - split.labeled_count
    assert "skipped" in caplog.text
    unlabeled = [e for e in split if not e.labeled]
    with pytest.raises(EmptyResultError):
        eval_motion_generation(unlabeled, tiny_tokenizer, config, oracle_decoder(tiny_tokenizer, config))
    with pytest.raises(EmptyResultError):
        eval_motion_generation([], tiny_tokenizer, config, oracle_decoder(tiny_tokenizer, config))


def test_model_decoder_is_deterministic(tiny_config, tiny_splits, tiny_tokenizer):
    state = PretrainState(tiny_config)
    reports = [
        eval_motion_generation(tiny_splits["wild_eval"], tiny_tokenizer, tiny_config,
                               model_decoder(state, tiny_config, Rng(3, "eval")), "wild_eval")
        for _ in range(2)
    ]
    assert reports[0].means == reports[1].means
    assert all(math.isfinite(v) for v in reports[0].means.values())


def test_later_chunk_uses_ground_truth_context(make_config, tiny_splits, tiny_tokenizer):
    config = make_config("eval.chunk_index=2")
    report = eval_motion_generation(tiny_splits["lab_eval"], tiny_tokenizer, config,
                                    oracle_decoder(tiny_tokenizer, config))
    assert report.count == 3
    with pytest.raises(EmptyResultError):
        eval_motion_generation(tiny_splits["lab_eval"], tiny_tokenizer, make_config("eval.chunk_index=3"),
                               oracle_decoder(tiny_tokenizer, config))


def test_projection(tmp_path):
    rng = Rng(4)
    h, z = rng.normal((12, 5)), rng.normal((12, 5))
    projection = project_embeddings(h, z)
    assert projection.coords.shape == (24, 2)
    assert projection.sources == ["h"] * 12 + ["z"] * 12
    assert 0 < sum(projection.explained_variance) <= 1 + 1e-12
    again = project_embeddings(h, z)
    assert torch.equal(projection.coords, again.coords)
    path = write_projection_csv(projection, tmp_path / "p.csv")
    assert path.read_text().splitlines()[0] == "x,y,source,split"
    with pytest.raises(DataError):
        project_embeddings(h[:5], z[:5])
    with pytest.raises(DataError):
        project_embeddings(h, z[:, :4])


def test_rank_deficient_projection_warns(caplog):
    direction = torch.tensor([1.0, 2.0, 0.0])
    h = torch.arange(12.0)[:, None] * direction
    with caplog.at_level(logging.WARNING):
        projection = project_embeddings(h, -h)
    assert projection.rank_deficient and projection.coords.shape == (24, 1)
    assert "rank" in caplog.text


def test_collect_embeddings(tiny_config, tiny_splits):
    state = PretrainState(tiny_config)
    episodes = [tiny_splits["lab_eval"][i] for i in range(2)]
    h, z, labels = collect_embeddings(state, episodes, tiny_config, "lab")
    k, d = tiny_config.tokenizer.tokens_per_chunk, tiny_config.backbone.d_model
    assert h.shape == z.shape == (2 * k, d)
    assert labels == ["lab"] * (2 * k)


def test_sweep_writes_one_report_per_fraction(tmp_path, tiny_config, tiny_tokenizer):
    results = run_sweep(tiny_config, tiny_tokenizer, tmp_path, steps=1)
    fractions = tiny_config.eval.sweep_fractions
    assert [f for f, _ in results] == fractions
    for f in fractions:
        assert (tmp_path / f"wild_{f:.2f}.csv").exists() and (tmp_path / f"wild_{f:.2f}.json").exists()
    summary = (tmp_path / "sweep_summary.csv").read_text().splitlines()
    assert summary[0] == "wild_fraction," + ",".join(METRICS)
    assert len(summary) == 1 + len(fractions)
