import pytest
import torch

from jala.errors import CheckpointError, DataError, NotTrainedError, ShapeError
from jala.io.container import read_container, write_container
from jala.motion.pose import HandSide, MotionChunk, chunk_sequence
from jala.motion.stream import TokenChunk
from jala.motion.tokenizer import MotionTokenizer, load_tokenizer, save_tokenizer, train_tokenizer
from jala.numeric.backend import Rng


def lab_chunks(config, splits, n=5):
    t_c = config.tokenizer.chunk_length
    return [c for e in list(splits["lab_eval"])[:n] for c in chunk_sequence(e.poses, t_c, e.hand_side)]


def test_token_counts_and_ranges(tiny_config, tiny_splits, tiny_tokenizer):
    chunk = lab_chunks(tiny_config, tiny_splits)[0]
    tokens = tiny_tokenizer.tokenize_chunk(chunk)
    assert len(tokens.wrist_ids) == tiny_config.tokenizer.tokens_wrist == tiny_tokenizer.k_wrist
    assert len(tokens.finger_ids) == tiny_config.tokenizer.tokens_finger
    assert all(0 <= i < tiny_config.tokenizer.codebook_size for i in tokens.ids)
    assert tokens.hand_side == chunk.hand_side


def test_tokenize_is_deterministic(tiny_config, tiny_splits, tiny_tokenizer):
    chunks = lab_chunks(tiny_config, tiny_splits)
    first = [tiny_tokenizer.tokenize_chunk(c) for c in chunks]
    assert first == [tiny_tokenizer.tokenize_chunk(c) for c in chunks]


def test_detokenize_shape_and_reconstruction(tiny_config, tiny_splits, tiny_tokenizer):
    chunks = lab_chunks(tiny_config, tiny_splits)
    for c in chunks:
        decoded = tiny_tokenizer.detokenize_chunk(tiny_tokenizer.tokenize_chunk(c))
        assert isinstance(decoded, MotionChunk)
        assert decoded.poses.shape == c.poses.shape
        assert torch.isfinite(decoded.poses).all()
    # detokenization is a function of the ids alone
    tokens = tiny_tokenizer.tokenize_chunk(chunks[0])
    assert torch.equal(tiny_tokenizer.detokenize_chunk(tokens).poses,
                       tiny_tokenizer.detokenize_chunk(tokens).poses)


def test_hand_side_does_not_change_tokens(tiny_config, tiny_splits, tiny_tokenizer):
    c = lab_chunks(tiny_config, tiny_splits)[0]
    left = tiny_tokenizer.tokenize_chunk(MotionChunk(c.poses, HandSide.LEFT))
    right = tiny_tokenizer.tokenize_chunk(MotionChunk(c.poses, HandSide.RIGHT))
    assert left.ids == right.ids


def test_invalid_inputs(tiny_config, tiny_tokenizer):
    with pytest.raises(ShapeError):
        tiny_tokenizer.tokenize_batch(torch.zeros(1, 3, 8))
    k_w, k_f = tiny_tokenizer.k_wrist, tiny_tokenizer.k_finger
    with pytest.raises(ValueError):
        tiny_tokenizer.detokenize_chunk(TokenChunk((99,) * k_w, (0,) * k_f))
    with pytest.raises(ShapeError):
        tiny_tokenizer.detokenize_chunk(TokenChunk((0,) * (k_w + 1), (0,) * k_f))


def test_untrained_tokenizer_refuses(tiny_config):
    tok = MotionTokenizer(tiny_config.tokenizer, tiny_config.world.finger_dims)
    with pytest.raises(NotTrainedError):
        tok.tokenize_batch(torch.zeros(1, tiny_config.tokenizer.chunk_length, 8))


def test_training_needs_enough_chunks(tiny_config, tiny_splits):
    chunks = lab_chunks(tiny_config, tiny_splits, n=2)
    with pytest.raises(DataError):
        train_tokenizer(chunks, tiny_config.tokenizer, tiny_config.world.finger_dims, Rng(0))


def test_training_report(tiny_config, tiny_splits):
    t_c = tiny_config.tokenizer.chunk_length
    chunks = [c for e in tiny_splits["lab_train"] for c in chunk_sequence(e.poses, t_c, e.hand_side)]
    _, report = train_tokenizer(chunks, tiny_config.tokenizer, tiny_config.world.finger_dims, Rng(1))
    assert len(report.val_mse) == tiny_config.tokenizer.epochs
    assert report.val_mpjpe >= 0
    n_train = len(chunks) - max(1, int(len(chunks) * tiny_config.tokenizer.val_fraction))
    slots = tiny_config.tokenizer.slots_wrist
    assert report.assignments["wrist"] == n_train * slots


def test_save_load_round_trip(tmp_path, tiny_config, tiny_splits, tiny_tokenizer):
    path = tmp_path / "tok.tok"
    save_tokenizer(tiny_tokenizer, path, "abc")
    loaded = load_tokenizer(path)
    assert loaded.config == tiny_tokenizer.config
    for c in lab_chunks(tiny_config, tiny_splits, n=2):
        assert loaded.tokenize_chunk(c) == tiny_tokenizer.tokenize_chunk(c)
    _, meta, _ = read_container(path, b"JALA-TOK")
    assert meta["config_hash"] == "abc"
    save_tokenizer(loaded, tmp_path / "again.tok", "abc")
    assert (tmp_path / "again.tok").read_bytes() == path.read_bytes()


def test_container_rejects_bad_files(tmp_path):
    path = tmp_path / "x.bin"
    write_container(path, b"JALA-TOK", 1, {"a": 1}, {"t": torch.ones(2)})
    with pytest.raises(CheckpointError):
        read_container(path, b"JALA-CKP")
    with pytest.raises(CheckpointError):
        read_container(path, b"JALA-TOK", versions=(2,))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CheckpointError):
        read_container(path, b"JALA-TOK")
    with pytest.raises(CheckpointError):
        read_container(tmp_path / "missing.bin", b"JALA-TOK")
