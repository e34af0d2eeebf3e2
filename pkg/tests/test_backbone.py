import pytest
import torch

from jala.errors import DataError, ShapeError
from jala.model.backbone import VLABackbone, build_attention_mask
from jala.model.decode import decode_chunk_iterative, decode_schedule, part_ranges, vote
from jala.model.losses import align_loss, mcp_loss
from jala.model.masking import full_chunk_plan, sample_hybrid_mask
from jala.motion.stream import Modality, TokenChunk, Vocab, collate_streams, format_stream
from jala.numeric.backend import Rng, check_gradients

VOCAB = Vocab(n_instruction=3, codebook_size=8)


def make_stream(n_chunks=3, visual=2, latents=0):
    chunks = [TokenChunk((i % 8, (i + 1) % 8), ((i + 2) % 8, (i + 3) % 8)) for i in range(n_chunks)]
    return format_stream([0, 1], [VOCAB.VIS] * visual + [VOCAB.LAT] * latents, chunks, VOCAB)


def make_backbone(tiny_config, align_layer=None):
    cfg = tiny_config.backbone.model_copy(update={"align_layer": align_layer})
    torch.manual_seed(0)
    return VLABackbone(cfg, VOCAB, obs_token_dim=5)


def test_attention_mask_rules():
    stream = make_stream()
    mask = build_attention_mask(stream)
    modality, chunk = stream.modality, stream.chunk_index
    prefix = (modality == Modality.INSTRUCTION) | (modality == Modality.VISUAL)
    for q in range(len(stream)):
        for k in range(len(stream)):
            if prefix[k]:
                expected = True
            elif prefix[q]:
                expected = False
            else:
                expected = bool(chunk[k] <= chunk[q])
            assert bool(mask[q, k]) == expected, (q, k)


def test_attention_mask_rejects_untagged_positions():
    stream = make_stream()
    stream.chunk_index[-2] = -1
    with pytest.raises(ShapeError):
        build_attention_mask(stream)


def test_forward_shapes(tiny_config):
    backbone = make_backbone(tiny_config)
    stream = collate_streams([make_stream(latents=4)] * 2)
    visual = torch.randn(2, 2, 5)
    latents = torch.randn(2, 4, tiny_config.backbone.d_model)
    out = backbone(stream, visual=visual, latents=latents)
    assert out.logits.shape == (2, len(stream), VOCAB.size)
    assert out.h.shape == (2, 3, 4, tiny_config.backbone.d_model)
    with pytest.raises(ShapeError):
        backbone(stream, visual=visual, latents=latents[:, :3])


def test_h_is_read_after_the_alignment_block(tiny_config):
    backbone = make_backbone(tiny_config, align_layer=1)
    stream = make_stream().as_batch()
    out = backbone(stream)
    x = backbone.embed(stream.ids, stream)
    x = backbone.blocks[0](x, build_attention_mask(stream))
    positions = stream.motion_positions()
    assert torch.allclose(out.h, x[:, positions])


def test_motion_states_per_block(tiny_config):
    backbone = make_backbone(tiny_config, align_layer=1)
    stream = make_stream().as_batch()
    out = backbone(stream)
    assert len(out.layers) == tiny_config.backbone.layers
    assert torch.equal(out.motion_states(1), out.h)
    assert torch.equal(out.motion_states(2), out.hidden[:, stream.motion_positions()])
    assert not torch.allclose(out.motion_states(2), out.h)
    for layer in (0, 3):
        with pytest.raises(ShapeError):
            out.motion_states(layer)


def test_future_chunks_do_not_change_earlier_outputs(tiny_config):
    backbone = make_backbone(tiny_config)
    stream = make_stream().as_batch()
    positions = stream.motion_positions()
    out = backbone(stream)
    changed = stream.ids.clone()
    changed[0, positions[2]] = VOCAB.finger_base
    out2 = backbone(stream, input_ids=changed)
    assert torch.allclose(out.h[:, :2], out2.h[:, :2])
    assert not torch.allclose(out.h[:, 2], out2.h[:, 2])


def test_overlength_stream_rejected(tiny_config):
    backbone = make_backbone(tiny_config)
    stream = make_stream(n_chunks=40)
    with pytest.raises(ShapeError):
        backbone(stream.as_batch())


def test_mcp_loss_values_and_errors(tiny_config):
    logits = torch.zeros(1, 4, 5)
    targets = torch.tensor([[0, 1, 2, 3]])
    masked = torch.tensor([[True, False, True, False]])
    assert float(mcp_loss(logits, targets, masked)) == pytest.approx(torch.log(torch.tensor(5.0)).item())
    with pytest.raises(DataError):
        mcp_loss(logits, targets, torch.zeros_like(masked))
    with pytest.raises(ShapeError):
        mcp_loss(logits, targets[:, :3], masked[:, :3])
    stream = make_stream()
    unlabeled = sample_hybrid_mask(stream, Rng(0), labeled=False)
    with pytest.raises(DataError):
        mcp_loss(torch.zeros(len(stream), VOCAB.size), stream.ids, unlabeled)


def test_align_loss_is_mean_absolute_error():
    h = torch.tensor([[[1.0, 2.0]], [[0.0, 0.0]]])
    z = torch.tensor([[[0.0, 0.0]], [[0.0, 4.0]]])
    assert float(align_loss(h, z)) == pytest.approx(7.0 / 4)
    assert torch.allclose(align_loss(h, z, per_sample=True), torch.tensor([1.5, 2.0]))
    with pytest.raises(ShapeError):
        align_loss(h, z[:, :, :1])


def test_loss_gradients_match_finite_differences(tiny_config):
    # a head-only model keeps the oracle under two hundred parameters
    torch.manual_seed(1)
    head = torch.nn.Linear(6, VOCAB.size)
    features = torch.randn(1, len(make_stream()), 6)
    stream = make_stream()
    plan = full_chunk_plan(stream, 1)
    assert check_gradients(lambda: mcp_loss(head(features)[0], stream.ids, plan), head.parameters()) < 1e-5
    proj = torch.nn.Linear(3, 4)
    h, z = torch.randn(2, 3, 3), torch.randn(2, 3, 4)
    assert check_gradients(lambda: align_loss(proj(h), z), proj.parameters()) < 1e-5


def test_decode_schedule():
    assert decode_schedule(8, 0.05) == (20, 1)
    assert decode_schedule(40, 0.05) == (20, 2)
    assert decode_schedule(8, 0.25) == (4, 2)


def test_vote_majority_and_ties():
    runs = [torch.tensor([1, 2, 3]), torch.tensor([4, 2, 5]), torch.tensor([4, 6, 7])]
    assert vote(runs).tolist() == [4, 2, 3]


def test_iterative_decode_follows_confident_logits():
    stream = make_stream(n_chunks=2)
    positions = stream.motion_positions()
    wanted = [VOCAB.wrist_base + 5, VOCAB.wrist_base + 6, VOCAB.finger_base + 1, VOCAB.finger_base + 7]

    def logits_fn(ids):
        logits = torch.zeros(len(stream), VOCAB.size)
        for j, p in enumerate(positions[1]):
            logits[p, wanted[j]] = 10.0
            # out-of-part ids must never be chosen even when preferred
            logits[p, VOCAB.MASK] = 50.0
        return logits

    chunk = decode_chunk_iterative(logits_fn, stream, 1, VOCAB, k_wrist=2, step_fraction=0.25, runs=3, rng=Rng(0))
    assert chunk.wrist_ids == (5, 6) and chunk.finger_ids == (1, 7)
    ranges = part_ranges(4, 2, VOCAB)
    assert ranges[0].tolist() == [VOCAB.wrist_base, VOCAB.wrist_base + 8]
    assert ranges[3].tolist() == [VOCAB.finger_base, VOCAB.finger_base + 8]


def test_decode_commits_one_block_per_pass():
    stream = make_stream(n_chunks=1)
    positions = stream.motion_positions()[0]
    seen = []

    def logits_fn(ids):
        seen.append(int((ids[positions] == VOCAB.MASK).sum()))
        return torch.zeros(len(stream), VOCAB.size)

    decode_chunk_iterative(logits_fn, stream, 0, VOCAB, k_wrist=2, step_fraction=0.25, runs=1)
    assert seen == [4, 3, 2, 1]
