import pytest
import torch

from jala.errors import NotTrainedError, ShapeError
from jala.motion.grvq import Codebook, GroupedResidualVQ, dequantize, grvq_quantize, grvq_quantize_batch, nearest_codeword
from jala.numeric.backend import Rng


def brute_force(vector, codebook):
    groups, levels = codebook.groups, codebook.levels
    parts = vector.reshape(groups, -1)
    indices = torch.zeros(groups, levels, dtype=torch.long)
    for g in range(groups):
        residual = parts[g].clone()
        for r in range(levels):
            best, best_dist = 0, float("inf")
            for c in range(codebook.entries_per_level):
                dist = float(((residual - codebook.codewords[g, r, c]) ** 2).sum())
                if dist < best_dist:
                    best, best_dist = c, dist
            indices[g, r] = best
            residual = residual - codebook.codewords[g, r, best]
    return indices


@pytest.mark.parametrize("entries", [4, 32])
def test_quantize_matches_brute_force(entries):
    rng = Rng(1, f"grvq/{entries}")
    codebook = Codebook.random("finger", groups=2, levels=3, entries=entries, code_dim=6, rng=rng)
    for _ in range(100):
        v = rng.normal((6,))
        indices, quantized, _ = grvq_quantize(v, codebook)
        assert torch.equal(indices, brute_force(v, codebook))
        assert torch.allclose(dequantize(indices, codebook.codewords), quantized)


def test_residual_never_grows_with_more_levels():
    rng = Rng(2)
    codebook = Codebook.random("wrist", groups=1, levels=4, entries=8, code_dim=3, rng=rng, scale=3.0)
    for _ in range(50):
        v = rng.normal((3,))
        norms = [grvq_quantize(v, codebook.truncated(r))[2] for r in range(1, 5)]
        assert all(a >= b for a, b in zip(norms, norms[1:]))
        assert norms[0] <= float(v.norm()) + 1e-12


def test_ties_go_to_lowest_index():
    codewords = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
    assert int(nearest_codeword(torch.tensor([[1.0, 0.0]]), codewords)[0]) == 0
    assert int(nearest_codeword(torch.tensor([[0.0, 5.0]]), codewords)[0]) == 0


def test_shape_errors():
    rng = Rng(0)
    with pytest.raises(ShapeError):
        Codebook.random("wrist", groups=3, levels=1, entries=4, code_dim=4, rng=rng)
    codebook = Codebook.random("wrist", groups=2, levels=1, entries=4, code_dim=4, rng=rng)
    with pytest.raises(ShapeError):
        grvq_quantize(torch.zeros(5), codebook)
    with pytest.raises(ValueError):
        dequantize(torch.full((2, 1), 4), codebook.codewords)


def test_batch_level_inputs_are_residuals():
    rng = Rng(3)
    codebook = Codebook.random("wrist", groups=1, levels=2, entries=4, code_dim=2, rng=rng)
    x = rng.normal((5, 2))
    indices, quantized, level_inputs = grvq_quantize_batch(x, codebook.codewords)
    assert torch.equal(level_inputs[:, 0, 0], x)
    first = codebook.codewords[0, 0][indices[:, 0, 0]]
    assert torch.allclose(level_inputs[:, 0, 1], x - first)


def test_ema_module_keeps_zero_codeword_and_counts_usage():
    rng = Rng(4)
    vq = GroupedResidualVQ("wrist", groups=2, levels=2, entries=8, code_dim=4)
    vq.train()
    x = rng.normal((64, 4))
    out, indices, commitment = vq(x, rng)
    assert out.shape == x.shape
    assert float(commitment) >= 0
    assert torch.equal(vq.codewords[:, :, 0], torch.zeros(2, 2, 2))
    usage = vq.end_epoch(rng)["counts"]
    # every level of every group assigns each input once
    assert all(sum(level) == 64 for group in usage for level in group)


def test_straight_through_gradient():
    rng = Rng(5)
    vq = GroupedResidualVQ("finger", groups=1, levels=1, entries=4, code_dim=2)
    x = rng.normal((16, 2)).requires_grad_()
    out, _, _ = vq(x, rng)
    out.sum().backward()
    assert torch.equal(x.grad, torch.ones_like(x))


def test_first_training_call_needs_an_rng():
    vq = GroupedResidualVQ("wrist", groups=1, levels=2, entries=4, code_dim=2)
    x = Rng(6).normal((8, 2))
    with pytest.raises(NotTrainedError, match="needs an rng"):
        vq(x)
    assert not bool(vq.initialized)
    vq.eval()
    out, indices, _ = vq(x)
    assert out.shape == x.shape and bool((indices == 0).all())
