import pytest
import torch
from torch import nn

from jala.errors import ConfigError, NonFiniteError
from jala.numeric.backend import (
    Rng,
    check_gradients,
    finite_difference_gradient,
    masked_attention,
    merge_heads,
    relative_error,
    seeded_rng,
    split_heads,
    use_dtype,
)


def test_rng_substreams_are_named_not_drawn():
    a = Rng(3)
    b = Rng(3)
    a.normal((5,))  # draws on the parent do not shift children
    assert torch.equal(a.substream("x").normal((4,)), b.substream("x").normal((4,)))
    assert not torch.equal(b.substream("x").normal((4,)), b.substream("y").normal((4,)))


def test_rng_state_round_trip():
    rng = Rng(11, "train")
    rng.uniform((3,))
    state = rng.state_dict()
    expected = rng.normal((6,))
    restored = Rng.from_state(state)
    assert torch.equal(restored.normal((6,)), expected)


def test_rng_rejects_out_of_range_seed():
    with pytest.raises(ConfigError):
        Rng(-1)
    with pytest.raises(ConfigError):
        Rng(2**64)


def test_rng_algorithm_mismatch():
    rng = Rng(0)
    state = rng.state_dict()
    state["algorithm"] = "other"
    with pytest.raises(ValueError):
        Rng(0).load_state_dict(state)


def test_use_dtype_restores_previous_default():
    before = torch.get_default_dtype()
    with use_dtype("float32"):
        assert torch.get_default_dtype() == torch.float32
        assert Rng(0).normal((2,)).dtype == torch.float32
    assert torch.get_default_dtype() == before


def test_finite_difference_of_cubic():
    x = torch.tensor([0.5, -1.0, 2.0])
    grad = finite_difference_gradient(lambda v: (v ** 3).sum(), x)
    assert torch.allclose(grad, 3 * x ** 2, atol=1e-6)


def test_finite_difference_rejects_non_finite_values():
    with pytest.raises(NonFiniteError):
        finite_difference_gradient(lambda v: torch.log(v).sum(), torch.tensor([0.0, 1.0]))


def test_check_gradients_small_network():
    torch.manual_seed(0)
    net = nn.Sequential(nn.Linear(3, 4), nn.Tanh(), nn.Linear(4, 1))
    x = torch.randn(5, 3)
    before = [p.clone() for p in net.parameters()]
    error = check_gradients(lambda: net(x).pow(2).mean(), net.parameters())
    assert error < 1e-5
    for p, q in zip(net.parameters(), before):
        assert torch.equal(p, q)


def test_relative_error_scale():
    a = torch.tensor([1.0, 2.0])
    assert relative_error(a, a) == 0.0
    assert relative_error(a, torch.tensor([1.0, 2.2])) == pytest.approx(0.2 / 2.2)


def test_masked_attention_matches_softmax():
    torch.manual_seed(1)
    q, k, v = torch.randn(1, 2, 3, 4), torch.randn(1, 2, 5, 4), torch.randn(1, 2, 5, 4)
    expected = torch.softmax(q @ k.transpose(-1, -2) / 2.0, -1) @ v
    assert torch.allclose(masked_attention(q, k, v), expected)


def test_masked_attention_single_allowed_key():
    torch.manual_seed(2)
    q, k, v = torch.randn(1, 1, 2, 4), torch.randn(1, 1, 3, 4), torch.randn(1, 1, 3, 4)
    mask = torch.tensor([[False, True, False], [True, False, False]])
    out = masked_attention(q, k, v, mask)
    assert torch.allclose(out[0, 0, 0], v[0, 0, 1])
    assert torch.allclose(out[0, 0, 1], v[0, 0, 0])


def test_split_merge_heads_inverse():
    x = torch.randn(2, 5, 8)
    assert split_heads(x, 4).shape == (2, 4, 5, 2)
    assert torch.equal(merge_heads(split_heads(x, 4)), x)


def test_seeded_rng_is_reproducible():
    assert torch.equal(seeded_rng(42).normal((8,)), seeded_rng(42).normal((8,)))
    assert not torch.equal(seeded_rng(42).normal((8,)), seeded_rng(43).normal((8,)))
