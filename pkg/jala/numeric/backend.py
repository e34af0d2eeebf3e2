"""Numeric backend: dtype policy, seeded random streams, attention and gradient oracles.

Tensors, autograd and the elementwise/matmul/softmax/layer-norm kernels come
from torch. This module adds what torch leaves to the caller: explicit RNG
handles with named substreams, masked multi-head attention used by every
model in the package, and a central finite-difference gradient oracle.
"""

import hashlib
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Optional

import torch
from einops import rearrange
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from jala.errors import ConfigError, NonFiniteError

DTYPES = {"float32": torch.float32, "float64": torch.float64}

# Gradient-oracle tolerance per dtype (max relative error)
GRAD_TOLERANCE = {torch.float32: 1e-3, torch.float64: 1e-5}


def resolve_dtype(name) -> torch.dtype:
    if isinstance(name, torch.dtype):
        return name
    return DTYPES[name]


@contextmanager
def use_dtype(name):
    """Temporarily switch torch's default floating dtype."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(resolve_dtype(name))
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def _derive_seed(seed: int, path: str) -> int:
    digest = hashlib.blake2b(f"{seed}:{path}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Explicit random stream. Substreams are derived from (seed, name), not from draws."""

    ALGORITHM = "torch-mt19937/blake2b-split"

    def __init__(self, seed: int, name: str = "root"):
        if not 0 <= int(seed) < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.name = name
        self.generator = torch.Generator()
        self.generator.manual_seed(_derive_seed(self.seed, name))

    def substream(self, name: str) -> "Rng":
        return Rng(self.seed, f"{self.name}/{name}")

    def normal(self, shape, dtype=None) -> torch.Tensor:
        return torch.randn(tuple(shape), generator=self.generator, dtype=dtype or torch.get_default_dtype())

    def uniform(self, shape, low=0.0, high=1.0, dtype=None) -> torch.Tensor:
        u = torch.rand(tuple(shape), generator=self.generator, dtype=dtype or torch.get_default_dtype())
        return low + (high - low) * u

    def randint(self, high: int, shape=()) -> torch.Tensor:
        return torch.randint(high, tuple(shape), generator=self.generator)

    def integer(self, high: int) -> int:
        return int(self.randint(high, (1,))[0])

    def bernoulli(self, p: float, shape) -> torch.Tensor:
        return torch.rand(tuple(shape), generator=self.generator, dtype=torch.float64) < p

    def permutation(self, n: int) -> torch.Tensor:
        return torch.randperm(n, generator=self.generator)

    def state_dict(self) -> dict:
        return {
            "seed": self.seed,
            "name": self.name,
            "algorithm": self.ALGORITHM,
            "state": self.generator.get_state().clone(),
        }

    def load_state_dict(self, state: dict):
        if state.get("algorithm") != self.ALGORITHM:
            raise ValueError(f"rng algorithm mismatch: {state.get('algorithm')!r}")
        self.seed = int(state["seed"])
        self.name = state["name"]
        self.generator.set_state(state["state"].clone())

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(int(state["seed"]), state["name"])
        rng.load_state_dict(state)
        return rng


def seeded_rng(seed: int) -> Rng:
    return Rng(seed)


def masked_attention(q, k, v, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Scaled dot-product attention over (batch, heads, seq, dim) tensors.

    ``mask`` is boolean, True where attention is allowed, broadcastable to
    (batch, heads, q_len, k_len). Every query row must allow at least one key.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = torch.matmul(q, k.transpose(-2, -1)) * scale
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    attn = torch.softmax(scores, dim=-1)
    return torch.matmul(attn, v)


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    return rearrange(x, "b s (h d) -> b h s d", h=heads)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    return rearrange(x, "b h s d -> b s (h d)")


def finite_difference_gradient(f: Callable[[torch.Tensor], torch.Tensor], params: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = params.detach().reshape(-1).clone()
    grad = torch.zeros_like(base)
    with torch.no_grad():
        for i in range(base.numel()):
            plus = base.clone()
            plus[i] += eps
            minus = base.clone()
            minus[i] -= eps
            f_plus = float(f(plus.view_as(params)))
            f_minus = float(f(minus.view_as(params)))
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NonFiniteError(f"non-finite function value at coordinate {i}")
            grad[i] = (f_plus - f_minus) / (2 * eps)
    return grad.view_as(params)


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-12) -> float:
    """Max-norm relative difference between two gradient tensors."""
    scale = max(float(a.abs().max()), float(b.abs().max()), floor)
    return float((a - b).abs().max()) / scale


def flat_parameters(params: Iterable[torch.nn.Parameter]) -> torch.Tensor:
    return parameters_to_vector(list(params)).detach().clone()


def flat_function(loss_fn: Callable[[], torch.Tensor], params) -> Callable[[torch.Tensor], torch.Tensor]:
    """Wrap a closure over module parameters as a function of one flat vector."""
    params = list(params)

    def f(vector: torch.Tensor) -> torch.Tensor:
        vector_to_parameters(vector.reshape(-1), params)
        return loss_fn()

    return f


def reverse_mode_gradient(loss_fn: Callable[[], torch.Tensor], params) -> torch.Tensor:
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return torch.cat([
        (g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)
    ])


def check_gradients(loss_fn, params, eps: float = 1e-6) -> float:
    """Relative error between reverse-mode and central-difference gradients."""
    params = list(params)
    start = flat_parameters(params)
    analytic = reverse_mode_gradient(loss_fn, params)
    numeric = finite_difference_gradient(flat_function(loss_fn, params), start, eps)
    vector_to_parameters(start, params)
    return relative_error(analytic.detach(), numeric)
