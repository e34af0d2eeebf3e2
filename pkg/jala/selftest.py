"""Invariant suite behind ``jala selftest``.

Each check builds tiny float64 objects, runs in well under a second and
raises ``AssertionError`` with a short message on failure.
"""

import logging
import math
import time
from collections import Counter
from dataclasses import dataclass
from typing import Callable, List

import torch
from torch import nn

from jala.config import SUFFIX_MASK_RATE, TARGET_MASK_RATIOS, PerceiverConfig
from jala.numeric.backend import GRAD_TOLERANCE, Rng, check_gradients, use_dtype

logger = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


def _gradient_oracle() -> str:
    from jala.model.flow_head import fm_loss
    from jala.model.losses import align_loss, mcp_loss

    rng = Rng(0, "selftest/grad")
    x = rng.normal((2, 5, 4))
    targets = rng.randint(6, (2, 5))
    masked = torch.tensor([[True, False, True, False, False], [False, True, True, True, False]])
    head = nn.Linear(4, 6)
    proj = nn.Linear(4, 4)
    field = nn.Linear(3, 3)
    h, z = rng.normal((2, 3, 4)), rng.normal((2, 3, 4))
    actions, eps = rng.normal((2, 4, 3)), rng.normal((2, 4, 3))
    tau = torch.tensor([0.3, 0.8])

    errors = {
        "mcp": check_gradients(lambda: mcp_loss(head(x), targets, masked), head.parameters()),
        "align": check_gradients(lambda: align_loss(proj(h), z), proj.parameters()),
        "fm": check_gradients(lambda: fm_loss(lambda _h, a, _q, _t: field(a), None, actions, None, tau, eps),
                              field.parameters()),
    }
    worst = max(errors.values())
    assert worst < GRAD_TOLERANCE[torch.float64], f"max relative error {worst:.2e}"
    return ", ".join(f"{k} {v:.1e}" for k, v in errors.items())


def _tiny_pair(ema: bool = True, alpha: float = 0.5):
    from jala.model.perceiver import PerceiverPair

    config = PerceiverConfig(layers=1, heads=2, head_hidden=8, alpha=alpha, ema=ema)
    torch.manual_seed(0)
    pair = PerceiverPair(config, d_model=8, obs_token_dim=4, n_queries=3)
    # make the two copies differ so the update is observable
    with torch.no_grad():
        for p in pair.lsp.parameters():
            p.add_(0.1)
    return pair


def _ema_exactness() -> str:
    from jala.model.perceiver import _ema, decoupled_ema_update

    for alpha in (0.0, 0.5):
        pair = _tiny_pair(alpha=alpha)
        lap_b = {n: p.clone() for n, p in pair.lap.backbone_named_parameters()}
        lsp_b = {n: p.clone() for n, p in pair.lsp.backbone_named_parameters()}
        lap_q = pair.lap.queries.clone()
        lsp_q = pair.lsp.queries.clone()
        decoupled_ema_update(pair.lap, pair.lsp, alpha)
        for name, p in pair.lap.backbone_named_parameters():
            expected = lsp_b[name] if alpha == 0 else alpha * lap_b[name] + (1 - alpha) * lsp_b[name]
            assert torch.equal(p, expected), f"lap backbone {name} off at alpha={alpha}"
        expected_q = lap_q if alpha == 0 else alpha * lsp_q + (1 - alpha) * lap_q
        assert torch.equal(pair.lsp.queries, expected_q), f"lsp queries off at alpha={alpha}"
        assert torch.equal(pair.lap.queries, lap_q), "lap queries touched"
        for name, p in pair.lsp.backbone_named_parameters():
            assert torch.equal(p, lsp_b[name]), f"lsp backbone {name} touched"

    target, source = torch.ones(1), torch.zeros(1)
    for _ in range(1000):
        _ema(target, source, 0.999)
    assert abs(float(target) - 0.999 ** 1000) < 1e-6, f"geometric decay {float(target):.7f}"
    return f"0.999^1000 = {float(target):.6f}"


def _gradient_routing() -> str:
    from jala.model.losses import align_loss
    from jala.model.perceiver import trainable_parameters

    pair = _tiny_pair(ema=False)
    rng = Rng(0, "selftest/routing")
    start, end, first = rng.normal((2, 2, 4)), rng.normal((2, 2, 4)), rng.normal((2, 2, 4))
    hand = torch.tensor([0, 1])
    before = {n: p.clone() for n, p in pair.named_parameters()}
    optimizer = torch.optim.AdamW(trainable_parameters(pair), lr=1e-2)
    loss = align_loss(pair.state_latents(first, hand), pair.action_latents(start, end, hand))
    assert float(loss.detach()) > 0
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    pair.ema_step()
    for name, p in pair.lap.backbone_named_parameters():
        assert torch.equal(p, before[f"lap.{name}"]), f"lap.{name} moved"
    assert torch.equal(pair.lsp.queries, before["lsp.queries"]), "lsp.queries moved"
    assert not torch.equal(pair.lap.queries, before["lap.queries"]), "lap.queries did not move"
    return "lap backbone and lsp queries fixed"


def _masking_statistics() -> str:
    from jala.model.masking import sample_hybrid_mask
    from jala.motion.stream import TokenChunk, Vocab, format_stream

    vocab = Vocab(4, 16)
    chunk = TokenChunk((1, 2, 3, 4), (5, 6, 7, 8))
    stream = format_stream([0, 1], [vocab.VIS], [chunk] * 4, vocab)
    positions = stream.motion_positions()
    rng = Rng(0, "selftest/mask")
    trials = 4000
    targets, ratios = Counter(), Counter()
    suffix_masked = suffix_total = 0
    for _ in range(trials):
        plan = sample_hybrid_mask(stream, rng)
        targets[plan.target_chunk] += 1
        ratios[plan.target_ratio] += 1
        for i in range(plan.target_chunk + 1, 4):
            suffix_masked += int(plan.masked[positions[i]].sum())
            suffix_total += positions.shape[1]
    for counter, cells in ((targets, 4), (ratios, len(TARGET_MASK_RATIOS))):
        expected = trials / cells
        assert len(counter) == cells, f"only {len(counter)} of {cells} outcomes drawn"
        assert all(abs(c - expected) < 5 * math.sqrt(expected) for c in counter.values()), dict(counter)
    rate = suffix_masked / suffix_total
    assert abs(rate - SUFFIX_MASK_RATE) < 0.01, f"suffix rate {rate:.4f}"
    unlabeled = sample_hybrid_mask(stream, rng, labeled=False)
    assert bool(unlabeled.masked[positions.reshape(-1)].all())
    return f"suffix rate {rate:.4f}"


def _grvq_oracle() -> str:
    from jala.motion.grvq import Codebook, grvq_quantize

    rng = Rng(0, "selftest/grvq")
    codebook = Codebook.random("wrist", groups=2, levels=3, entries=16, code_dim=6, rng=rng)
    for _ in range(200):
        v = rng.normal((6,))
        indices, _, residual = grvq_quantize(v, codebook)
        for g in range(2):
            r = v.reshape(2, 3)[g].clone()
            for level in range(3):
                dist = ((r[None] - codebook.codewords[g, level]) ** 2).sum(-1)
                best = int(torch.argmin(dist))
                assert int(indices[g, level]) == best, "greedy level search disagrees"
                r = r - codebook.codewords[g, level, best]
        norms = [grvq_quantize(v, codebook.truncated(levels))[2] for levels in (1, 2, 3)]
        assert norms[0] >= norms[1] >= norms[2], "residual grew with depth"
    return "200 vectors"


def _flow_sampler() -> str:
    from jala.model.flow_head import sample_actions

    rng = Rng(0, "selftest/flow")
    actions, eps = rng.normal((3, 4, 2)), rng.normal((3, 4, 2))
    q = torch.zeros(3, 1)
    worst = 0.0
    for steps in (1, 2, 4, 16):
        out = sample_actions(lambda h, a, q_, tau: eps - actions, None, q, steps, eps=eps)
        worst = max(worst, float((out - actions).abs().max()))
    assert worst < 1e-5, f"reconstruction error {worst:.2e}"
    return f"max error {worst:.1e}"


def _metric_oracles() -> str:
    from jala.evaluation.metrics import mde, mpjpe, mwte, pa_mpjpe

    gt = torch.zeros(4, 11)
    gt[:, 0] = torch.arange(4.0) * 0.1
    shifted = gt.clone()
    shifted[:, 1] += 0.05
    assert abs(mpjpe(shifted, gt) - 0.05) < 1e-12
    assert abs(mwte(shifted, gt) - 0.05) < 1e-12
    assert abs(mde(shifted, gt)) < 1e-12
    assert pa_mpjpe(shifted, gt) < 1e-9
    rng = Rng(0, "selftest/metrics")
    for _ in range(100):
        pred, truth = rng.normal((3, 11)) * 0.3, rng.normal((3, 11)) * 0.3
        assert pa_mpjpe(pred, truth) <= mpjpe(pred, truth) + 1e-12
    return "translation micro-case and pa <= mpjpe"


def _attention_structure() -> str:
    from jala.model.backbone import build_attention_mask
    from jala.motion.stream import Modality, TokenChunk, Vocab, format_stream

    vocab = Vocab(4, 16)
    chunk = TokenChunk((1, 2), (3, 4))
    stream = format_stream([0, 1], [vocab.VIS, vocab.LAT], [chunk] * 3, vocab)
    mask = build_attention_mask(stream)
    prefix = (stream.modality == Modality.INSTRUCTION) | (stream.modality == Modality.VISUAL)
    assert bool(mask[:, prefix].all()), "some position cannot see the prefix"
    assert not bool(mask[prefix][:, ~prefix].any()), "prefix attends to motion"
    chunk_of = stream.chunk_index
    for p in torch.nonzero(~prefix).reshape(-1).tolist():
        keys = torch.nonzero(mask[p] & ~prefix).reshape(-1)
        assert bool((chunk_of[keys] <= chunk_of[p]).all()), f"position {p} sees a later chunk"
    return f"{len(stream)} positions"


CHECKS: List[tuple] = [
    ("gradient oracle", _gradient_oracle),
    ("ema exactness", _ema_exactness),
    ("gradient routing", _gradient_routing),
    ("masking statistics", _masking_statistics),
    ("grvq oracle", _grvq_oracle),
    ("flow sampler", _flow_sampler),
    ("metric oracles", _metric_oracles),
    ("attention structure", _attention_structure),
]


def _run(name: str, check: Callable[[], str]) -> CheckResult:
    started = time.perf_counter()
    try:
        detail = check() or ""
        passed = True
    except AssertionError as e:
        detail, passed = str(e) or "assertion failed", False
    except Exception as e:
        detail, passed = f"{type(e).__name__}: {e}", False
    elapsed = time.perf_counter() - started
    if not passed:
        logger.warning("selftest %s failed: %s", name, detail)
    return CheckResult(name, passed, detail, elapsed)


def run_selftest() -> List[CheckResult]:
    with use_dtype("float64"), torch.random.fork_rng(devices=[]):
        return [_run(name, check) for name, check in CHECKS]
