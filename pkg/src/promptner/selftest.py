"""Quick randomized property checks run by ``promptner selftest``."""

from __future__ import annotations

import random

import torch

from promptner.episode_data import EntityTypeSet, SpanAnnotation
from promptner.inference import GoldenEntityBank, RerankWeights, knn_distribution, rerank
from promptner.span_detector import rope_rotate, span_loss


def _rope_relative(trials: int, rng: random.Random) -> str:
    g = torch.Generator().manual_seed(rng.randrange(2**31))
    worst = 0.0
    for _ in range(trials):
        h = rng.choice([8, 32, 64])
        u, v = torch.randn(h, generator=g, dtype=torch.float64), torch.randn(h, generator=g, dtype=torch.float64)
        i, j = rng.randrange(64), rng.randrange(64)
        lhs = rope_rotate(u, i) @ rope_rotate(v, j)
        rhs = u @ rope_rotate(v, j - i)
        worst = max(worst, abs(float(lhs - rhs)))
    assert worst < 1e-5, f"max error {worst:.2e}"
    return f"max error {worst:.1e}"


def _knn_contract(trials: int, rng: random.Random) -> str:
    types = EntityTypeSet.from_entity_types(["a", "b", "c"])
    for _ in range(trials):
        n = rng.randint(1, 6)
        bank = GoldenEntityBank(torch.randn(n, 4, dtype=torch.float64), [rng.choice("abc") for _ in range(n)])
        u = torch.randn(4, dtype=torch.float64)
        for k in range(1, n + 3):
            p = knn_distribution(u, bank, k, types)
            assert float(p[0]) == 0.0, "none got mass"
            assert abs(float(p.sum()) - 1.0) < 1e-9, "does not sum to 1"
    return ""


def _rerank_bonus(trials: int, rng: random.Random) -> str:
    for _ in range(trials):
        p = torch.softmax(torch.randn(4), 0)
        q = torch.softmax(torch.randn(4), 0)
        w = RerankWeights.from_gamma(rng.random())
        out = rerank(rng.uniform(-5, 5), p, q, w)
        mix = w.alpha * p + w.beta * q
        assert int(torch.argmax(out[1:])) == int(torch.argmax(mix[1:])), "bonus changed entity argmax"
    return ""


def _span_loss_grad(trials: int, rng: random.Random) -> str:
    for _ in range(trials):
        n = rng.randint(1, 5)
        R = torch.randn(n, n, dtype=torch.float64, requires_grad=True)
        s = rng.randrange(n)
        gold = [SpanAnnotation(s, rng.randrange(s, n))]
        assert torch.autograd.gradcheck(lambda r: span_loss(r, gold), (R,), eps=1e-6, atol=1e-6)
    return ""


CHECKS = [
    ("rope relative position", _rope_relative),
    ("knn contract", _knn_contract),
    ("rerank bonus keeps entity argmax", _rerank_bonus),
    ("span loss gradient", _span_loss_grad),
]


def run_selftest(trials: int = 50, seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = random.Random(seed)
    results = []
    for name, check in CHECKS:
        try:
            results.append((name, True, check(trials, rng)))
        except AssertionError as exc:
            results.append((name, False, str(exc)))
    return results
