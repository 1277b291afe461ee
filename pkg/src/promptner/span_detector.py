"""Position-aware biaffine span scoring.

``R[i, j] = LeakyReLU(h_i W_s)^T U LeakyReLU(h_j W_e) + <rot_i(h_i W_p), rot_j(h_j W_p)>``
for word positions ``i <= j``; cells below the diagonal are masked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from promptner.episode_data import SpanAnnotation

LEAKY_SLOPE = 0.01
ROPE_BASE = 10000.0


class SpanContractError(ValueError):
    pass


def rope_angles(pos: torch.Tensor, h: int, base: float = ROPE_BASE, dtype=torch.float32) -> torch.Tensor:
    if h % 2:
        raise ValueError(f"rotary width must be even, got {h}")
    theta = base ** (-torch.arange(0, h, 2, dtype=torch.float64) / h)
    return (pos.to(torch.float64)[..., None] * theta).to(dtype)


def rope_rotate(v: torch.Tensor, pos, base: float = ROPE_BASE) -> torch.Tensor:
    """Rotate consecutive coordinate pairs of ``v`` (..., h) by ``pos * theta_t``.

    ``pos`` broadcasts against the leading dimensions of ``v``.
    """
    h = v.shape[-1]
    pos = torch.as_tensor(pos)
    ang = rope_angles(pos, h, base, dtype=v.dtype)
    cos, sin = ang.cos(), ang.sin()
    even, odd = v[..., 0::2], v[..., 1::2]
    out = torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1)
    return out.flatten(-2)


@dataclass
class ScoreMatrix:
    R: torch.Tensor
    mask: torch.Tensor  # True where i <= j

    @property
    def n(self) -> int:
        return self.R.shape[0]

    def ranked(self) -> torch.Tensor:
        return self.R.masked_fill(~self.mask, float("-inf"))


def upper_mask(n: int) -> torch.Tensor:
    return torch.ones(n, n, dtype=torch.bool).triu()


class BiaffineScorer(nn.Module):
    def __init__(self, d: int, h: int, rope_base: float = ROPE_BASE, slope: float = LEAKY_SLOPE, seed: int = 0):
        super().__init__()
        if h % 2:
            raise ValueError(f"hidden width h must be even for the rotary term, got {h}")
        self.d, self.h = d, h
        self.rope_base, self.slope = rope_base, slope
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.W_s = nn.Parameter(torch.randn(d, h) / math.sqrt(d))
            self.W_e = nn.Parameter(torch.randn(d, h) / math.sqrt(d))
            self.W_p = nn.Parameter(torch.randn(d, h) / math.sqrt(d))
            self.U = nn.Parameter(torch.randn(h, h) / math.sqrt(h))

    def forward(self, H_n: torch.Tensor, use_rope: bool = True) -> ScoreMatrix:
        return score_spans(H_n, self, use_rope=use_rope)


def score_spans(H_n: torch.Tensor, params: BiaffineScorer, use_rope: bool = True, offset: int = 0) -> ScoreMatrix:
    """Vectorized score matrix for one sentence. ``use_rope=False`` drops the
    rotary term entirely; ``offset`` shifts every position (testing aid)."""
    if H_n.dim() != 2 or H_n.shape[1] != params.W_s.shape[0]:
        raise SpanContractError(
            f"H_n of shape {tuple(H_n.shape)} does not match projection width {params.W_s.shape[0]}"
        )
    n = H_n.shape[0]
    act = nn.functional.leaky_relu
    hs = act(H_n @ params.W_s, params.slope)
    he = act(H_n @ params.W_e, params.slope)
    R = hs @ params.U @ he.T
    if use_rope:
        pos = torch.arange(n) + offset
        rot = rope_rotate(H_n @ params.W_p, pos, params.rope_base)
        R = R + rot @ rot.T
    return ScoreMatrix(R, upper_mask(n))


def _check_gold(gold: Sequence[SpanAnnotation], n: int) -> None:
    for s in gold:
        if not 0 <= s.start <= s.end < n:
            raise SpanContractError(f"gold span ({s.start}, {s.end}) outside sentence of {n} words")


def span_loss(R: ScoreMatrix | torch.Tensor, gold: Sequence[SpanAnnotation]) -> torch.Tensor:
    """Class-imbalance span loss ``log(1+sum e^{-r_pos}) + log(1+sum e^{r_neg})``."""
    if not isinstance(R, ScoreMatrix):
        R = ScoreMatrix(R, upper_mask(R.shape[0]))
    n = R.n
    _check_gold(gold, n)
    pos = torch.zeros(n, n, dtype=torch.bool)
    for s in gold:
        pos[s.start, s.end] = True
    neg = R.mask & ~pos
    zero = R.R.new_zeros(1)
    # the prepended zero is the "1 +" term; an empty set reduces to log(1) = 0
    l_pos = torch.logsumexp(torch.cat([zero, -R.R[pos]]), 0)
    l_neg = torch.logsumexp(torch.cat([zero, R.R[neg]]), 0)
    return l_pos + l_neg


def extract_candidates(R: ScoreMatrix, k_shot: int) -> list[tuple[SpanAnnotation, float]]:
    """Top ``3 * k_shot`` upper-triangle cells, descending score, ties by (start, end)."""
    if k_shot < 1:
        raise ValueError("k_shot must be >= 1")
    n = R.n
    idx = torch.triu_indices(n, n)
    scores = R.R.detach()[idx[0], idx[1]].tolist()
    cells = sorted(zip(scores, idx[0].tolist(), idx[1].tolist()), key=lambda c: (-c[0], c[1], c[2]))
    top = cells[: min(3 * k_shot, len(cells))]
    return [(SpanAnnotation(i, j), s) for s, i, j in top]


def all_candidates(R: ScoreMatrix) -> list[tuple[SpanAnnotation, float]]:
    """Every upper-triangle cell; used when the detector is ablated away."""
    n = R.n
    return [(SpanAnnotation(i, j), float(R.R[i, j])) for i in range(n) for j in range(i, n)]
