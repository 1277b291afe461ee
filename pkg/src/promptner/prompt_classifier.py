"""Prompt-based span classification against contextual label-word embeddings."""

from __future__ import annotations

import math
from typing import Sequence

import torch

from promptner.episode_data import SpanAnnotation


class UndefinedMeanError(ValueError):
    pass


def embed_span(H_n: torch.Tensor, span: SpanAnnotation) -> torch.Tensor:
    n = H_n.shape[0]
    if not 0 <= span.start <= span.end < n:
        raise IndexError(f"span ({span.start}, {span.end}) outside sentence of {n} words")
    return H_n[span.start : span.end + 1].mean(0)


def embed_spans(H_n: torch.Tensor, spans: Sequence[SpanAnnotation]) -> torch.Tensor:
    if not spans:
        return H_n.new_zeros(0, H_n.shape[1])
    return torch.stack([embed_span(H_n, s) for s in spans])


def class_logits(H_m: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """``H_m u / sqrt(d)``; ``u`` may be a single vector or a (k, d) batch."""
    if H_m.shape[-1] != u.shape[-1]:
        raise ValueError(f"width mismatch: H_m {tuple(H_m.shape)} vs u {tuple(u.shape)}")
    return (u @ H_m.T) / math.sqrt(H_m.shape[-1])


def classify(H_m: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    return class_logits(H_m, u).softmax(-1)


def classification_loss(
    H_m: torch.Tensor,
    H_n: torch.Tensor,
    gold_pairs: Sequence[tuple[SpanAnnotation, int]],
    negatives: Sequence[SpanAnnotation] = (),
) -> torch.Tensor:
    """Mean negative log-likelihood; negatives are targeted at class 0 ("none")."""
    spans = [s for s, _ in gold_pairs] + list(negatives)
    if not spans:
        raise UndefinedMeanError("classification loss over zero spans")
    targets = torch.tensor([y for _, y in gold_pairs] + [0] * len(negatives), dtype=torch.long)
    logits = class_logits(H_m, embed_spans(H_n, spans))
    return torch.nn.functional.cross_entropy(logits, targets)
