import math

import pytest
import torch

from promptner.prompt_classifier import (
    UndefinedMeanError,
    class_logits,
    classification_loss,
    classify,
    embed_span,
)
from promptner.episode_data import SpanAnnotation


def _gen(seed):
    return torch.Generator().manual_seed(seed)


def test_embed_span_means():
    H = torch.randn(4, 3, dtype=torch.float64, generator=_gen(0))
    assert torch.equal(embed_span(H, SpanAnnotation(2, 2)), H[2])
    assert torch.allclose(embed_span(H, SpanAnnotation(0, 1)), (H[0] + H[1]) / 2)
    u = embed_span(H, SpanAnnotation(1, 3))
    for c in range(3):
        ref = 0.0
        for k in range(1, 4):
            ref += float(H[k, c])
        assert abs(float(u[c]) - ref / 3) < 1e-7


def test_embed_span_bounds():
    with pytest.raises(IndexError):
        embed_span(torch.zeros(2, 3), SpanAnnotation(1, 2))


def test_zero_vector_is_uniform():
    p = classify(torch.randn(5, 4, generator=_gen(1)), torch.zeros(4))
    assert torch.allclose(p, torch.full((5,), 0.2))


def test_large_aligned_vector_wins():
    d = 4
    H_m = torch.eye(d)[:3]
    p = classify(H_m, 100 * math.sqrt(d) * H_m[1])
    assert float(p[1]) > 0.99


def test_sqrt_d_scaling_with_zero_padding():
    H_m = torch.randn(3, 4, dtype=torch.float64, generator=_gen(2))
    u = torch.randn(4, dtype=torch.float64, generator=_gen(3))
    pad = torch.zeros(3, 4, dtype=torch.float64)
    wide = class_logits(torch.cat([H_m, pad], 1), torch.cat([u, torch.zeros(4, dtype=torch.float64)]))
    assert torch.allclose(wide, class_logits(H_m, u) * math.sqrt(4 / 8), atol=1e-12)


def test_shift_and_temperature_invariance():
    H_m = torch.randn(4, 6, dtype=torch.float64, generator=_gen(4))
    u = torch.randn(6, dtype=torch.float64, generator=_gen(5))
    logits = class_logits(H_m, u)
    assert torch.allclose(classify(H_m, u), (logits + 3.0).softmax(-1))
    assert int(torch.argmax(classify(H_m, u))) == int(torch.argmax((H_m @ u / 0.37).softmax(-1)))


def test_loss_closed_forms():
    H_n = torch.zeros(2, 4, dtype=torch.float64)
    H_m = torch.randn(5, 4, dtype=torch.float64, generator=_gen(6))
    loss = classification_loss(H_m, H_n, [(SpanAnnotation(0, 1), 3)])
    assert float(loss) == pytest.approx(math.log(5), abs=1e-12)
    sharp = torch.zeros(3, 4, dtype=torch.float64)
    sharp[1, 0] = 1e4
    H_n = torch.zeros(1, 4, dtype=torch.float64)
    H_n[0, 0] = 1.0
    assert float(classification_loss(sharp, H_n, [(SpanAnnotation(0, 0), 1)])) == pytest.approx(0.0, abs=1e-9)


def test_loss_matches_hand_mean_nll():
    g = _gen(7)
    H_m = torch.randn(3, 4, dtype=torch.float64, generator=g)
    H_n = torch.randn(5, 4, dtype=torch.float64, generator=g)
    pairs = [(SpanAnnotation(0, 1), 1), (SpanAnnotation(3, 3), 2)]
    negs = [SpanAnnotation(2, 4)]
    total = 0.0
    for span, y in pairs + [(negs[0], 0)]:
        u = [sum(float(H_n[k, c]) for k in range(span.start, span.end + 1)) / (span.end - span.start + 1) for c in range(4)]
        logits = [sum(float(H_m[t, c]) * u[c] for c in range(4)) / 2.0 for t in range(3)]
        z = math.log(sum(math.exp(x) for x in logits))
        total += z - logits[y]
    assert abs(float(classification_loss(H_m, H_n, pairs, negs)) - total / 3) < 1e-7


def test_loss_needs_some_span():
    with pytest.raises(UndefinedMeanError):
        classification_loss(torch.zeros(2, 3), torch.zeros(2, 3), [], [])
