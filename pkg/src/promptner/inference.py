"""kNN-augmented rerank inference over detector candidates.

Per candidate span the final score vector is
``alpha * p_prompt + beta * p_knn + gamma * p_det`` where ``p_det`` reads the
detector score as a two-way distribution: ``sigmoid(R[s, e])`` for every
entity class and ``1 - sigmoid(R[s, e])`` for ``none``. Candidates whose
final argmax is ``none`` are dropped.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch

from promptner.prompt_classifier import classify, embed_spans
from promptner.episode_data import EntityTypeSet, Episode, SpanAnnotation, tags_to_spans
from promptner.span_detector import all_candidates, extract_candidates


class EmptyBankError(ValueError):
    pass


@dataclass
class GoldenEntityBank:
    U: torch.Tensor  # (n_g, d)
    labels: list[str]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class RerankWeights:
    gamma: float
    alpha: float
    beta: float

    @classmethod
    def from_gamma(cls, gamma: float) -> "RerankWeights":
        return cls(gamma, 0.35 * (1 - gamma), 0.65 * (1 - gamma))


@dataclass(frozen=True)
class Prediction:
    span: SpanAnnotation
    score: float

    @property
    def label(self) -> str:
        return self.span.label


@dataclass
class InferenceOptions:
    weights: RerankWeights = field(default_factory=lambda: RerankWeights.from_gamma(0.7))
    k_knn: int | None = None
    rerank: bool = True
    knn_search: bool = True
    biaffine: bool = True
    rope: bool = True
    bonus_scope: str = "binary"


def build_bank(support: Iterable[tuple[torch.Tensor, Sequence[SpanAnnotation]]]) -> GoldenEntityBank:
    """One row per gold mention: sentence order, then span order."""
    rows, labels = [], []
    for H_n, spans in support:
        spans = list(spans)
        if spans:
            rows.append(embed_spans(H_n, spans))
            labels.extend(s.label for s in spans)
    if not labels:
        raise EmptyBankError("support set has no gold mentions")
    return GoldenEntityBank(torch.cat(rows), labels)


def knn_distribution(u: torch.Tensor, bank: GoldenEntityBank, k: int, type_set: EntityTypeSet) -> torch.Tensor:
    """Label distribution from the top-``k`` most similar bank rows.

    Classes never retrieved get exactly 0. Per-class similarity sums are
    shifted up by their minimum when negative, then normalized; if all mass
    is zero the retrieved classes share it uniformly.
    """
    if len(bank) == 0:
        raise EmptyBankError("empty golden entity bank")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, len(bank))
    sims = (bank.U @ u) / math.sqrt(u.shape[-1])
    # stable order so equal similarities resolve to the lower row index
    order = sorted(range(len(bank)), key=lambda j: (-float(sims[j]), j))[:k]
    m = len(type_set)
    mass = torch.zeros(m, dtype=sims.dtype)
    hit = torch.zeros(m, dtype=torch.bool)
    for j in order:
        t = type_set.index(bank.labels[j])
        mass[t] = mass[t] + sims[j]
        hit[t] = True
    lo = mass[hit].min()
    if lo < 0:
        mass = torch.where(hit, mass - lo, mass)
    total = mass.sum()
    if total <= 0:
        return hit.to(sims.dtype) / hit.sum()
    return mass / total


def rerank(
    span_score: float,
    p_prompt: torch.Tensor,
    p_knn: torch.Tensor,
    w: RerankWeights,
    bonus_scope: str = "binary",
) -> torch.Tensor:
    """Weighted sum of the prompt, kNN and detector distributions.

    ``binary`` treats ``sigmoid(span_score)`` as P(entity) and gives none the
    complement; ``entity`` adds the bonus to entity classes only; ``all`` adds
    it to every class, which cannot change the argmax.
    """
    sig = 1.0 / (1.0 + math.exp(-span_score)) if span_score > -700 else 0.0
    bonus = w.gamma * sig
    out = w.alpha * p_prompt + w.beta * p_knn
    if bonus_scope == "entity":
        out = out.clone()
        out[1:] = out[1:] + bonus
    elif bonus_scope == "binary":
        # the detector as a two-way distribution: sig for entities, 1 - sig for none
        out = out.clone()
        out[1:] = out[1:] + bonus
        out[0] = out[0] + w.gamma * (1.0 - sig)
    elif bonus_scope == "all":
        out = out + bonus
    else:
        raise ValueError(f"unknown bonus scope {bonus_scope!r}")
    return out


def final_scores(span_score, p_prompt, p_knn, opts: InferenceOptions) -> torch.Tensor:
    """Score vector for one candidate under the ablation switches."""
    w = opts.weights
    if not opts.knn_search:
        w = RerankWeights(w.gamma, w.alpha + w.beta, 0.0)
    if not opts.biaffine:
        # without the detector there is no span score to add
        w = RerankWeights(0.0, w.alpha, w.beta)
    if not opts.rerank:
        mix = w.alpha * p_prompt + w.beta * p_knn
        return mix / (w.alpha + w.beta)
    return rerank(span_score, p_prompt, p_knn, w, opts.bonus_scope)


def decode_flat(scored: Iterable[Prediction]) -> list[Prediction]:
    """Greedy non-overlapping selection by descending score, output by start."""
    kept: list[Prediction] = []
    taken: set[int] = set()
    for p in sorted(scored, key=lambda p: (-p.score, p.span.start, p.span.end)):
        cells = set(range(p.span.start, p.span.end + 1))
        if cells & taken:
            continue
        kept.append(p)
        taken |= cells
    return sorted(kept, key=lambda p: (p.span.start, p.span.end))


@dataclass
class EpisodeContext:
    type_set: EntityTypeSet
    k_shot: int
    bank: GoldenEntityBank | None


def build_context(model, episode: Episode) -> EpisodeContext:
    with torch.no_grad():
        outs = model([s.words for s in episode.support], episode.type_set)
    bank = build_bank((o.H_n, tags_to_spans(s)) for o, s in zip(outs, episode.support))
    return EpisodeContext(episode.type_set, episode.k_shot, bank)


def _predict_from_output(out, ctx: EpisodeContext, opts: InferenceOptions) -> list[Prediction]:
    cands = extract_candidates(out.scores, ctx.k_shot) if opts.biaffine else all_candidates(out.scores)
    if not cands:
        return []
    spans = [c for c, _ in cands]
    U = embed_spans(out.H_n, spans)
    p_prompt = classify(out.H_m, U)
    k = opts.k_knn or ctx.k_shot
    scored = []
    for i, (span, r) in enumerate(cands):
        if opts.knn_search and ctx.bank is not None:
            p_knn = knn_distribution(U[i], ctx.bank, k, ctx.type_set)
        else:
            p_knn = torch.zeros_like(p_prompt[i])
        final = final_scores(r, p_prompt[i], p_knn, opts)
        best = int(torch.argmax(final))
        if best == 0:
            continue
        label = ctx.type_set.types[best]
        scored.append(Prediction(SpanAnnotation(span.start, span.end, label), float(final[best])))
    return decode_flat(scored)


def predict_sentence(model, words: Sequence[str], ctx: EpisodeContext, opts: InferenceOptions) -> list[Prediction]:
    return predict_sentences(model, [words], ctx, opts)[0]


def predict_sentences(model, sentences, ctx: EpisodeContext, opts: InferenceOptions) -> list[list[Prediction]]:
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            outs = model([list(w) for w in sentences], ctx.type_set, use_rope=opts.rope)
            return [_predict_from_output(o, ctx, opts) for o in outs]
    finally:
        model.train(was_training)


def predict_episode(model, episode: Episode, opts: InferenceOptions) -> list[list[Prediction]]:
    was_training = model.training
    model.eval()
    try:
        ctx = build_context(model, episode)
        return predict_sentences(model, [s.words for s in episode.query], ctx, opts)
    finally:
        model.train(was_training)


def write_predictions(records: Iterable[tuple[str, Sequence[Prediction]]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid, preds in records:
            spans = [
                {"start": p.span.start, "end": p.span.end, "label": p.label, "score": p.score} for p in preds
            ]
            fh.write(json.dumps({"sentence_id": sid, "spans": spans}) + "\n")


def read_predictions(path: str | Path) -> dict[str, list[Prediction]]:
    out: dict[str, list[Prediction]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            out[obj["sentence_id"]] = [
                Prediction(SpanAnnotation(s["start"], s["end"], s["label"]), float(s.get("score", 0.0)))
                for s in obj["spans"]
            ]
    return out
