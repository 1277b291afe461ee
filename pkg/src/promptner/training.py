"""Episode training, support-only fine-tuning and the span contrastive loss."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from promptner.prompt_classifier import classification_loss, embed_spans
from promptner.config import FinetuneConfig, TrainConfig
from promptner.episode_data import Episode, EntityTypeSet, SpanAnnotation, TaggedSentence, tags_to_spans
from promptner.span_detector import extract_candidates, span_loss

log = logging.getLogger(__name__)

WARNINGS: Counter = Counter()


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class LossBreakdown:
    span: torch.Tensor
    cls: torch.Tensor
    cl: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.span + self.cls + self.cl

    def as_floats(self) -> dict[str, float]:
        parts = {"span": self.span, "class": self.cls, "cl": self.cl, "total": self.total}
        return {k: float(v.detach()) for k, v in parts.items()}


@dataclass
class ContrastiveBatch:
    """Gold span embeddings ``M`` with labels; anchors pair by label."""

    embeddings: torch.Tensor
    labels: list[str]

    def positives(self, i: int) -> list[int]:
        return [j for j, y in enumerate(self.labels) if j != i and y == self.labels[i]]

    def negatives(self, i: int) -> list[int]:
        return [j for j, y in enumerate(self.labels) if j != i and y != self.labels[i]]


def contrastive_loss(batch: ContrastiveBatch, scale: float | None = None) -> torch.Tensor:
    """``-sum_i log(sum_pos exp d(u_i,u_j) / sum_neg exp d(u_i,u_k))`` with
    ``d(u, v) = scale * u.v``. Anchors lacking a positive or a negative are skipped."""
    U = batch.embeddings
    if scale is None:
        scale = 1.0 / math.sqrt(U.shape[-1])
    sims = (U @ U.T) * scale
    terms = []
    for i in range(len(batch.labels)):
        pos, neg = batch.positives(i), batch.negatives(i)
        if not pos or not neg:
            continue
        terms.append(torch.logsumexp(sims[i, neg], 0) - torch.logsumexp(sims[i, pos], 0))
    if not terms:
        WARNINGS["contrastive_no_anchor"] += 1
        return U.new_zeros(())
    return torch.stack(terms).sum()


def lr_multiplier(step: int, max_steps: int, warmup_fraction: float) -> float:
    """Linear warmup to 1 then linear decay to 0 at ``max_steps``.

    ``step`` counts optimizer updates already taken.
    """
    warm = int(round(warmup_fraction * max_steps))
    if step < warm:
        return (step + 1) / warm
    return max(0.0, (max_steps - step) / max(1, max_steps - warm))


def make_optimizer(model, encoder_lr: float, decoder_lr: float, weight_decay: float) -> torch.optim.AdamW:
    groups = [
        {"params": model.encoder_parameters(), "lr": encoder_lr},
        {"params": model.decoder_parameters(), "lr": decoder_lr},
    ]
    return torch.optim.AdamW(groups, weight_decay=weight_decay)


def sentence_losses(
    model,
    sentences: Sequence[TaggedSentence],
    type_set: EntityTypeSet,
    k_shot: int,
    negatives_in_class_loss: bool = True,
    use_contrastive: bool = False,
    contrastive_scale: float | None = None,
    groups: Sequence[Sequence[int]] | None = None,
) -> LossBreakdown:
    """Summed ``L_span + L_class (+ L_CL)`` over the given sentences.

    ``groups`` partitions sentence indices into sets (support, query) over
    which the contrastive loss is computed separately.
    """
    outs = model([s.words for s in sentences], type_set)
    zero = outs[0].H_n.new_zeros(())
    l_span, l_cls = zero, zero
    gold_all = []
    for s, out in zip(sentences, outs):
        gold = tags_to_spans(s)
        gold_all.append(gold)
        ls = span_loss(out.scores, gold)
        pairs = [(g, type_set.index(g.label)) for g in gold]
        negs: list[SpanAnnotation] = []
        if negatives_in_class_loss:
            gold_keys = {g.key() for g in gold}
            negs = [c for c, _ in extract_candidates(out.scores, k_shot) if c.key() not in gold_keys]
        lc = classification_loss(out.H_m, out.H_n, pairs, negs) if pairs or negs else zero
        if not (torch.isfinite(ls) and torch.isfinite(lc)):
            raise NonFiniteLossError(
                f"non-finite loss on sentence {s.sid or ' '.join(s.words)!r}: span={float(ls)} class={float(lc)}"
            )
        l_span = l_span + ls
        l_cls = l_cls + lc
    l_cl = zero
    if use_contrastive:
        if groups is None:
            groups = [range(len(sentences))]
        twice = k_shot == 1
        for grp in groups:
            embs, labels = [], []
            for i in grp:
                if gold_all[i]:
                    embs.append(embed_spans(outs[i].H_n, gold_all[i]))
                    labels += [g.label for g in gold_all[i]]
            if twice and embs:
                # 1-shot: a second dropout-perturbed pass supplies positives
                idx = [i for i in grp if gold_all[i]]
                again = model.encode_class([model.prompt(sentences[i].words, type_set) for i in idx])
                for i, enc in zip(idx, again):
                    embs.append(embed_spans(enc.H_n, gold_all[i]))
                    labels += [g.label for g in gold_all[i]]
            if embs:
                l_cl = l_cl + contrastive_loss(ContrastiveBatch(torch.cat(embs), labels), contrastive_scale)
        if not torch.isfinite(l_cl):
            raise NonFiniteLossError("non-finite contrastive loss")
    return LossBreakdown(l_span, l_cls, l_cl)


class Trainer:
    """Owns the optimizer and LR schedule for one model (single writer)."""

    def __init__(self, model, cfg: TrainConfig, schedule: bool = True):
        self.model = model
        self.cfg = cfg
        self.optimizer = make_optimizer(model, cfg.encoder_lr, cfg.decoder_lr, cfg.weight_decay)
        self.base_lrs = [g["lr"] for g in self.optimizer.param_groups]
        self.schedule = schedule
        self.step_count = 0

    def current_multiplier(self) -> float:
        if not self.schedule:
            return 1.0
        return lr_multiplier(self.step_count, self.cfg.max_steps, self.cfg.warmup_fraction)

    def train_step(self, sentences: Sequence[TaggedSentence], type_set, k_shot, groups=None) -> LossBreakdown:
        self.model.train()
        losses = sentence_losses(
            self.model,
            sentences,
            type_set,
            k_shot,
            negatives_in_class_loss=self.cfg.negatives_in_class_loss,
            use_contrastive=self.cfg.use_contrastive,
            contrastive_scale=self.cfg.contrastive_scale,
            groups=groups,
        )
        mult = self.current_multiplier()
        for g, base in zip(self.optimizer.param_groups, self.base_lrs):
            g["lr"] = base * mult
        self.optimizer.zero_grad(set_to_none=True)
        losses.total.backward()
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(list(self.model.parameters()), self.cfg.grad_clip)
        self.optimizer.step()
        self.step_count += 1
        return losses


def train_step(trainer: Trainer, episode: Episode) -> LossBreakdown:
    """One update on one episode: support and query flattened into plain examples."""
    sents = list(episode.support) + list(episode.query)
    groups = [range(len(episode.support)), range(len(episode.support), len(sents))]
    return trainer.train_step(sents, episode.type_set, episode.k_shot, groups=groups)


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    dev_f1: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = 0
    best_f1: float | None = None


def train(
    model,
    episodes: Sequence[Episode],
    cfg: TrainConfig,
    dev_eval: Callable[[object], float] | None = None,
    progress: Callable[[int, LossBreakdown], None] | None = None,
) -> TrainResult:
    """Train for ``cfg.max_steps`` episodes; with ``dev_eval`` and ``eval_every``
    the parameters with the best validation F1 are restored at the end."""
    if not episodes:
        raise ValueError("no training episodes")
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    trainer = Trainer(model, cfg)
    result = TrainResult()
    order: list[int] = []
    best_state = None
    for step in range(cfg.max_steps):
        if not order:
            order = list(range(len(episodes)))
            rng.shuffle(order)
        losses = train_step(trainer, episodes[order.pop()])
        result.losses.append(float(losses.total.detach()))
        if progress:
            progress(step, losses)
        if dev_eval and cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or step + 1 == cfg.max_steps):
            f1 = dev_eval(model)
            result.dev_f1.append((step + 1, f1))
            if result.best_f1 is None or f1 > result.best_f1:
                result.best_f1, result.best_step = f1, step + 1
                best_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        result.best_step = cfg.max_steps
    return result


@dataclass
class FinetuneResult:
    steps: int
    final_loss: float
    reason: str  # "threshold" | "cap"
    losses: list[float] = field(default_factory=list)


def finetune_on_support(
    model,
    support: Sequence[TaggedSentence],
    type_set: EntityTypeSet,
    k_shot: int,
    cfg: FinetuneConfig,
    train_cfg: TrainConfig | None = None,
) -> FinetuneResult:
    """Optimize on the support set alone until the loss drops below the
    threshold or the step cap is reached, whichever fires first."""
    if not support:
        raise ValueError("empty support set")
    base = train_cfg or TrainConfig()
    tcfg = dataclasses.replace(
        base,
        encoder_lr=cfg.encoder_lr if cfg.encoder_lr is not None else base.encoder_lr,
        decoder_lr=cfg.decoder_lr if cfg.decoder_lr is not None else base.decoder_lr,
    )
    trainer = Trainer(model, tcfg, schedule=False)
    losses = []
    reason = "cap"
    for _ in range(cfg.max_finetune_steps):
        loss = float(trainer.train_step(support, type_set, k_shot).total.detach())
        losses.append(loss)
        if loss < cfg.loss_threshold:
            reason = "threshold"
            break
    model.eval()
    return FinetuneResult(len(losses), losses[-1], reason, losses)
