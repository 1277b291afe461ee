"""Episodic evaluation, error analysis and the ablation grid."""

from __future__ import annotations

import copy
import statistics
from dataclasses import asdict, astuple, dataclass, field
from typing import Iterable, Mapping, Sequence

import torch

from promptner.config import FinetuneConfig, TrainConfig
from promptner.episode_data import Episode, SpanAnnotation, tags_to_spans
from promptner.inference import InferenceOptions, Prediction, predict_episode
from promptner.training import finetune_on_support

SpanTriple = tuple[int, int, str]


class DuplicatePredictionError(ValueError):
    pass


class AblationError(RuntimeError):
    pass


@dataclass
class EvalResult:
    micro_f1: float
    precision: float
    recall: float
    per_seed: list[float] = field(default_factory=list)
    std: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0


@dataclass
class ErrorBreakdown:
    fp_span_ratio: float
    fp_type_ratio: float
    fp_span: int = 0
    fp_type: int = 0

    @property
    def no_fp(self) -> bool:
        return self.fp_span + self.fp_type == 0


def _as_triple(x) -> SpanTriple:
    if isinstance(x, Prediction):
        x = x.span
    if isinstance(x, SpanAnnotation):
        return (x.start, x.end, x.label)
    s, e, l = x
    return (int(s), int(e), l)


def _as_sets(spans: Mapping[str, Iterable], strict: bool) -> dict[str, set[SpanTriple]]:
    out = {}
    for sid, items in spans.items():
        triples = [_as_triple(x) for x in items]
        if strict and len(set(triples)) != len(triples):
            raise DuplicatePredictionError(f"duplicate prediction in sentence {sid!r}")
        out[sid] = set(triples)
    return out


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def micro_f1(predictions: Mapping[str, Iterable], gold: Mapping[str, Iterable]) -> EvalResult:
    """Exact (start, end, label) matching, counts pooled over all sentences."""
    pred, ref = _as_sets(predictions, strict=True), _as_sets(gold, strict=False)
    tp = fp = fn = 0
    for sid in set(pred) | set(ref):
        ps, gs = pred.get(sid, set()), ref.get(sid, set())
        tp += len(ps & gs)
        fp += len(ps - gs)
        fn += len(gs - ps)
    p, r, f = prf(tp, fp, fn)
    return EvalResult(f, p, r, per_seed=[f], std=0.0, tp=tp, fp=fp, fn=fn)


def aggregate_seeds(results: Sequence[EvalResult]) -> EvalResult:
    """Mean over seeds with population standard deviation of F1."""
    f1s = [r.micro_f1 for r in results]
    return EvalResult(
        micro_f1=statistics.fmean(f1s),
        precision=statistics.fmean(r.precision for r in results),
        recall=statistics.fmean(r.recall for r in results),
        per_seed=f1s,
        std=statistics.pstdev(f1s) if len(f1s) > 1 else 0.0,
        tp=sum(r.tp for r in results),
        fp=sum(r.fp for r in results),
        fn=sum(r.fn for r in results),
    )


def error_breakdown(predictions: Mapping[str, Iterable], gold: Mapping[str, Iterable]) -> ErrorBreakdown:
    """Split false positives into wrong-type (boundaries match a gold span)
    and wrong-span (no gold span with those boundaries)."""
    pred, ref = _as_sets(predictions, strict=True), _as_sets(gold, strict=False)
    n_span = n_type = 0
    for sid, ps in pred.items():
        gs = ref.get(sid, set())
        bounds = {(s, e) for s, e, _ in gs}
        for t in ps - gs:
            if (t[0], t[1]) in bounds:
                n_type += 1
            else:
                n_span += 1
    total = n_span + n_type
    if not total:
        return ErrorBreakdown(0.0, 0.0, 0, 0)
    return ErrorBreakdown(n_span / total, n_type / total, n_span, n_type)


# ---------------------------------------------------------------------------
# episodic evaluation


@dataclass
class EpisodeRun:
    predictions: dict[str, list[Prediction]]
    gold: dict[str, list[SpanAnnotation]]
    finetune_steps: list[int]


def gold_of(episodes: Sequence[Episode]) -> dict[str, list[SpanAnnotation]]:
    return {f"{e}:{j}": tags_to_spans(s) for e, ep in enumerate(episodes) for j, s in enumerate(ep.query)}


def _finetuned(model, ep: Episode, e: int, seed: int, finetune_cfg, train_cfg):
    work = copy.deepcopy(model)
    torch.manual_seed(seed * 1_000_003 + e)
    res = finetune_on_support(work, ep.support, ep.type_set, ep.k_shot, finetune_cfg or FinetuneConfig(), train_cfg)
    return work, res.steps


def run_episodes(
    model,
    episodes: Sequence[Episode],
    opts: InferenceOptions,
    seed: int,
    fine_tune: bool = True,
    finetune_cfg: FinetuneConfig | None = None,
    train_cfg: TrainConfig | None = None,
) -> EpisodeRun:
    """Predict every query set; each episode fine-tunes its own clone so the
    caller's model is never modified."""
    return _run_shared(model, episodes, [opts], seed, fine_tune, finetune_cfg, train_cfg)[0]


def _run_shared(model, episodes, opts_list, seed, fine_tune, finetune_cfg, train_cfg) -> list[EpisodeRun]:
    """One fine-tuned clone per episode, scored under each of ``opts_list``."""
    preds: list[dict[str, list[Prediction]]] = [{} for _ in opts_list]
    steps = []
    for e, ep in enumerate(episodes):
        if fine_tune:
            work, n = _finetuned(model, ep, e, seed, finetune_cfg, train_cfg)
        else:
            work, n = model, 0
        steps.append(n)
        for out, opts in zip(preds, opts_list):
            for j, sent_preds in enumerate(predict_episode(work, ep, opts)):
                out[f"{e}:{j}"] = sent_preds
    gold = gold_of(episodes)
    return [EpisodeRun(p, gold, list(steps)) for p in preds]


# ---------------------------------------------------------------------------
# ablation


@dataclass(frozen=True)
class AblationConfig:
    fine_tune: bool = True
    rerank: bool = True
    knn_search: bool = True
    rope: bool = True
    biaffine: bool = True
    contrastive: bool | None = None  # None -> keep the training setting
    two_encoders: bool | None = None  # must match the checkpoint when set
    negatives_in_class_loss: bool | None = None


TABLE3: list[tuple[str, AblationConfig]] = [
    ("Ours", AblationConfig()),
    ("w/o Fine-tune", AblationConfig(fine_tune=False)),
    ("w/o Rerank", AblationConfig(rerank=False)),
    ("w/o k-NN Search", AblationConfig(knn_search=False)),
    ("w/o Fine-tune and k-NN Search", AblationConfig(fine_tune=False, knn_search=False)),
    # without span scores there is nothing to rerank with, so this row matches
    # "w/o Position-aware Biaffine and Rerank" in the rerank grid
    ("w/o Position-aware Biaffine", AblationConfig(biaffine=False, rerank=False)),
    ("w/o Fine-tune and RoPE", AblationConfig(fine_tune=False, rope=False)),
]

RERANK: list[tuple[str, AblationConfig]] = [
    ("Ours", AblationConfig()),
    ("w/o Rerank", AblationConfig(rerank=False)),
    ("w/o Position-aware Biaffine and Rerank", AblationConfig(biaffine=False, rerank=False)),
    ("w/o Position-aware Biaffine but Rerank", AblationConfig(biaffine=False, rerank=True)),
]

GRIDS = {"table3": TABLE3, "rerank": RERANK}


def options_for(base: InferenceOptions, ab: AblationConfig) -> InferenceOptions:
    opts = copy.copy(base)
    opts.rerank, opts.knn_search, opts.rope, opts.biaffine = ab.rerank, ab.knn_search, ab.rope, ab.biaffine
    return opts


@dataclass
class AblationRow:
    variant: str
    seed: int
    p: float
    r: float
    f1: float
    fp_span: float
    fp_type: float
    steps: float


def run_ablation(
    model,
    grid: Sequence[tuple[str, AblationConfig]],
    episodes: Sequence[Episode],
    seeds: Sequence[int],
    base_opts: InferenceOptions,
    finetune_cfg: FinetuneConfig | None = None,
    train_cfg: TrainConfig | None = None,
) -> tuple[list[AblationRow], dict[str, EvalResult]]:
    if model is None:
        raise AblationError("no trained checkpoint supplied")
    train_cfg = train_cfg or TrainConfig()
    # variants that fine-tune identically share one fine-tuned clone per episode
    groups: dict[tuple, tuple[TrainConfig, list[tuple[str, InferenceOptions]]]] = {}
    for name, ab in grid:
        if ab.two_encoders is not None and ab.two_encoders != model.cfg.two_encoders:
            raise AblationError(f"variant {name!r} needs two_encoders={ab.two_encoders}; retrain to compare")
        tcfg = copy.copy(train_cfg)
        if ab.contrastive is not None:
            tcfg.use_contrastive = ab.contrastive
        if ab.negatives_in_class_loss is not None:
            tcfg.negatives_in_class_loss = ab.negatives_in_class_loss
        _, members = groups.setdefault((ab.fine_tune, astuple(tcfg)), (tcfg, []))
        members.append((name, options_for(base_opts, ab)))
    results: dict[tuple[str, int], EpisodeRun] = {}
    for (fine_tune, _), (tcfg, members) in groups.items():
        for seed in seeds:
            runs = _run_shared(model, episodes, [o for _, o in members], seed, fine_tune, finetune_cfg, tcfg)
            for (name, _), run in zip(members, runs):
                results[(name, seed)] = run
    rows: list[AblationRow] = []
    summary: dict[str, EvalResult] = {}
    for name, _ in grid:
        per_seed = []
        for seed in seeds:
            run = results[(name, seed)]
            res = micro_f1(run.predictions, run.gold)
            err = error_breakdown(run.predictions, run.gold)
            mean_steps = statistics.fmean(run.finetune_steps) if run.finetune_steps else 0.0
            rows.append(AblationRow(name, seed, res.precision, res.recall, res.micro_f1, err.fp_span_ratio, err.fp_type_ratio, mean_steps))
            per_seed.append(res)
        summary[name] = aggregate_seeds(per_seed)
    return rows, summary


def format_table(summary: Mapping[str, EvalResult]) -> str:
    width = max(len(k) for k in summary) if summary else 10
    lines = [f"{'Variant':<{width}}  {'F1':>7}  {'std':>6}  {'P':>7}  {'R':>7}"]
    lines.append("-" * len(lines[0]))
    for name, r in summary.items():
        lines.append(
            f"{name:<{width}}  {100 * r.micro_f1:7.2f}  {100 * r.std:6.2f}  {100 * r.precision:7.2f}  {100 * r.recall:7.2f}"
        )
    return "\n".join(lines)


def rows_as_dicts(rows: Iterable[AblationRow]) -> list[dict]:
    return [asdict(r) for r in rows]
