import random

import pytest
import torch

from oracles import breakdown_oracle, f1_oracle
from promptner.config import FinetuneConfig, ModelConfig, TrainConfig
from promptner.episode_data import sample_episode
from promptner.harness import (
    GRIDS,
    TABLE3,
    AblationError,
    DuplicatePredictionError,
    EvalResult,
    aggregate_seeds,
    error_breakdown,
    format_table,
    micro_f1,
    options_for,
    run_ablation,
    run_episodes,
)
from promptner.inference import InferenceOptions
from promptner.model import PromptNER
from promptner.synthetic import TRAIN_CLASSES, make_corpus
from promptner.tokenization import WordPieceTokenizer


def test_identical_predictions_score_one():
    gold = {"a": [(0, 1, "x")], "b": [(2, 2, "y")]}
    r = micro_f1(gold, gold)
    assert (r.micro_f1, r.precision, r.recall) == (1.0, 1.0, 1.0)


def test_hand_counted_half():
    pred = {"a": [(0, 1, "x"), (3, 3, "x")]}
    gold = {"a": [(0, 1, "x"), (5, 6, "y")]}
    r = micro_f1(pred, gold)
    assert (r.tp, r.fp, r.fn) == (1, 1, 1)
    assert (r.precision, r.recall, r.micro_f1) == (0.5, 0.5, 0.5)


def test_empty_predictions():
    r = micro_f1({}, {"a": [(0, 0, "x")]})
    assert (r.precision, r.recall, r.micro_f1) == (0.0, 0.0, 0.0)


def test_duplicates_rejected():
    with pytest.raises(DuplicatePredictionError):
        micro_f1({"a": [(0, 0, "x"), (0, 0, "x")]}, {})


def test_breakdown_definitions():
    e = error_breakdown({"a": [(0, 1, "person")]}, {"a": [(0, 1, "company")]})
    assert (e.fp_type_ratio, e.fp_span_ratio) == (1.0, 0.0)
    e = error_breakdown({"a": [(0, 2, "person")]}, {"a": [(0, 1, "person")]})
    assert (e.fp_span_ratio, e.fp_type_ratio) == (1.0, 0.0)
    e = error_breakdown({"a": [(0, 1, "person")]}, {"a": [(0, 1, "person")]})
    assert e.no_fp and (e.fp_span_ratio, e.fp_type_ratio) == (0.0, 0.0)


def _random_instance(rng):
    labels = ["x", "y", "z"]
    pred, gold = {}, {}
    for sid in range(rng.randint(1, 20)):
        cells = [(s, e) for s in range(6) for e in range(s, 6)]
        g = [(s, e, rng.choice(labels)) for s, e in rng.sample(cells, rng.randint(0, 3))]
        p = set()
        for _ in range(rng.randint(0, 4)):
            if g and rng.random() < 0.5:
                s, e, l = rng.choice(g)
                p.add((s, e, l if rng.random() < 0.6 else rng.choice(labels)))
            else:
                s, e = rng.choice(cells)
                p.add((s, e, rng.choice(labels)))
        gold[str(sid)], pred[str(sid)] = g, sorted(p)
    return pred, gold


def test_f1_and_breakdown_match_oracles():
    rng = random.Random(0)
    for _ in range(100):
        pred, gold = _random_instance(rng)
        r = micro_f1(pred, gold)
        tp, fp, fn, f1 = f1_oracle(pred, gold)
        assert (r.tp, r.fp, r.fn) == (tp, fp, fn)
        assert r.micro_f1 == pytest.approx(f1, abs=1e-12)
        e = error_breakdown(pred, gold)
        assert (e.fp_span_ratio, e.fp_type_ratio) == pytest.approx(breakdown_oracle(pred, gold))
        assert e.fp_span + e.fp_type == fp


def test_population_std():
    agg = aggregate_seeds([EvalResult(0.5, 0.5, 0.5), EvalResult(0.7, 0.7, 0.7)])
    assert agg.micro_f1 == pytest.approx(0.6)
    assert agg.std == pytest.approx(0.1)
    assert agg.per_seed == [0.5, 0.7]


def test_table3_rows():
    names = [n for n, _ in TABLE3]
    assert names == [
        "Ours",
        "w/o Fine-tune",
        "w/o Rerank",
        "w/o k-NN Search",
        "w/o Fine-tune and k-NN Search",
        "w/o Position-aware Biaffine",
        "w/o Fine-tune and RoPE",
    ]
    assert set(GRIDS) == {"table3", "rerank"}


@pytest.fixture(scope="module")
def small():
    corpus = make_corpus(TRAIN_CLASSES, 40, seed=0)
    tok = WordPieceTokenizer.build([s.words for s in corpus.sentences], min_freq=1)
    model = PromptNER(ModelConfig(d=16, layers=1, heads=2, h=8), tok)
    return model, [sample_episode(corpus, 2, 2, s) for s in range(2)]


def test_evaluation_leaves_model_untouched(small):
    model, eps = small
    before = {k: v.clone() for k, v in model.state_dict().items()}
    a = run_episodes(model, eps, InferenceOptions(), seed=1, fine_tune=True)
    b = run_episodes(model, eps, InferenceOptions(), seed=1, fine_tune=True)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])
    assert a.predictions == b.predictions and a.finetune_steps == b.finetune_steps
    assert set(a.gold) == {f"{e}:{j}" for e, ep in enumerate(eps) for j in range(len(ep.query))}


def test_ablation_requires_model(small):
    _, eps = small
    with pytest.raises(AblationError):
        run_ablation(None, TABLE3, eps, [1], InferenceOptions())


def test_ablation_table_shape(small):
    model, eps = small
    grid = [(n, ab) for n, ab in TABLE3 if not ab.fine_tune]
    rows, summary = run_ablation(model, grid, eps[:1], [1, 2], InferenceOptions())
    assert len(rows) == 2 * len(grid)
    assert list(summary) == [n for n, _ in grid]
    table = format_table(summary)
    assert all(n in table for n, _ in grid)


def test_shared_finetune_matches_separate_runs(small):
    model, eps = small
    grid = [(n, ab) for n, ab in TABLE3 if n in ("Ours", "w/o Rerank", "w/o Fine-tune")]
    ft, tcfg = FinetuneConfig(max_finetune_steps=3), TrainConfig()
    rows, _ = run_ablation(model, grid, eps[:1], [2], InferenceOptions(), ft, tcfg)
    for row, (_, ab) in zip(rows, grid):
        run = run_episodes(model, eps[:1], options_for(InferenceOptions(), ab), 2, ab.fine_tune, ft, tcfg)
        assert row.f1 == micro_f1(run.predictions, run.gold).micro_f1
