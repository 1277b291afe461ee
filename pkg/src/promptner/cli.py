"""Command-line entry point: ``promptner <subcommand> ...``.

Every subcommand accepts ``--config file.toml`` plus repeated
``--set section.key=value`` overrides, prints a human-readable summary and
writes machine-readable JSON into ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from promptner import episode_data as ed
from promptner.config import RunConfig, dump_toml, load_config
from promptner.inference import InferenceOptions, RerankWeights, read_predictions, write_predictions
from promptner.tokenization import WordPieceTokenizer

log = logging.getLogger("promptner")


class UsageError(Exception):
    pass


def _seeds(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc


def _deterministic() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def inference_options(cfg: RunConfig) -> InferenceOptions:
    inf = cfg.inference
    base = RerankWeights.from_gamma(inf.gamma)
    weights = RerankWeights(
        inf.gamma,
        inf.alpha if inf.alpha is not None else base.alpha,
        inf.beta if inf.beta is not None else base.beta,
    )
    return InferenceOptions(weights=weights, k_knn=inf.k_knn, bonus_scope=inf.bonus_scope)


def _load_run_config(args) -> RunConfig:
    return load_config(args.config, args.set or [])


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from promptner.synthetic import desk_config, desk_episodes

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = desk_episodes(seed=args.seed, n_way=args.n_way, k_shot=args.k_shot,
                         train_sentences=args.train_sentences, train_episodes=args.train_episodes)
    ed.write_column_bio(data["corpus"], out / "train.txt")
    for split in ("train", "dev", "held", "novel"):
        ed.write_episodes(data[split], out / f"{split}.jsonl")
    cfg = desk_config()
    if args.config or args.set:
        cfg = _load_run_config(args)
    (out / "config.toml").write_text(dump_toml(cfg), encoding="utf-8")
    counts = {split: len(data[split]) for split in ("train", "dev", "held", "novel")}
    print(f"wrote synthetic corpus and episodes {counts} to {out}")
    return 0


def cmd_sample(args) -> int:
    corpus = ed.load_corpus(args.corpus, args.format)
    if not isinstance(corpus, ed.Corpus):
        raise UsageError("sample needs a column-bio corpus")
    episodes = ed.sample_episodes(corpus, args.n_way, args.k_shot, args.count, seed=args.seed)
    reports = [ed.validate_episode(ep) for ep in episodes]
    ed.write_episodes(episodes, args.out)
    summary = {"episodes": len(episodes), "valid": sum(r.ok for r in reports), "out": str(args.out)}
    print(json.dumps(summary))
    return 0


def cmd_train(args) -> int:
    from promptner.checkpoint import save_checkpoint
    from promptner.harness import micro_f1, run_episodes
    from promptner.model import PromptNER
    from promptner.training import train

    _deterministic()
    cfg = _load_run_config(args)
    episodes = ed.read_episodes(args.episodes)
    dev = ed.read_episodes(args.dev) if args.dev else []
    tokenizer = None
    if cfg.model.backend == "tiny":
        sents = [s.words for ep in episodes for s in ep.support + ep.query]
        type_words = {t for ep in episodes for t in ep.type_set.types}
        tokenizer = WordPieceTokenizer.build(sents, min_freq=cfg.model.vocab_min_freq, extra_words=sorted(type_words))
    torch.manual_seed(cfg.train.seed)
    model = PromptNER(cfg.model, tokenizer)
    opts = inference_options(cfg)

    def dev_eval(m) -> float:
        run = run_episodes(m, dev, opts, seed=cfg.train.seed, fine_tune=False)
        return micro_f1(run.predictions, run.gold).micro_f1

    def progress(step, losses):
        if args.verbose and (step % 50 == 0 or step + 1 == cfg.train.max_steps):
            print(f"step {step:5d}  " + "  ".join(f"{k}={v:.4f}" for k, v in losses.as_floats().items()))

    result = train(model, episodes, cfg.train, dev_eval=dev_eval if dev else None, progress=progress)
    save_checkpoint(model, args.out, cfg, step=result.best_step, seed=cfg.train.seed)
    _write_json(Path(args.out) / "train_log.json", {"losses": result.losses, "dev_f1": result.dev_f1, "best_step": result.best_step})
    print(f"trained {cfg.train.max_steps} steps; final loss {result.losses[-1]:.4f}; checkpoint -> {args.out}")
    return 0


def _eval_config(args, meta_cfg: RunConfig) -> RunConfig:
    if args.config or args.set:
        cfg = _load_run_config(args)
        cfg.model = meta_cfg.model
        return cfg
    return meta_cfg


def cmd_eval(args) -> int:
    from promptner.checkpoint import load_checkpoint
    from promptner.harness import aggregate_seeds, error_breakdown, micro_f1, run_episodes

    _deterministic()
    model, ckpt_cfg, _ = load_checkpoint(args.checkpoint)
    cfg = _eval_config(args, ckpt_cfg)
    episodes = ed.read_episodes(args.episodes)
    opts = inference_options(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, per_seed = [], []
    for seed in args.seeds:
        run = run_episodes(model, episodes, opts, seed, not args.no_finetune, cfg.finetune, cfg.train)
        res = micro_f1(run.predictions, run.gold)
        err = error_breakdown(run.predictions, run.gold)
        per_seed.append(res)
        steps = sum(run.finetune_steps) / len(run.finetune_steps)
        rows.append({"variant": "Ours" if not args.no_finetune else "w/o Fine-tune", "seed": seed, "p": res.precision,
                     "r": res.recall, "f1": res.micro_f1, "fp_span": err.fp_span_ratio, "fp_type": err.fp_type_ratio, "steps": steps})
        write_predictions(sorted(run.predictions.items()), out / f"predictions_seed{seed}.jsonl")
    agg = aggregate_seeds(per_seed)
    _write_json(out / "results.json", {
        "rows": rows,
        "micro_f1": {"mean": agg.micro_f1, "std": agg.std, "per_seed": agg.per_seed},
        "precision": agg.precision,
        "recall": agg.recall,
    })
    print(f"micro-F1 {100 * agg.micro_f1:.2f} +/- {100 * agg.std:.2f} over seeds {args.seeds} -> {out / 'results.json'}")
    return 0


def cmd_ablate(args) -> int:
    from promptner.checkpoint import load_checkpoint
    from promptner.harness import GRIDS, format_table, rows_as_dicts, run_ablation

    _deterministic()
    if args.grid not in GRIDS:
        raise UsageError(f"unknown grid {args.grid!r}; choose from {sorted(GRIDS)}")
    model, ckpt_cfg, _ = load_checkpoint(args.checkpoint)
    cfg = _eval_config(args, ckpt_cfg)
    episodes = ed.read_episodes(args.episodes)
    rows, summary = run_ablation(model, GRIDS[args.grid], episodes, args.seeds, inference_options(cfg), cfg.finetune, cfg.train)
    table = format_table(summary)
    out = Path(args.out)
    _write_json(out / "ablation.json", {
        "grid": args.grid,
        "rows": rows_as_dicts(rows),
        "summary": {k: {"f1_mean": v.micro_f1, "f1_std": v.std, "p": v.precision, "r": v.recall} for k, v in summary.items()},
    })
    (out / "ablation_table.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def cmd_analyze_errors(args) -> int:
    from promptner.harness import error_breakdown, gold_of, micro_f1

    episodes = ed.read_episodes(args.episodes)
    gold = gold_of(episodes)
    preds = read_predictions(args.predictions)
    err = error_breakdown(preds, gold)
    res = micro_f1(preds, gold)
    report = {"f1": res.micro_f1, "fp_span": err.fp_span_ratio, "fp_type": err.fp_type_ratio,
              "fp_span_count": err.fp_span, "fp_type_count": err.fp_type, "no_fp": err.no_fp}
    if args.out:
        _write_json(Path(args.out) / "errors.json", report)
    print(f"F1 {100 * res.micro_f1:.2f}  FP-Span {100 * err.fp_span_ratio:.2f}%  FP-Type {100 * err.fp_type_ratio:.2f}%"
          + ("  (no false positives)" if err.no_fp else ""))
    print(json.dumps(report))
    return 0


def cmd_selftest(args) -> int:
    from promptner.selftest import run_selftest

    results = run_selftest(trials=args.trials)
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}{': ' + detail if detail else ''}")
    return 0 if all(ok for _, ok, _ in results) else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptner", description="Few-shot NER with prompts and kNN rerank.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default="runs"):
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        p.add_argument("--out", default=out_default)

    p = sub.add_parser("synth", help="write a synthetic desk corpus and episode files")
    common(p, "synthetic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-sentences", type=int, default=40)
    p.add_argument("--train-episodes", type=int, default=500)
    p.add_argument("--n-way", type=int, default=2)
    p.add_argument("--k-shot", type=int, default=2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sample", help="sample N-way K-shot episodes from a corpus")
    common(p, "episodes.jsonl")
    p.add_argument("--corpus", required=True)
    p.add_argument("--format", default="column-bio", choices=["column-bio", "episode-json"])
    p.add_argument("--n-way", type=int, required=True)
    p.add_argument("--k-shot", type=int, required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="train on episodes and write a checkpoint")
    common(p, "checkpoint")
    p.add_argument("--episodes", required=True)
    p.add_argument("--dev", help="validation episodes for model selection")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="fine-tune per episode, predict queries, score")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", required=True)
    p.add_argument("--seeds", type=_seeds, default=[1, 2, 3, 4, 5])
    p.add_argument("--no-finetune", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", required=True)
    p.add_argument("--grid", default="table3")
    p.add_argument("--seeds", type=_seeds, default=[1, 2, 3, 4, 5])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze-errors", help="FP-Span / FP-Type breakdown of a predictions file")
    common(p, None)
    p.add_argument("--episodes", required=True)
    p.add_argument("--predictions", required=True)
    p.set_defaults(func=cmd_analyze_errors)

    p = sub.add_parser("selftest", help="run the built-in property checks")
    p.add_argument("--trials", type=int, default=50)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ed.ConfigError) as exc:
        print(f"promptner: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.debug("failure", exc_info=True)
        print(f"promptner: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
