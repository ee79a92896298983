"""Command-line surface: corpus generation, topic mining, training,
captioning, evaluation, sweeps, and the gradient suite.

Every command reads a flat key=value config file plus ``--set`` overrides and
is fully reproducible from (config, seed).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import checkpoint_from_models, load_checkpoint, rebuild_models, save_checkpoint
from .corpus import load_corpus, save_corpus
from .gradsuite import gradient_suite
from .inference import caption, save_captions, load_captions
from .metrics import bleu4, cider, rouge_l
from .mining import load_topics, mine_topics, save_topics
from .synthetic import GeneratorConfig, generate_synthetic_corpus
from .trainer import (
    PipelineResult,
    TrainConfig,
    save_history,
    sweep_lambda,
    train_pipeline,
    train_vanilla,
)


def _parse_scalar(text: str):
    text = text.strip()
    if text.lower() == "true":
        return True
    if text.lower() == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def read_config_file(path) -> dict:
    """Flat key = value lines; blank lines and # comments are skipped."""
    raw: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            key, sep, value = stripped.partition("=")
            if not sep:
                raise ValueError(f"{path} line {lineno}: expected 'key = value'")
            raw[key.strip()] = _parse_scalar(value)
    return raw


def _gather_settings(args) -> dict:
    settings: dict = {}
    if getattr(args, "config", None):
        settings.update(read_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        settings[key.strip()] = _parse_scalar(value)
    return settings


def _build_config(cls, settings: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(settings) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    config = cls(**settings)
    config.validate()
    return config


def _cmd_gen_corpus(args) -> int:
    settings = _gather_settings(args)
    config = _build_config(GeneratorConfig, settings)
    corpus = generate_synthetic_corpus(config, seed=args.seed)
    save_corpus(corpus, args.out)
    counts = {s: len(corpus.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {args.out}: {counts}, vocab {len(corpus.vocabulary)}")
    return 0


def _cmd_mine_topics(args) -> int:
    corpus = load_corpus(args.corpus)
    teachers, assignment = mine_topics(
        corpus,
        k=args.k,
        w_text=args.w_text,
        w_vis=args.w_vis,
        temperature=args.temperature,
        restarts=args.restarts,
        max_iters=args.max_iters,
        seed=args.seed,
    )
    save_topics(
        args.out, teachers, args.k, args.w_text, args.w_vis, args.temperature,
        args.seed, assignment.objective,
    )
    print(f"wrote {args.out}: k={args.k} objective={assignment.objective:.6f}")
    return 0


def _write_run(out_dir: Path, variant: str, config: TrainConfig, corpus, result: PipelineResult) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_history(out_dir / "history.jsonl", result.history)
    final_stage = max((h.get("stage", 0) for h in result.history), default=0)
    ck = checkpoint_from_models(
        variant, config, corpus.vocabulary, result.decoder, result.predictor, stage=final_stage
    )
    save_checkpoint(ck, out_dir / "checkpoint.txt")


def _cmd_train(args) -> int:
    corpus = load_corpus(args.corpus)
    settings = _gather_settings(args)
    if args.seed is not None:
        settings["seed"] = args.seed
    config = _build_config(TrainConfig, settings)
    out_dir = Path(args.out)

    if args.variant == "vanilla":
        result = train_vanilla(corpus, config)
        _write_run(out_dir, "vanilla", config, corpus, result)
    else:
        if not args.topics:
            raise ValueError(f"--variant {args.variant} needs --topics (mined teacher topics)")
        teachers, header = load_topics(args.topics)
        if int(header["k"]) != config.k:
            raise ValueError(f"topics file has k={header['k']} but config k={config.k}")
        if args.variant == "tgm":
            config = TrainConfig(**{**config.to_dict(), "stage3_epochs": 0})
        result = train_pipeline(corpus, teachers, config)
        _write_run(out_dir, args.variant, config, corpus, result)
        if args.variant == "mm-tgm" and result.stage2_values is not None:
            stage2 = checkpoint_from_models(
                "tgm",
                config,
                corpus.vocabulary,
                _decoder_from_values(config, corpus, result.stage2_values),
                _predictor_from_values(config, corpus, result.stage2_values),
                stage=2,
            )
            save_checkpoint(stage2, out_dir / "checkpoint-stage2.txt")
    print(f"wrote {out_dir}/checkpoint.txt ({args.variant}, seed {config.seed})")
    return 0


def _cmd_caption(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    config, vocabulary, decoder, predictor = rebuild_models(ck)
    corpus = load_corpus(args.corpus)
    if sum(corpus.feature_dims) != decoder.feature_dim:
        raise ValueError(
            f"corpus feature dim {sum(corpus.feature_dims)} does not match "
            f"checkpoint decoder input {decoder.feature_dim}"
        )
    mode = args.mode
    assigned = None
    if args.assign_topic is not None:
        mode = "assigned"
        if not 0 <= args.assign_topic < config.k:
            raise ValueError(f"--assign-topic must lie in [0, {config.k})")
        assigned = np.zeros(config.k)
        assigned[args.assign_topic] = 1.0
    elif mode == "auto":
        mode = "vanilla" if ck.variant == "vanilla" else "predicted"
    width = args.beam_width or config.beam_width
    rows = []
    for record in corpus.split(args.split):
        out = caption(
            record.features(), vocabulary, decoder, predictor, mode,
            beam_width=width, max_len=config.max_len, assigned_topic=assigned,
            length_normalize=config.length_normalize,
        )
        out["id"] = record.id
        rows.append(out)
    save_captions(args.out, rows)
    print(f"wrote {args.out}: {len(rows)} captions ({mode}, beam {width})")
    return 0


def _cmd_evaluate(args) -> int:
    corpus = load_corpus(args.corpus)
    rows = load_captions(args.captions)
    by_id = {r.id: r for r in corpus.records}
    candidates, references, ids = [], [], []
    for row in rows:
        record = by_id.get(row["id"])
        if record is None:
            raise ValueError(f"caption id {row['id']!r} not present in corpus")
        candidates.append(list(row["tokens"]))
        references.append(record.captions)
        ids.append(row["id"])
    report = {
        "n_records": len(ids),
        "bleu4": bleu4(candidates, references),
        "rouge_l": rouge_l(candidates, references),
        "cider": cider(candidates, references),
        "per_record": {
            rid: {
                "bleu4": bleu4([c], [r]),
                "rouge_l": rouge_l([c], [r]),
                "cider": cider([c], [r]),
            }
            for rid, c, r in zip(ids, candidates, references)
        },
    }
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, sort_keys=True, indent=2)
            fh.write("\n")
    print(
        f"bleu4={report['bleu4']:.6f} rouge_l={report['rouge_l']:.6f} cider={report['cider']:.6f}"
    )
    return 0


def _cmd_sweep(args) -> int:
    corpus = load_corpus(args.corpus)
    settings = _gather_settings(args)
    if args.seed is not None:
        settings["seed"] = args.seed
    config = _build_config(TrainConfig, settings)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.param == "lambda":
        if not args.topics:
            raise ValueError("lambda sweep needs --topics")
        teachers, _ = load_topics(args.topics)
        results = sweep_lambda(corpus, teachers, config)
        summary = []
        for entry in results:
            tag = "baseline" if entry.get("baseline") else f"ratio-{entry['ratio']:.1f}"
            run_dir = out_dir / tag
            run_dir.mkdir(parents=True, exist_ok=True)
            save_history(run_dir / "history.jsonl", entry["history"])
            run_config = TrainConfig(**{**config.to_dict(), "lam": entry["lam"]})
            ck = checkpoint_from_models(
                "mm-tgm" if not entry.get("baseline") else "tgm",
                run_config,
                corpus.vocabulary,
                _decoder_from_values(config, corpus, entry["decoder_values"]),
                _predictor_from_values(config, corpus, entry["predictor_values"]),
                stage=3 if not entry.get("baseline") else 2,
            )
            save_checkpoint(ck, run_dir / "checkpoint.txt")
            best_val = min(
                (h["val_caption"] for h in entry["history"] if h.get("val_caption") is not None),
                default=None,
            )
            summary.append({"tag": tag, "lam": entry["lam"], "best_val_caption": best_val})
        with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
            json.dump(summary, fh, sort_keys=True, indent=2)
        print(f"wrote {len(summary)} lambda runs under {out_dir}")
        return 0

    # K sweep: mine and train once per topic count.
    k_values = [int(v) for v in str(args.k_values).split(",") if v.strip()]
    if not k_values:
        raise ValueError("--k-values must list at least one K")
    summary = []
    for k in k_values:
        run_config = TrainConfig(**{**config.to_dict(), "k": k})
        teachers, assignment = mine_topics(
            corpus, k=k, w_text=run_config.w_text, w_vis=run_config.w_vis,
            temperature=run_config.temperature, restarts=run_config.restarts,
            max_iters=run_config.kmeans_max_iters, seed=run_config.seed,
        )
        result = train_pipeline(corpus, teachers, run_config)
        run_dir = out_dir / f"k-{k}"
        _write_run(run_dir, "mm-tgm", run_config, corpus, result)
        save_topics(
            run_dir / "topics.jsonl", teachers, k, run_config.w_text, run_config.w_vis,
            run_config.temperature, run_config.seed, assignment.objective,
        )
        best_val = min(
            (h["val_caption"] for h in result.history if h.get("val_caption") is not None),
            default=None,
        )
        summary.append({"k": k, "best_val_caption": best_val})
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
    print(f"wrote {len(summary)} K runs under {out_dir}")
    return 0


def _decoder_from_values(config: TrainConfig, corpus, values: dict):
    from .decoder import init_tgm

    decoder = init_tgm(
        len(corpus.vocabulary), config.n_h, config.n_f, config.k,
        sum(corpus.feature_dims), np.random.default_rng(0),
        factorize_recurrent=config.factorize_recurrent,
    )
    decoder.load_values(values)
    return decoder


def _predictor_from_values(config: TrainConfig, corpus, values: dict):
    from .predictor import init_predictor

    predictor = init_predictor(
        sum(corpus.feature_dims), config.predictor_hidden, config.k, np.random.default_rng(0)
    )
    predictor.load_values(values)
    return predictor


def _cmd_grad_check(args) -> int:
    results = gradient_suite(seed=args.seed)
    worst = 0.0
    for name, err in results.items():
        status = "ok" if err < 1e-4 else "FAIL"
        print(f"{name:20s} max_rel_error={err:.3e} {status}")
        worst = max(worst, err)
    return 0 if worst < 1e-4 else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="topiccap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic topic-structured corpus")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_corpus)

    p = sub.add_parser("mine-topics", help="mine teacher topics on the training split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--w-text", type=float, default=1.0)
    p.add_argument("--w-vis", type=float, default=0.2)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_mine_topics)

    p = sub.add_parser("train", help="train a captioning model")
    p.add_argument("--variant", choices=("vanilla", "tgm", "mm-tgm"), required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--topics")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("caption", help="decode sentences for a corpus split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="auto", choices=("auto", "vanilla", "predicted", "assigned"))
    p.add_argument("--assign-topic", type=int)
    p.add_argument("--beam-width", type=int)
    p.set_defaults(func=_cmd_caption)

    p = sub.add_parser("evaluate", help="score generated captions against references")
    p.add_argument("--captions", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sweep", help="sweep the blend weight or the topic count")
    p.add_argument("--param", choices=("lambda", "K"), required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--topics")
    p.add_argument("--k-values", default="2,3,5,8")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("grad-check", help="finite-difference check of every model gradient")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
