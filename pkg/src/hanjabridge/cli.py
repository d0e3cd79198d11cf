"""Command-line entry point.

Exit codes: 0 success, 1 usage or data-format error, 2 missing artifact,
3 numerical failure. `HANJABRIDGE_THREADS` caps torch's intra-op threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import torch

from . import analysis, corpus, probe as probe_mod, training
from .augment import AugmentConfig, augment, build_attention_mask, label_gold, inline_surface, to_debug_json
from .errors import ArtifactMissingError, HanjaBridgeError, NumericalError
from .lexicon import homophony_stats, load_lexicon
from .model import load_checkpoint
from .tokenizer import build_vocab, encode, expand_vocab, load_vocab, save_vocab


class UsageError(HanjaBridgeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _data_path(name: str) -> Path:
    return Path(__file__).parent / "data" / name


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ArtifactMissingError(f"{what} not found: {path}")
    return path


def _load_lexicon_arg(arg: str | None):
    path = Path(arg) if arg else _data_path("sample_lexicon.tsv")
    return load_lexicon(_require(path, "lexicon"))


def cmd_generate(args) -> int:
    cfg = training.load_run_config(_require(Path(args.config), "config")) if args.config else training.RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, synth=dataclasses.replace(cfg.synth, seed=args.seed))
    if args.sentences is not None:
        cfg = dataclasses.replace(cfg, synth=dataclasses.replace(cfg.synth, n_sentences=args.sentences))
    bundle = training.build_corpus(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    training.write_corpus_artifacts(bundle, out)
    stats = homophony_stats(bundle.lexicon)
    print(f"wrote corpus under {out}")
    print(f"lexicon entries={stats.n_entries} homophonous={stats.n_homophonous} "
          f"train={len(bundle.data.train_sentences)} eval={len(bundle.data.eval_sentences)} "
          f"probe={len(bundle.data.probe_items)}")
    return 0


def cmd_lexicon_stats(args) -> int:
    lexicon = _load_lexicon_arg(args.lexicon)
    stats = homophony_stats(lexicon)
    print("entries\thomophonous\tratio\tmax_candidates")
    print(f"{stats.n_entries}\t{stats.n_homophonous}\t{stats.ratio:.4f}\t{stats.max_candidates}")
    return 0


def cmd_expand_vocab(args) -> int:
    vocab = load_vocab(_require(Path(args.vocab), "vocab"))
    lexicon = _load_lexicon_arg(args.lexicon)
    if args.per_char:
        new_tokens = sorted({ch for h in lexicon.hanja_tokens() for ch in h})
    else:
        new_tokens = lexicon.hanja_tokens()
    expanded = expand_vocab(vocab, new_tokens)
    save_vocab(expanded, args.out)
    print(f"added {len(expanded) - len(vocab)} tokens ({len(vocab)} -> {len(expanded)})")
    return 0


def cmd_augment_preview(args) -> int:
    lexicon = _load_lexicon_arg(args.lexicon)
    vocab = expand_vocab(build_vocab(sorted(lexicon.entries)), lexicon.hanja_tokens())
    enc = encode(vocab, args.sentence)
    cfg = AugmentConfig(k=args.k, per_character_tokens=args.per_char)
    if args.per_char:
        vocab = expand_vocab(vocab, sorted({ch for h in lexicon.hanja_tokens() for ch in h}))
        enc = encode(vocab, args.sentence)
    aug = augment(enc, lexicon, vocab, cfg)
    print(inline_surface(aug))
    if args.json:
        print(to_debug_json(aug))
    return 0


def cmd_train(args) -> int:
    cfg = training.load_run_config(_require(Path(args.config), "config")) if args.config else training.RunConfig()
    train = cfg.train
    if args.steps is not None:
        train = dataclasses.replace(train, steps=args.steps)
    if args.seed is not None:
        train = dataclasses.replace(train, seed=args.seed)
    if getattr(args, "lambda_", None) is not None:
        train = dataclasses.replace(train, lambda_kd=args.lambda_)
    if args.no_distill:
        train = dataclasses.replace(train, distill=False)
    if args.freeze is not None:
        groups = tuple(g for g in args.freeze.split(",") if g)
        train = dataclasses.replace(train, freeze=groups)
    cfg = dataclasses.replace(cfg, train=train)
    if args.k is not None:
        cfg = dataclasses.replace(cfg, augment=dataclasses.replace(cfg.augment, k=args.k))
    cfg = dataclasses.replace(cfg, out_dir=args.out)
    summary = training.run_training(cfg)
    print(json.dumps(summary, indent=2))
    return 0


def _run_paths(run_dir: str):
    run = _require(Path(run_dir), "run directory")
    cfg = training.load_run_config(_require(run / "config.json", "run config"))
    return run, cfg


def _student_checkpoints(run: Path, pattern: str | None):
    ckpt_dir = run / "checkpoints"
    paths = sorted(ckpt_dir.glob(pattern or "student_step*.ckpt"))
    if not paths:
        raise ArtifactMissingError(f"no checkpoints matching {pattern or 'student_step*.ckpt'} under {ckpt_dir}")
    return paths


def cmd_eval_rq1(args) -> int:
    run, cfg = _run_paths(args.run)
    lexicon = load_lexicon(_require(run / "corpus" / "lexicon.tsv", "lexicon"))
    vocab = load_vocab(_require(run / "vocab_student.txt", "student vocab"))
    eval_path = Path(args.eval) if args.eval else run / "corpus" / "eval.jsonl"
    sentences, _ = corpus.load_annotated(_require(eval_path, "eval sentences"), lexicon=lexicon)
    k = args.k if args.k is not None else cfg.augment.k
    aug_cfg = dataclasses.replace(cfg.augment, k=k)

    items = []
    for sent in sentences:
        enc = encode(vocab, sent.text)
        aug = augment(enc, lexicon, vocab, aug_cfg)
        labeled, _ = label_gold(aug, [((a.start, a.end), a.hanja) for a in sent.annotations])
        if any(g.gold_candidate is not None for g in labeled.groups):
            items.append(analysis.Rq1Item(aug=labeled, candidate_context=cfg.train.candidate_context))
    if not items:
        raise ArtifactMissingError("no gold-labeled evaluation items")
    if args.max_items:
        items = items[: args.max_items]

    models = {}
    for path in _student_checkpoints(run, args.checkpoints):
        bundle = load_checkpoint(path)
        models[str(bundle.step)] = bundle.model
    table = analysis.rq1_accuracy(items, models, score_source=args.score_source)
    out_path = Path(args.out) if args.out else run / "rq1_accuracy.tsv"
    analysis.write_rq1_tsv(table, out_path)
    print(table.to_tsv(), end="")
    print(f"wrote {out_path}", file=sys.stderr)

    if args.heatmaps:
        heat_dir = run / "heatmaps"
        heat_dir.mkdir(exist_ok=True)
        final_model = models[max(models, key=int)]
        for i, item in enumerate(items[: args.heatmaps]):
            mask = build_attention_mask(item.aug, candidate_context=item.candidate_context)
            with torch.no_grad():
                _, trace = final_model.forward(item.aug.ids, mask)
            R = analysis.rollout(trace)
            analysis.emit_heatmap(R, item.aug, heat_dir / f"heatmap_{i:03d}.ppm")
        print(f"wrote {min(args.heatmaps, len(items))} heatmaps under {heat_dir}", file=sys.stderr)
    return 0


def cmd_probe(args) -> int:
    run, cfg = _run_paths(args.run)
    lexicon = load_lexicon(_require(run / "corpus" / "lexicon.tsv", "lexicon"))
    vocab = load_vocab(_require(run / "vocab_student.txt", "student vocab"))
    items_path = Path(args.items) if args.items else run / "corpus" / "probe.jsonl"
    items = probe_mod.load_probe_items(_require(items_path, "probe items"))
    if args.max_items:
        items = items[: args.max_items]
    if args.checkpoint:
        ckpt = _require(Path(args.checkpoint), "checkpoint")
    else:
        ckpt = _student_checkpoints(run, None)[-1]
    model = load_checkpoint(ckpt).model
    template = Path(args.template).read_text(encoding="utf-8").strip() if args.template else probe_mod.DEFAULT_TEMPLATE

    mode = probe_mod.MODE_WITH_HB if args.hb_inference else probe_mod.MODE_WITHOUT_HB
    report = probe_mod.probe_run(
        model, items, mode, vocab,
        template=template,
        lexicon=lexicon,
        augment_config=cfg.augment,
        candidate_context=cfg.train.candidate_context,
        length_normalize=args.length_normalize,
    )
    (run / f"probe_{mode}.json").write_text(
        json.dumps(dataclasses.asdict(report), indent=2) + "\n", encoding="utf-8"
    )
    reports = []
    for m in probe_mod.MODES:
        path = run / f"probe_{m}.json"
        if path.exists():
            raw = json.loads(path.read_text(encoding="utf-8"))
            raw["per_k"] = {int(kk): tuple(v) for kk, v in raw["per_k"].items()}
            reports.append(probe_mod.ProbeReport(**raw))
    probe_mod.write_probe_tsv(reports, run / "probe_report.tsv")
    print((run / "probe_report.tsv").read_text(encoding="utf-8"), end="")
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    if not run.is_dir():
        raise ArtifactMissingError(f"run directory not found: {run}")
    sections = []
    cfg_path = run / "config.json"
    if not cfg_path.exists():
        raise ArtifactMissingError(f"{run} contains no config.json; not a run directory")
    sections.append(f"run: {run}\nconfig: {cfg_path}")
    metrics = run / "metrics.tsv"
    if metrics.exists():
        lines = metrics.read_text(encoding="utf-8").strip().split("\n")
        sections.append("training metrics (last 5 steps):\n" + "\n".join(lines[:1] + lines[-5:]))
    rq1 = run / "rq1_accuracy.tsv"
    if rq1.exists():
        sections.append("rq1 candidate-focus accuracy (rows: k, cols: step):\n" + rq1.read_text(encoding="utf-8").strip())
    probe_tsv = run / "probe_report.tsv"
    if probe_tsv.exists():
        sections.append("probe report:\n" + probe_tsv.read_text(encoding="utf-8").strip())
    heat = sorted((run / "heatmaps").glob("*.ppm")) if (run / "heatmaps").is_dir() else []
    if heat:
        sections.append("heatmaps:\n" + "\n".join(str(p) for p in heat))
    text = ("\n\n".join(sections)) + "\n"
    (run / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="hanjabridge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic corpus and write its artifacts")
    p.add_argument("--config", help="run-config JSON (defaults used otherwise)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--sentences", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("lexicon-stats", help="summary statistics of a lexicon TSV")
    p.add_argument("--lexicon", help="defaults to the bundled sample lexicon")
    p.set_defaults(func=cmd_lexicon_stats)

    p = sub.add_parser("expand-vocab", help="append a lexicon's hanja tokens to a vocab file")
    p.add_argument("--vocab", required=True)
    p.add_argument("--lexicon")
    p.add_argument("--out", required=True)
    p.add_argument("--per-char", action="store_true")
    p.set_defaults(func=cmd_expand_vocab)

    p = sub.add_parser("augment-preview", help="print the expanded in-line surface form")
    p.add_argument("--sentence", default="나는 사과의 가격을 모른다")
    p.add_argument("--lexicon")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--per-char", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("train", help="train the teacher and one student variant")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--lambda", dest="lambda_", type=float)
    p.add_argument("--no-distill", action="store_true")
    p.add_argument("--freeze", help="comma list: embeddings,head,block:0,blocks:0..1,all")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-rq1", help="rollout candidate-focus accuracy across checkpoints")
    p.add_argument("--run", required=True)
    p.add_argument("--checkpoints", help="glob under <run>/checkpoints")
    p.add_argument("--eval", help="annotated eval JSONL (default: run corpus)")
    p.add_argument("--k", type=int)
    p.add_argument("--score-source", default="final_original", choices=analysis.SCORE_SOURCES)
    p.add_argument("--heatmaps", type=int, default=0)
    p.add_argument("--max-items", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_rq1)

    p = sub.add_parser("probe", help="position-debiased multiple-choice probe")
    p.add_argument("--run", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--items")
    p.add_argument("--hb-inference", action="store_true")
    p.add_argument("--template", help="file with {context}/{surface}/{options} slots")
    p.add_argument("--length-normalize", action="store_true")
    p.add_argument("--max-items", type=int)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("report", help="consolidated human-readable run report")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    threads = os.environ.get("HANJABRIDGE_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ArtifactMissingError, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except HanjaBridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
