"""Command-line entry point: ``unlearnkit <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or format error (including
unreadable files), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import checkpoint as ckpt
from . import datasets as ds
from .errors import ConfigError, DataError, NumericError, ShardError, UnlearnError
from .evaluation import config_hash
from .model import ModelConfig, generate, init_model
from .pcgu import AXES, DIRECTIONS, LOG_COLUMNS, PCGUConfig, run_pcgu
from .shard import SHARD_LOG_COLUMNS, run_pcgu_sharded
from .sweeps import K_GRID, EvalSet, read_csv, sweep_pcgu, sweep_tv, write_csv
from .synth import SynthConfig
from .synth import generate as generate_synth
from .taskvec import LAMBDA_GRID, FinetuneConfig, LoRAConfig, apply_task_vector, compute_task_vector, finetune_lm
from .training import train_lm

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# shared loaders
# ---------------------------------------------------------------------------


def _load_model(path) -> tuple[ckpt.Checkpoint, ds.Vocab]:
    c = ckpt.read(path)
    if c.kind != "model":
        raise DataError(f"{path}: expected a model checkpoint, found {c.kind!r}")
    if c.vocab is None:
        raise DataError(f"{path}: checkpoint carries no vocabulary")
    return c, ds.Vocab(c.vocab)


def _eval_set(args, vocab: ds.Vocab) -> EvalSet:
    pairs = ds.load_bias_pairs(ds.read_jsonl(args.pairs), vocab)
    docs = [vocab.encode(line) for line in ds.read_lines(args.ppl_corpus)]
    mc = ds.load_mc_items(ds.read_jsonl(args.mc), vocab)
    return EvalSet(pairs, docs, mc)


def _load_pairs(path, vocab_size: int):
    pairs = [ds.pair_from_record(r, vocab_size) for r in ds.read_jsonl(path)]
    if not pairs:
        raise DataError(f"{path}: no contrastive pairs")
    return pairs


def _pcgu_config(args, k: float | None = None) -> PCGUConfig:
    return PCGUConfig(
        k_fraction=args.k if k is None else k,
        alpha=args.alpha,
        epochs=args.epochs,
        batch_size=args.batch_size,
        axis=args.axis,
        direction=args.direction,
        seed=args.seed,
    )


def _write_rows(path, columns, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_synth(args) -> None:
    cfg = SynthConfig(
        seed=args.seed, rho=args.rho, min_mentions=args.min_mentions,
        max_mentions=args.max_mentions, n_qa=args.n_qa, n_filler=args.n_filler,
    )
    bench = generate_synth(cfg)
    paths = bench.write(args.out)
    vocab = ds.build_vocab("\n".join(bench.pretrain))
    vocab.save(Path(args.out) / "vocab.json")
    biased = ds.build_bias_corpus(ds.BiasedCorpusSpec(bench.stereoset, bench.comments))
    ds.write_lines(Path(args.out) / "biased.txt", biased)
    print(
        f"wrote {len(paths) + 2} files to {args.out}: {len(bench.pretrain)} pretrain lines "
        f"({bench.stereo_lines} stereotyped / {bench.anti_lines} anti), vocab {len(vocab)}"
    )


def cmd_make_pairs(args) -> None:
    vocab = ds.Vocab.load(args.vocab)
    pairs = ds.make_contrastive_pairs(ds.read_jsonl(args.records), vocab)
    if not pairs:
        raise DataError(f"{args.records}: no ambiguous records")
    ds.write_jsonl(args.out, [ds.pair_to_record(p) for p in pairs])
    print(f"wrote {len(pairs)} pairs to {args.out}")


def cmd_build_bias_corpus(args) -> None:
    spec = ds.BiasedCorpusSpec(ds.read_jsonl(args.stereoset), ds.read_jsonl(args.comments), args.threshold)
    lines = ds.build_bias_corpus(spec)
    ds.write_lines(args.out, lines)
    print(f"wrote {len(lines)} lines to {args.out}")


def cmd_train_base(args) -> None:
    lines = ds.read_lines(args.corpus)
    vocab = ds.Vocab.load(args.vocab) if args.vocab else ds.build_vocab("\n".join(lines))
    overrides = {}
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.config}: invalid JSON ({exc.msg})") from exc
    if not isinstance(overrides, dict):
        raise ConfigError(f"{args.config}: expected a JSON object")
    fields = {**ModelConfig().to_dict(), **overrides, "vocab_size": len(vocab), "init_seed": args.seed}
    config = ModelConfig.from_dict(fields)
    seqs = [vocab.encode(line, bos=True, eos=True) for line in lines]
    params, losses = train_lm(init_model(config), seqs, args.steps, lr=args.lr, batch_size=args.batch_size, seed=args.seed)
    ckpt.write(args.out, params, vocab=vocab.tokens)
    final = f"{losses[-1]:.4f}" if losses else "n/a"
    print(f"trained {args.steps} steps; final loss {final}; wrote {args.out}")


def cmd_pcgu(args) -> None:
    c, _ = _load_model(args.base)
    pairs = _load_pairs(args.pairs, c.params.config.vocab_size)
    config = _pcgu_config(args)
    if args.shards:
        params, rows = run_pcgu_sharded(c.params, pairs, config, args.shards)
        columns = SHARD_LOG_COLUMNS
    else:
        params, rows = run_pcgu(c.params, pairs, config)
        columns = LOG_COLUMNS
    ckpt.write(args.out, params, vocab=c.vocab)
    if args.log:
        _write_rows(args.log, columns, rows)
    print(f"PCGU k={config.k_fraction} alpha={config.alpha}: {len(rows)} log rows; wrote {args.out}")


def cmd_finetune(args) -> None:
    c, vocab = _load_model(args.base)
    seqs = [vocab.encode(line, bos=True, eos=True) for line in ds.read_lines(args.corpus)]
    lora = LoRAConfig(rank=args.lora_rank, scale_alpha=args.lora_alpha) if args.lora_rank else None
    config = FinetuneConfig(
        steps=args.steps, learning_rate=args.lr, batch_size=args.batch_size,
        grad_accum=args.grad_accum, lora=lora, seed=args.seed,
    )
    params, losses = finetune_lm(c.params, seqs, config)
    ckpt.write(args.out, params, vocab=c.vocab)
    if losses:
        print(f"fine-tuned {args.steps} steps; loss {losses[0]:.4f} -> {losses[-1]:.4f}; wrote {args.out}")
    else:
        print(f"0 steps; wrote {args.out}")


def cmd_tv_extract(args) -> None:
    pre, _ = _load_model(args.pre)
    ft, _ = _load_model(args.ft)
    ckpt.write(args.out, compute_task_vector(pre.params, ft.params), kind="task_vector", vocab=pre.vocab)
    print(f"wrote task vector {args.out}")


def _task_vector(pre: ckpt.Checkpoint, args):
    """Task vector from ``--tv`` or, failing that, ``--ft`` minus the base."""
    if args.tv:
        tv = ckpt.read(args.tv)
        if tv.kind != "task_vector":
            raise DataError(f"{args.tv}: expected a task vector, found {tv.kind!r}")
        return tv.params
    ft, _ = _load_model(args.ft)
    return compute_task_vector(pre.params, ft.params)


def cmd_tv_apply(args) -> None:
    pre, _ = _load_model(args.pre)
    out = apply_task_vector(pre.params, _task_vector(pre, args), args.lam, negate=args.negate)
    ckpt.write(args.out, out, vocab=pre.vocab)
    print(f"applied {'negated ' if args.negate else ''}task vector at lambda={args.lam}; wrote {args.out}")


def cmd_eval(args) -> None:
    c, vocab = _load_model(args.ckpt)
    report = _eval_set(args, vocab).run(c.params)
    doc = report.to_dict()
    doc["checkpoint"] = str(args.ckpt)
    doc["config_hash"] = config_hash({"model": c.params.config.to_dict(), "eval": _eval_inputs(args)})
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _eval_inputs(args) -> dict:
    return {"pairs": str(args.pairs), "ppl_corpus": str(args.ppl_corpus), "mc": str(args.mc)}


def cmd_generate(args) -> None:
    c, vocab = _load_model(args.ckpt)
    prompt = vocab.encode(args.prompt, bos=True)
    ids = generate(c.params, prompt, args.max_new, args.temperature, args.seed)
    print(vocab.decode(ids))


def _maybe_plot(args, label: str) -> None:
    if args.plot:
        from .plotting import plot_sweeps

        plot_sweeps([(label, read_csv(args.out))], args.plot)


def cmd_sweep_tv(args) -> None:
    pre, vocab = _load_model(args.base)
    rows = sweep_tv(pre.params, _task_vector(pre, args), args.lambdas, _eval_set(args, vocab), args.seed, args.timing)
    write_csv(args.out, rows)
    _maybe_plot(args, "task vector")
    print(f"wrote {len(rows)} rows to {args.out}")


def cmd_sweep_pcgu(args) -> None:
    c, vocab = _load_model(args.base)
    pairs = _load_pairs(args.train_pairs, c.params.config.vocab_size)
    runner = None
    if args.shards:
        def runner(params, pairs, config):
            return run_pcgu_sharded(params, pairs, config, args.shards)
    config = _pcgu_config(args, k=0.0)
    rows = sweep_pcgu(c.params, pairs, args.ks, config, _eval_set(args, vocab), args.timing, runner)
    write_csv(args.out, rows)
    _maybe_plot(args, "PCGU")
    print(f"wrote {len(rows)} rows to {args.out}")


def cmd_plot(args) -> None:
    from .plotting import plot_sweeps

    tables = [(Path(p).stem, read_csv(p)) for p in args.csv]
    plot_sweeps(tables, args.out)
    print(f"wrote {args.out}")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_eval_flags(p) -> None:
    p.add_argument("--pairs", required=True, help="bias evaluation pairs (JSONL: stereo, anti, category)")
    p.add_argument("--ppl-corpus", required=True, help="held-out text, one document per line")
    p.add_argument("--mc", required=True, help="multiple-choice items (JSONL: prompt, choices, answer_index)")


def _add_pcgu_flags(p, with_k: bool) -> None:
    if with_k:
        p.add_argument("--k", type=float, default=PCGUConfig.k_fraction, help="fraction of partitions updated per batch")
    p.add_argument("--alpha", type=float, default=PCGUConfig.alpha, help="step size")
    p.add_argument("--epochs", type=int, default=PCGUConfig.epochs)
    p.add_argument("--batch-size", type=int, default=PCGUConfig.batch_size)
    p.add_argument("--axis", choices=AXES, default=PCGUConfig.axis, help="rows (input) or columns (output)")
    p.add_argument("--direction", choices=DIRECTIONS, default=PCGUConfig.direction)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shards", type=int, default=0, help="run the sharded protocol with N logical workers")


def _add_tv_source(p) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--tv", help="task vector file written by 'tv extract'")
    src.add_argument("--ft", help="fine-tuned checkpoint; the task vector is ft - base")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unlearnkit", description="Debiasing decoder LMs by partitioned gradient unlearning and task-vector negation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="write the synthetic benchmark")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rho", type=float, default=SynthConfig.rho, help="stereotype skew in [0, 1]")
    p.add_argument("--min-mentions", type=int, default=SynthConfig.min_mentions)
    p.add_argument("--max-mentions", type=int, default=SynthConfig.max_mentions)
    p.add_argument("--n-qa", type=int, default=SynthConfig.n_qa)
    p.add_argument("--n-filler", type=int, default=SynthConfig.n_filler)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("make-pairs", help="render ambiguous QA records into tokenized contrastive pairs")
    p.add_argument("--records", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_pairs)

    p = sub.add_parser("build-bias-corpus", help="stereotype sentences plus toxic identity comments")
    p.add_argument("--stereoset", required=True)
    p.add_argument("--comments", required=True)
    p.add_argument("--threshold", type=float, default=0.5, help="keep comments with toxicity strictly above this")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_bias_corpus)

    p = sub.add_parser("train-base", help="train a model from scratch")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", help="vocabulary JSON; built from the corpus when omitted")
    p.add_argument("--config", help="JSON object overriding model config fields")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0, help="initialization and batching seed")
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("pcgu", help="one PCGU run")
    p.add_argument("--base", required=True)
    p.add_argument("--pairs", required=True, help="tokenized pairs from make-pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="per-batch CSV log")
    _add_pcgu_flags(p, with_k=True)
    p.set_defaults(func=cmd_pcgu)

    p = sub.add_parser("finetune", help="fine-tune on a (biased) corpus")
    p.add_argument("--base", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--grad-accum", type=int, default=4)
    p.add_argument("--lora-rank", type=int, default=8, help="0 for full fine-tuning")
    p.add_argument("--lora-alpha", type=float, default=16.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_finetune)

    tv = sub.add_parser("tv", help="task-vector operations")
    tv_sub = tv.add_subparsers(dest="tv_command", required=True, parser_class=_Parser)
    p = tv_sub.add_parser("extract", help="write ft - pre")
    p.add_argument("--pre", required=True)
    p.add_argument("--ft", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tv_extract)
    p = tv_sub.add_parser("apply", help="write pre +/- lambda * tv")
    p.add_argument("--pre", required=True)
    _add_tv_source(p)
    p.add_argument("--lam", type=float, default=0.6)
    p.add_argument("--negate", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tv_apply)

    p = sub.add_parser("eval", help="bias score, perplexity and multiple-choice accuracy as JSON")
    p.add_argument("--ckpt", required=True)
    _add_eval_flags(p)
    p.add_argument("--out", help="report path (stdout when omitted)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="continue a prompt")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", type=int, default=16)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("sweep-tv", help="negated task vector over a lambda grid")
    p.add_argument("--base", required=True)
    _add_tv_source(p)
    p.add_argument("--lambdas", type=_float_list, default=list(LAMBDA_GRID))
    _add_eval_flags(p)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--plot", help="also render a figure; the suffix (.png, .svg, .pdf) picks the format")
    p.add_argument("--timing", action="store_true", help="fill runtime_seconds (makes the CSV run-dependent)")
    p.add_argument("--seed", type=int, default=0, help="recorded in the seed column")
    p.set_defaults(func=cmd_sweep_tv)

    p = sub.add_parser("sweep-pcgu", help="PCGU over a k grid, each run from the base")
    p.add_argument("--base", required=True)
    p.add_argument("--train-pairs", required=True, help="tokenized contrastive pairs from make-pairs")
    p.add_argument("--ks", type=_float_list, default=list(K_GRID))
    _add_pcgu_flags(p, with_k=False)
    _add_eval_flags(p)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--plot", help="also render a figure; the suffix (.png, .svg, .pdf) picks the format")
    p.add_argument("--timing", action="store_true", help="fill runtime_seconds (makes the CSV run-dependent)")
    p.set_defaults(func=cmd_sweep_pcgu)

    p = sub.add_parser("plot", help="render sweep CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ShardError) and exc.__cause__ is not None:
        return _exit_code(exc.__cause__)
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, ConfigError):
        return EXIT_USAGE
    return EXIT_DATA


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (UnlearnError, OSError) as exc:
        print(f"unlearnkit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return _exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
