"""Command line entry point orchestrating the whole pipeline.

Subcommands: refactor, compile, train, query, sample, perplexity,
campaign, fixtures. Every subcommand writes deterministic artifacts for a
given --seed; all randomness is derived from that one seed through fixed
per-task labels. Exit codes: 1 usage, 2 malformed input, 3 capacity or
budget exhausted, 4 numeric failure (zero mass, failed verification).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import circuit as circuit_mod
from . import fixtures as fixtures_mod
from . import sampling as sampling_mod
from . import testbed as testbed_mod
from .corpus import (
    ConcretizerSpec,
    concretize,
    read_corpus_file,
    write_corpus_file,
)
from .errors import (
    CapacityError,
    InputError,
    NumericError,
    PcfuzzError,
    UsageError,
)
from .grammar import (
    cnf_to_text,
    enumerate_cnf_language,
    enumerate_language,
    grammar_to_text,
    load_vocab,
    parse_grammar,
    random_derivation,
    remove_epsilon,
    replace_literals,
    save_vocab,
    to_bnf,
    to_cnf,
    token_space_size,
)
from .inference import run_query
from .learning import (
    DEFAULT_SMOOTHING,
    hmm_loglik,
    hmm_sample,
    pc_loglik,
    pcfg_loglik,
    perplexity,
    save_hmm,
    save_pcfg,
    train_hmm,
    train_pc_em,
    train_pcfg,
)

# fixed labels deriving per-task random streams from the one run seed
_SEED_LABELS = {"train": 1, "sample": 2, "campaign_model": 3,
                "campaign_baseline": 4, "hmm": 5, "concretize": 6,
                "derive": 7}


def _task_rng(seed, label):
    return np.random.default_rng([seed, _SEED_LABELS[label]])


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_pipeline(grammar_path):
    text = Path(grammar_path).read_text(encoding="utf-8")
    g, vocab = replace_literals(parse_grammar(text))
    bnf = remove_epsilon(to_bnf(g))
    return g, bnf, to_cnf(bnf, vocab), vocab


def _read_corpus(path, n):
    return read_corpus_file(path, n)


def cmd_refactor(args):
    g, bnf, cnf, vocab = _load_pipeline(args.grammar)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.grammar).stem
    (out / f"{stem}.bnf.g").write_text(grammar_to_text(bnf), encoding="utf-8")
    (out / f"{stem}.cnf.g").write_text(cnf_to_text(cnf), encoding="utf-8")
    save_vocab(vocab, out / f"{stem}.vocab")
    print(f"wrote {stem}.bnf.g, {stem}.cnf.g, {stem}.vocab to {out}")
    if args.verify_upto:
        want = enumerate_language(g, args.verify_upto)
        got = enumerate_cnf_language(cnf, args.verify_upto)
        if want == got:
            print(f"verify-upto {args.verify_upto}: ok "
                  f"({len(want)} strings preserved)")
        else:
            missing = sorted(want - got)[:5]
            extra = sorted(got - want)[:5]
            raise NumericError(
                f"language changed up to length {args.verify_upto}: "
                f"missing {missing}, extra {extra}")
    return 0


def cmd_compile(args):
    _, _, cnf, _ = _load_pipeline(args.grammar)
    c = circuit_mod.compile_circuit(cnf, args.max_length,
                                    capacity=args.capacity)
    circuit_mod.save(c, args.out)
    print(f"compiled circuit: {c.num_nodes} nodes, {c.num_edges} edges, "
          f"n={c.n} -> {args.out}")
    return 0


def cmd_train(args):
    c = circuit_mod.load(args.model)
    corpus = _read_corpus(args.corpus, c.n)
    trained, report = train_pc_em(c, corpus, args.epochs,
                                  smoothing=args.smoothing)
    circuit_mod.save(trained, args.out)
    if args.report:
        Path(args.report).write_text(report.to_tsv(), encoding="utf-8")
    print(f"trained {args.epochs} epochs on {len(corpus)} items "
          f"({corpus.discarded} discarded); final loglik "
          f"{report.loglik[-1]:.6f}, train perplexity {report.perplexity:.6f}")
    return 0


def cmd_query(args):
    c = circuit_mod.load(args.model)
    lines = [ln for ln in Path(args.queries).read_text(encoding="utf-8")
             .splitlines() if ln.strip() and not ln.strip().startswith("#")]
    rows = []
    for line in lines:
        result = run_query(c, line, with_trace=args.trace)
        value = result.value if isinstance(result.value, str) \
            else f"{result.value:.12g}"
        rows.append(f"{result.query}\t{value}")
        if args.trace and result.trace:
            top = sorted(result.trace.items(), key=lambda kv: -kv[1])[:20]
            for (sym, i, j), v in top:
                rows.append(f"# ({sym},{i},{j})\t{v:.6g}")
    output = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(output, encoding="utf-8")
    else:
        sys.stdout.write(output)
    return 0


def cmd_sample(args):
    c = circuit_mod.load(args.model)
    constraint = None
    if args.constraint:
        constraint = sampling_mod.parse_constraint(args.constraint, c.vocab)
    rng = _task_rng(args.seed, "sample")
    seqs, stats = sampling_mod.sample_batch(c, constraint, args.count, rng)
    named = [tuple(c.vocab.decode(s)) for s in seqs]
    write_corpus_file(args.out, named)
    if args.stats:
        Path(args.stats).write_text(stats.to_tsv(), encoding="utf-8")
    if args.concretizer:
        spec = ConcretizerSpec.parse(
            Path(args.concretizer).read_text(encoding="utf-8"))
        crng = _task_rng(args.seed, "concretize")
        texts = [concretize(s, spec, crng) for s in named]
        target = args.concrete_out or (str(args.out) + ".txt")
        Path(target).write_text("\n".join(texts) + "\n", encoding="utf-8")
    print(f"wrote {stats.produced} samples ({stats.distinct} distinct, "
          f"satisfaction {stats.satisfaction_rate:.3f}) to {args.out}")
    return 0


def cmd_perplexity(args):
    _, _, cnf, vocab = _load_pipeline(args.grammar)
    n = args.max_length
    train = _read_corpus(args.train, n)
    test = _read_corpus(args.test, n)
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    support = token_space_size(len(vocab), n)
    rows = [f"model\tmax_length\tperplexity"]
    for model in models:
        if model == "pc":
            c = circuit_mod.compile_circuit(cnf, n)
            trained, _ = train_pc_em(c, train, args.epochs,
                                     smoothing=args.smoothing)
            fn = lambda w: pc_loglik(trained, w)
            if args.save_models:
                circuit_mod.save(trained, Path(args.save_models) / "model.pc")
        elif model == "pcfg":
            pcfg, _ = train_pcfg(cnf, train, args.epochs,
                                 smoothing=args.smoothing)
            fn = lambda w: pcfg_loglik(pcfg, w)
            if args.save_models:
                save_pcfg(pcfg, Path(args.save_models) / "model.pcfg")
        elif model == "hmm":
            k = args.hmm_states or len(cnf.nonterminals)
            h, _ = train_hmm(k, train, args.epochs, smoothing=args.smoothing,
                             seed=args.seed, vocab=vocab)
            fn = lambda w: hmm_loglik(h, w)
            if args.save_models:
                save_hmm(h, Path(args.save_models) / "model.hmm")
        else:
            raise UsageError(f"unknown model kind {model!r} (pc, pcfg, hmm)")
        value = perplexity(fn, test, smooth_eval=args.smooth_eval,
                           support_size=support if args.smooth_eval else None)
        rows.append(f"{model}\t{n}\t{value:.6f}")
    output = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(output, encoding="utf-8")
    sys.stdout.write(output)
    return 0


def cmd_campaign(args):
    _, _, cnf, vocab = _load_pipeline(args.grammar)
    n = args.max_length
    seeds = _read_corpus(args.corpus, n)
    oracles, sensitive, wildcard = testbed_mod.parse_oracles(
        Path(args.oracles).read_text(encoding="utf-8"), vocab)
    concretizer = None
    if args.concretizer:
        concretizer = ConcretizerSpec.parse(
            Path(args.concretizer).read_text(encoding="utf-8"))

    c = circuit_mod.compile_circuit(cnf, n)
    trained, _ = train_pc_em(c, seeds, args.epochs, smoothing=args.smoothing)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = {}

    def pc_gen(rng):
        return vocab.decode(sampling_mod.sample(trained, rng))

    if args.constraint:
        constraint = sampling_mod.parse_constraint(args.constraint, vocab)
        sampler = sampling_mod._ConditionedSampler(trained, constraint)

        def model_gen(rng):
            return vocab.decode(sampler.draw(rng))
        model_label = f"pc+{args.constraint.replace(' ', '_')}"
    else:
        model_gen = pc_gen
        model_label = "pc"

    runs[model_label] = testbed_mod.run_campaign(
        model_gen, oracles, args.count, args.repeats,
        _task_rng(args.seed, "campaign_model"), grammar=cnf,
        concretizer=concretizer, sensitive=sensitive, wildcard=wildcard)

    baseline_label = None
    if args.baseline != "none":
        if args.baseline == "random":
            def base_gen(rng):
                return vocab.decode(random_derivation(cnf, n, rng))
        elif args.baseline == "hmm":
            h, _ = train_hmm(len(cnf.nonterminals), seeds, args.epochs,
                             smoothing=args.smoothing, seed=args.seed,
                             vocab=vocab)

            def base_gen(rng):
                return vocab.decode(hmm_sample(h, n, rng))
        elif args.baseline == "pc":
            base_gen = pc_gen
        else:
            raise UsageError(f"unknown baseline {args.baseline!r}")
        baseline_label = args.baseline
        runs[baseline_label] = testbed_mod.run_campaign(
            base_gen, oracles, args.count, args.repeats,
            _task_rng(args.seed, "campaign_baseline"), grammar=cnf,
            concretizer=concretizer, sensitive=sensitive, wildcard=wildcard)

    for label, metrics in runs.items():
        (out / f"metrics_{label}.tsv").write_text(metrics.to_tsv(),
                                                  encoding="utf-8")
    (out / "heatmap.txt").write_text(testbed_mod.format_heatmap(runs),
                                     encoding="utf-8")
    if baseline_label:
        targets = [t for t in (args.targets or "").split(",") if t] or None
        report = testbed_mod.compare(runs[model_label], runs[baseline_label],
                                     targets=targets)
        (out / "comparison.tsv").write_text(report.to_tsv(), encoding="utf-8")
    print(f"campaign artifacts written to {out}")
    for label, metrics in runs.items():
        print(f"  {label}: executable {metrics.executable_rate:.3f}, "
              f"coverage {metrics.bug_coverage:.3f}, "
              f"total triggers {metrics.total_triggers:.1f}")
    return 0


def cmd_fixtures(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from importlib import resources
    data = resources.files("pcfuzz") / "fixtures" / "data"
    for entry in sorted(data.iterdir(), key=lambda e: e.name):
        (out / entry.name).write_text(entry.read_text(encoding="utf-8"),
                                      encoding="utf-8")
    print(f"fixture files copied to {out}")
    return 0


def build_parser():
    parser = _Parser(prog="pcfuzz",
                     description="grammar-aware probabilistic circuit fuzzing")
    parser.add_argument("--config", help="JSON file with flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("refactor", help="grammar to BNF + CNF + vocabulary")
    p.add_argument("--grammar", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--verify-upto", type=int, default=0,
                   help="check language preservation up to this length")
    p.set_defaults(func=cmd_refactor)

    p = sub.add_parser("compile", help="grammar to circuit file")
    p.add_argument("--grammar", required=True)
    p.add_argument("--max-length", type=int, required=True)
    p.add_argument("--capacity", type=int,
                   default=circuit_mod.DEFAULT_CAPACITY)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("train", help="EM-train circuit weights on a corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--smoothing", type=float, default=DEFAULT_SMOOTHING)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("query", help="run inference queries from a file")
    p.add_argument("--model", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out")
    p.add_argument("--trace", action="store_true")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("sample", help="draw (optionally conditioned) samples")
    p.add_argument("--model", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--constraint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--stats")
    p.add_argument("--concretizer")
    p.add_argument("--concrete-out")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("perplexity",
                       help="held-out perplexity comparison table")
    p.add_argument("--grammar", required=True)
    p.add_argument("--max-length", type=int, required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--models", default="pc,pcfg,hmm")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--smoothing", type=float, default=DEFAULT_SMOOTHING)
    p.add_argument("--hmm-states", type=int, default=0)
    p.add_argument("--smooth-eval", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save-models")
    p.add_argument("--out")
    p.set_defaults(func=cmd_perplexity)

    p = sub.add_parser("campaign", help="train, generate, measure oracles")
    p.add_argument("--grammar", required=True)
    p.add_argument("--max-length", type=int, required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--oracles", required=True)
    p.add_argument("--count", type=int, default=10000)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--smoothing", type=float, default=DEFAULT_SMOOTHING)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--constraint")
    p.add_argument("--baseline", default="random",
                   choices=["random", "hmm", "pc", "none"])
    p.add_argument("--targets", help="comma separated target oracle ids")
    p.add_argument("--concretizer")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("fixtures", help="copy bundled fixture files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fixtures)
    return parser


def _apply_config(parser, argv):
    """Config file values become defaults; explicit flags win."""
    if "--config" not in argv:
        return argv
    at = argv.index("--config")
    config_path = argv[at + 1]
    try:
        config = json.loads(Path(config_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {config_path}: {exc}") from None
    if not isinstance(config, dict):
        raise InputError("config file must hold a JSON object")
    rest = argv[:at] + argv[at + 2:]
    extra = []
    for key, value in config.items():
        flag = "--" + key.replace("_", "-")
        if flag in rest:
            continue
        if isinstance(value, bool):
            if value:
                extra.append(flag)
        else:
            extra.extend([flag, str(value)])
    # insert after the subcommand so argparse attributes them correctly
    return rest[:1] + extra + rest[1:] if rest else rest


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except PcfuzzError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
