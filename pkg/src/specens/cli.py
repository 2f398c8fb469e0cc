"""Command-line front door.

Exit codes: 0 success, 1 validation failure, 2 usage or config error,
3 runtime error.  Token sequences are comma-separated decimal ids.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from .analysis import (
    alternate_speedup_exact,
    expected_accepted_tokens,
    formula_identity_checks,
    improvement_factor_alternate,
    improvement_factor_se,
    weighted_alpha_lower_bound,
)
from .core import EnsembleKind, EnsembleSpec, RandomSource
from .decoding import Strategy
from .errors import ConfigError, InsufficientSamples, SpecEnsError
from .harness import (
    ExperimentConfig,
    build_decoder,
    derive_seed,
    run_experiment,
    trace_to_json,
    validate_acceptance_identity,
    validate_distributional_correctness,
    validate_never_slower,
)
from .models import load_table_model, random_table_model, read_token_stream, save_table_model, train_ngram

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


# -- gen-model ----------------------------------------------------------------

def cmd_gen_model(args) -> int:
    if args.kind == "table":
        stray = [f for f, v in (("--corpus", args.corpus), ("--order", args.order), ("--delta", args.delta))
                 if v is not None]
        if stray:
            raise UsageError(f"{', '.join(stray)} only apply to --kind ngram")
        if args.vocab is None:
            raise UsageError("--vocab is required")
        build = lambda: random_table_model(args.seed or 0, args.vocab, 1 if args.context is None else args.context,
                                           1.0 if args.concentration is None else args.concentration,
                                           args.cost, args.name)
    else:
        stray = [f for f, v in (("--seed", args.seed), ("--context", args.context),
                                ("--concentration", args.concentration)) if v is not None]
        if stray:
            raise UsageError(f"{', '.join(stray)} only apply to --kind table")
        if args.corpus is None or args.vocab is None:
            raise UsageError("--kind ngram requires --corpus and --vocab")
        if args.vocab < 2:
            raise UsageError("--vocab must be at least 2")
        order = 1 if args.order is None else args.order
        delta = 1.0 if args.delta is None else args.delta
        stream = _runtime(lambda: read_token_stream(args.corpus))
        build = lambda: train_ngram(stream, order, delta, args.vocab, args.cost,
                                    args.name or f"ngram{order}").to_table()
    try:
        model = build()
    except SpecEnsError as e:
        raise UsageError(str(e)) from None
    except ValueError as e:
        raise UsageError(str(e)) from None
    _runtime(lambda: save_table_model(model, args.out))
    print(f"{model.name}: vocab {model.vocab.size}, context {model.context_length}, "
          f"cost {model.cost:g} -> {args.out}")
    return EXIT_OK


def _runtime(fn: Callable):
    try:
        return fn()
    except OSError as e:
        raise _Runtime(str(e)) from None


class _Runtime(Exception):
    pass


# -- decode -------------------------------------------------------------------

def _ensemble_from_args(args, n_models: int) -> EnsembleSpec:
    kind = EnsembleKind(args.ensemble)
    t = 1.0 if args.temperature is None else args.temperature
    if kind is not EnsembleKind.WEIGHTED and args.lam is not None:
        raise UsageError("--lambda only applies to --ensemble weighted")
    if kind is not EnsembleKind.CONTRASTIVE and args.mu is not None:
        raise UsageError("--mu only applies to --ensemble contrastive")
    if kind is not EnsembleKind.GENERAL and args.weights is not None:
        raise UsageError("--weights only applies to --ensemble general")
    try:
        if kind is EnsembleKind.WEIGHTED:
            return EnsembleSpec.weighted(0.5 if args.lam is None else args.lam, t)
        if kind is EnsembleKind.CONTRASTIVE:
            return EnsembleSpec.contrastive(0.1 if args.mu is None else args.mu, t)
        if args.weights is None:
            return EnsembleSpec.uniform(n_models, t)
        return EnsembleSpec.general(args.weights, t)
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_decode(args) -> int:
    paths = [p for p in args.models.split(",") if p]
    try:
        models = [load_table_model(p) for p in paths]
    except OSError as e:
        raise _Runtime(str(e)) from None
    except (SpecEnsError, ValueError) as e:
        raise UsageError(str(e)) from None
    spec = _ensemble_from_args(args, len(models))
    gammas = args.gammas if args.gammas is not None else [1] * len(models)
    try:
        decoder = build_decoder(Strategy(args.strategy), models, spec, gammas, args.max_tokens,
                                args.default_proposer)
    except (SpecEnsError, ValueError) as e:
        raise UsageError(str(e)) from None
    for m in models:
        try:
            m.check_prefix(args.prefix)
        except SpecEnsError as e:
            raise UsageError(str(e)) from None
    trace = decoder.run(RandomSource(args.seed), args.prefix)
    print(" ".join(str(t) for t in trace.tokens))
    if args.trace:
        _runtime(lambda: Path(args.trace).write_text(trace_to_json(trace), encoding="utf-8"))
    return EXIT_OK


# -- experiment ---------------------------------------------------------------

def cmd_experiment(args) -> int:
    try:
        config = ExperimentConfig.load(args.config)
    except OSError as e:
        raise UsageError(f"cannot read config: {e}") from None
    except (SpecEnsError, ValueError) as e:
        raise UsageError(str(e)) from None
    out_dir = args.out_dir or config.output_path or "."
    fmt = args.format or config.output_format
    try:
        report = run_experiment(config, base_dir=Path(args.config).parent)
    except ConfigError as e:
        raise UsageError(str(e)) from None
    written = _runtime(lambda: report.write(out_dir, fmt))
    print(report.summary())
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


# -- validate -----------------------------------------------------------------

STOCK_VOCAB = 16


def _stock_models(seed: int, n: int):
    return [random_table_model(derive_seed(seed, 1000 + i), STOCK_VOCAB, 1) for i in range(n)]


def _suite_distribution(args) -> list[dict]:
    sessions = args.sessions or 200_000
    tol = 0.02 if args.tolerance is None else args.tolerance
    two, three = _stock_models(args.seed, 2), _stock_models(args.seed, 3)
    cells = [(s, e, two) for s in (Strategy.SPEC_ENSEMBLE, Strategy.ALTERNATE)
             for e in (EnsembleSpec.weighted(0.5), EnsembleSpec.contrastive(0.1))]
    cells.append((Strategy.NMODEL_SE, EnsembleSpec.uniform(3), three))
    out = []
    for strategy, spec, models in cells:
        r = validate_distributional_correctness(models, spec, strategy, sessions, tol, seed=args.seed)
        out.append({"name": f"distribution/{strategy.value}/{spec.kind.value}", "passed": r.passed,
                    "tolerance": tol, "sessions": sessions, "tv_by_position": r.tv_by_position})
    return out


def _suite_acceptance(args) -> list[dict]:
    events = args.sessions or 1_000_000
    tol = 0.01 if args.tolerance is None else args.tolerance
    models = [random_table_model(derive_seed(args.seed, 2000 + i), 4, 1) for i in range(3)]
    cells = [(Strategy.SPEC_ENSEMBLE, EnsembleSpec.weighted(0.5), models[:2]),
             (Strategy.ALTERNATE, EnsembleSpec.weighted(0.5), models[:2]),
             (Strategy.NMODEL_SE, EnsembleSpec.uniform(3), models)]
    out = []
    for strategy, spec, ms in cells:
        r = validate_acceptance_identity(ms, spec, strategy, events, tol, seed=args.seed)
        out.append({"name": f"acceptance/{strategy.value}/{spec.kind.value}", "passed": r.passed,
                    "tolerance": tol, "events": r.events, "max_deviation": r.max_deviation,
                    "pooled_deviation": r.pooled_deviation, "empirical_alpha": r.empirical_alpha,
                    "expected_alpha": r.expected_alpha})
    return out


def _suite_never_slower(args) -> list[dict]:
    pairs = [tuple(random_table_model(derive_seed(args.seed, 3000 + i, k), 8, 1) for k in range(2))
             for i in range(50)]
    r = validate_never_slower(pairs, [derive_seed(args.seed, 4000 + j) for j in range(10)])
    return [{"name": "never-slower", "passed": r.passed, "comparisons": r.comparisons,
             "violations": r.violations, "strict_fraction": r.strict_fraction}]


def _suite_formulas(args) -> list[dict]:
    return [{**c, "name": f"formulas/{c['name']}"} for c in formula_identity_checks()]


SUITES = {
    "formulas": _suite_formulas,
    "never-slower": _suite_never_slower,
    "acceptance": _suite_acceptance,
    "distribution": _suite_distribution,
}


def cmd_validate(args) -> int:
    if args.tolerance is not None and not args.tolerance > 0:
        raise UsageError("--tolerance must be positive")
    if args.sessions is not None and args.sessions < 1:
        raise UsageError("--sessions must be positive")
    names = list(SUITES) if args.suite == "all" else [args.suite]
    checks = []
    try:
        for name in names:
            checks.extend(SUITES[name](args))
    except InsufficientSamples as e:
        raise UsageError(str(e)) from None
    passed = all(c["passed"] for c in checks)
    print(json.dumps({"suite": args.suite, "seed": args.seed, "passed": passed, "checks": checks}, indent=2))
    return EXIT_OK if passed else EXIT_FAILED


# -- formulas -----------------------------------------------------------------

def cmd_formulas(args) -> int:
    alpha, gamma, c = args.alpha, args.gamma, args.c
    gq = gamma if args.gamma_q is None else args.gamma_q
    gp = 1 if args.gamma_p is None else args.gamma_p
    try:
        rows = [
            ("expected_tokens", expected_accepted_tokens(alpha, gamma)),
            ("factor_spec_ensemble", improvement_factor_se(alpha, gamma, c)),
            ("factor_alternate", improvement_factor_alternate(alpha, gq, gp, c)),
            ("factor_alternate_exact", alternate_speedup_exact(alpha, alpha, gq, gp, c)),
        ]
        if args.lam is not None:
            rows.append(("lambda_alpha_bound", weighted_alpha_lower_bound(args.lam)))
    except ValueError as e:
        raise UsageError(str(e)) from None
    print(f"alpha={alpha:g} gamma={gamma} gamma_q={gq} gamma_p={gp} c={c:g}")
    for name, value in rows:
        print(f"{name:<24} {value:.6f}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="specens", description="Speculative-ensemble decoding on simulated-cost models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-model", help="write a fixture model file")
    g.add_argument("--kind", choices=["table", "ngram"], required=True, help="model family")
    g.add_argument("--seed", type=_seed, help="table: Dirichlet seed (default 0)")
    g.add_argument("--vocab", type=int, help="vocabulary size, at least 2")
    g.add_argument("--context", type=int, help="table: context length (default 1)")
    g.add_argument("--concentration", type=float, help="table: Dirichlet concentration (default 1.0)")
    g.add_argument("--corpus", help="ngram: whitespace-separated token-id file")
    g.add_argument("--order", type=int, help="ngram: context length (default 1)")
    g.add_argument("--delta", type=float, help="ngram: additive smoothing (default 1.0)")
    g.add_argument("--cost", type=float, default=1.0, help="simulated cost per invocation (default 1.0)")
    g.add_argument("--name", help="model name stored in the file")
    g.add_argument("--out", required=True, help="output path")
    g.set_defaults(func=cmd_gen_model)

    d = sub.add_parser("decode", help="decode one session and print the token ids")
    d.add_argument("--strategy", choices=[s.value for s in Strategy], required=True,
                   help="decoding strategy; vanilla-sd drafts with the default proposer and verifies "
                        "against the whole ensemble")
    d.add_argument("--models", required=True, help="comma-separated model files")
    d.add_argument("--ensemble", choices=[k.value for k in EnsembleKind], default="weighted",
                   help="ensemble function (default weighted)")
    d.add_argument("--lambda", dest="lam", type=float, help="weighted: weight of the first model (default 0.5)")
    d.add_argument("--mu", type=float, help="contrastive: amateur strength (default 0.1)")
    d.add_argument("--weights", type=_float_list, help="general: comma-separated weights (default uniform)")
    d.add_argument("--temperature", type=float, help="sampling temperature, 0 for greedy (default 1.0)")
    d.add_argument("--gammas", type=_int_list, help="comma-separated proposal lengths, one per model (default 1s)")
    d.add_argument("--default-proposer", type=int, default=0, help="index of the default proposer (default 0)")
    d.add_argument("--max-tokens", type=int, default=32, help="tokens to emit (default 32)")
    d.add_argument("--seed", type=_seed, default=0, help="random seed (default 0)")
    d.add_argument("--prefix", type=_int_list, default=[], help="comma-separated prompt token ids")
    d.add_argument("--trace", help="write the full decode trace as JSON to this path")
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("experiment", help="run a config-driven experiment grid")
    e.add_argument("--config", required=True, help="experiment config JSON")
    e.add_argument("--out-dir", help="report directory (default: config output path, else .)")
    e.add_argument("--format", choices=["csv", "json", "both"], help="report format (default: config, else both)")
    e.set_defaults(func=cmd_experiment)

    v = sub.add_parser("validate", help="run statistical validation suites; prints a JSON verdict")
    v.add_argument("--suite", choices=[*SUITES, "all"], default="all", help="suite to run (default all)")
    v.add_argument("--sessions", type=int,
                   help="sessions (distribution, default 200000) or verification events "
                        "(acceptance, default 1000000)")
    v.add_argument("--tolerance", type=float,
                   help="TV tolerance (distribution, default 0.02) or acceptance deviation "
                        "(acceptance, default 0.01)")
    v.add_argument("--seed", type=_seed, default=0, help="fixture and sampling seed (default 0)")
    v.set_defaults(func=cmd_validate)

    f = sub.add_parser("formulas", help="evaluate the speed and acceptance formulas")
    f.add_argument("--alpha", type=float, default=0.8, help="acceptance rate (default 0.8)")
    f.add_argument("--gamma", type=int, default=5, help="proposal length (default 5)")
    f.add_argument("--gamma-q", type=int, help="alternate: default proposer's length (default --gamma)")
    f.add_argument("--gamma-p", type=int, help="alternate: other model's length (default 1)")
    f.add_argument("--c", type=float, default=0.1, help="proposer/verifier cost ratio (default 0.1)")
    f.add_argument("--lambda", dest="lam", type=float, help="weighted-ensemble lambda for the alpha bound")
    f.set_defaults(func=cmd_formulas)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except _Runtime as e:
        print(f"specens: I/O error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (SpecEnsError, ValueError, OSError, ArithmeticError) as e:
        print(f"specens: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
