"""Config-driven experiments, reports, and statistical validation suites.

Speed is simulated: a cell's speed is emitted tokens per unit of simulated
time, and speedups are ratios against the vanilla-ensemble cell on the same
model set and sweep value.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime
import hashlib
import io
import json
import math
from collections import Counter, defaultdict
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .analysis import (
    acceptance_rate_exact,
    alternate_speedup_exact,
    exact_ensemble_distribution,
    improvement_factor_alternate,
    improvement_factor_se,
)
from .core import MAX_SEED, EnsembleKind, EnsembleSpec, RandomSource, tv_distance
from .decoding import DecodeConfig, Decoder, DecodeTrace, Strategy, make_decoder, simulated_time
from .errors import ConfigError, InsufficientSamples, SpecEnsError
from .models import (
    EnsembleModel,
    LanguageModel,
    load_table_model,
    random_table_model,
    read_token_stream,
    train_ngram,
)

SWEEP_PARAMETERS = ("lambda", "mu", "gamma", "temperature")


def derive_seed(seed: int, *path: int) -> int:
    """Independent 64-bit seed for a (cell, session, ...) coordinate."""
    return int(np.random.SeedSequence([seed, *path]).generate_state(1, np.uint64)[0])


# -- configuration ------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class ModelSpec:
    kind: str                      # "table" | "ngram" | "file"
    cost: float | None = None      # file models keep their stored cost unless set
    name: str | None = None
    seed: int = 0
    vocab_size: int | None = None
    context_length: int = 1
    concentration: float = 1.0
    corpus: str | None = None
    order: int = 1
    delta: float = 1.0
    path: str | None = None

    def build(self, base_dir: Path | None = None) -> LanguageModel:
        def resolve(p: str) -> Path:
            p = Path(p)
            return p if p.is_absolute() or base_dir is None else base_dir / p

        cost = 1.0 if self.cost is None else self.cost
        if self.kind == "table":
            if self.vocab_size is None:
                raise ConfigError("table models need vocab_size")
            return random_table_model(self.seed, self.vocab_size, self.context_length,
                                      self.concentration, cost, self.name)
        if self.kind == "ngram":
            if self.corpus is None or self.vocab_size is None:
                raise ConfigError("ngram models need corpus and vocab_size")
            stream = read_token_stream(resolve(self.corpus))
            return train_ngram(stream, self.order, self.delta, self.vocab_size, cost,
                               self.name or f"ngram{self.order}")
        if self.kind == "file":
            if self.path is None:
                raise ConfigError("file models need a path")
            m = load_table_model(resolve(self.path))
            return m if self.cost is None else m.with_cost(self.cost)
        raise ConfigError(f"unknown model kind {self.kind!r}")


@dataclasses.dataclass(frozen=True)
class StrategySpec:
    strategy: Strategy
    gammas: tuple[int, ...] | None = None
    models: tuple[int, ...] | None = None       # indices into the config's model list
    default_proposer_index: int = 0
    ensemble: EnsembleSpec | None = None        # overrides the config-level ensemble


@dataclasses.dataclass(frozen=True)
class Sweep:
    parameter: str
    values: tuple[float, ...]


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    models: tuple[ModelSpec, ...]
    ensemble: EnsembleSpec
    strategies: tuple[StrategySpec, ...]
    sweep: Sweep | None = None
    sessions: int = 100
    tokens_per_session: int = 64
    prefix: tuple[int, ...] = ()
    seed: int = 0
    output_path: str | None = None
    output_format: str = "both"
    exact_alpha: bool = False

    def __post_init__(self):
        if self.sessions < 1 or self.tokens_per_session < 1:
            raise ConfigError("sessions and tokens_per_session must be positive")
        if not 0 <= self.seed <= MAX_SEED:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if not self.strategies:
            raise ConfigError("at least one strategy is required")
        if self.output_format not in ("csv", "json", "both"):
            raise ConfigError(f"unknown output format {self.output_format!r}")
        n = len(self.models)
        for s in self.strategies:
            if s.models is not None and n and any(not 0 <= i < n for i in s.models):
                raise ConfigError(f"strategy {s.strategy.value} references undeclared models {s.models}")
        if self.sweep is not None:
            _check_sweep(self.sweep)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            models = tuple(ModelSpec(**m) for m in d.get("models", []))
            ensemble = EnsembleSpec.from_dict(d["ensemble"])
            strategies = tuple(_strategy_from_dict(s) for s in d["strategies"])
            sweep = None
            if d.get("sweep"):
                sw = d["sweep"]
                sweep = Sweep(sw["parameter"], tuple(float(v) for v in sw["values"]))
            out = d.get("output") or {}
            return cls(models, ensemble, strategies, sweep,
                       int(d.get("sessions", 100)), int(d.get("tokens_per_session", 64)),
                       tuple(int(t) for t in d.get("prefix", ())), int(d.get("seed", 0)),
                       out.get("path"), out.get("format", "both"), bool(d.get("exact_alpha", False)))
        except SpecEnsError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid experiment config: {e!r}") from None

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        d = {
            "models": [{k: v for k, v in dataclasses.asdict(m).items() if v is not None} for m in self.models],
            "ensemble": self.ensemble.to_dict(),
            "strategies": [_strategy_to_dict(s) for s in self.strategies],
            "sessions": self.sessions,
            "tokens_per_session": self.tokens_per_session,
            "prefix": list(self.prefix),
            "seed": self.seed,
            "exact_alpha": self.exact_alpha,
        }
        if self.sweep is not None:
            d["sweep"] = {"parameter": self.sweep.parameter, "values": list(self.sweep.values)}
        if self.output_path is not None:
            d["output"] = {"path": self.output_path, "format": self.output_format}
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _strategy_from_dict(d: dict) -> StrategySpec:
    ens = EnsembleSpec.from_dict(d["ensemble"]) if d.get("ensemble") else None
    return StrategySpec(Strategy(d["strategy"]),
                        tuple(int(g) for g in d["gammas"]) if d.get("gammas") else None,
                        tuple(int(i) for i in d["models"]) if d.get("models") is not None else None,
                        int(d.get("default_proposer_index", 0)), ens)


def _strategy_to_dict(s: StrategySpec) -> dict:
    d: dict = {"strategy": s.strategy.value, "default_proposer_index": s.default_proposer_index}
    if s.gammas is not None:
        d["gammas"] = list(s.gammas)
    if s.models is not None:
        d["models"] = list(s.models)
    if s.ensemble is not None:
        d["ensemble"] = s.ensemble.to_dict()
    return d


def _check_sweep(sweep: Sweep) -> None:
    if sweep.parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"cannot sweep {sweep.parameter!r}; choose from {SWEEP_PARAMETERS}")
    if not sweep.values:
        raise ConfigError("sweep needs at least one value")
    for v in sweep.values:
        ok = {"lambda": 0.0 <= v <= 1.0, "mu": v >= 0.0, "temperature": v >= 0.0,
              "gamma": v >= 1 and float(v).is_integer()}[sweep.parameter]
        if not ok:
            raise ConfigError(f"sweep value {v} out of range for {sweep.parameter}")


# -- decoder construction -----------------------------------------------------

def build_decoder(strategy: Strategy, models: Sequence[LanguageModel], ensemble: EnsembleSpec,
                  gammas: Sequence[int], max_tokens: int, default_proposer_index: int = 0,
                  decoder_cls: type[Decoder] | None = None) -> Decoder:
    """Decoder for ``strategy`` whose output distribution is ``ensemble`` over ``models``.

    Plain speculative decoding speculates on the ensemble as a whole: the
    default proposer drafts and an :class:`EnsembleModel` of all members
    verifies.
    """
    strategy = Strategy(strategy)
    models = list(models)
    gammas = tuple(gammas)
    if len(gammas) != len(models):
        raise ConfigError(f"{len(gammas)} proposal lengths for {len(models)} models")
    dpi = default_proposer_index
    if strategy is Strategy.VANILLA_SD:
        if not 0 <= dpi < len(models):
            raise ConfigError(f"default proposer index {dpi} out of range")
        try:
            target = EnsembleModel(models, ensemble)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        models, gammas, dpi = [models[dpi], target], (gammas[dpi], 1), 0
    config = DecodeConfig(strategy, ensemble, gammas, max_tokens, 0, dpi)
    if decoder_cls is not None:
        return decoder_cls(models, config)
    return make_decoder(models, config)


def _apply_sweep(ensemble: EnsembleSpec, gammas: tuple[int, ...], dpi: int, parameter: str | None,
                 value: float | None) -> tuple[EnsembleSpec, tuple[int, ...]]:
    if parameter is None:
        return ensemble, gammas
    if parameter == "temperature":
        return ensemble.replace(temperature=value), gammas
    if parameter == "gamma":
        g = list(gammas)
        g[dpi] = int(value)
        return ensemble, tuple(g)
    expected = EnsembleKind.WEIGHTED if parameter == "lambda" else EnsembleKind.CONTRASTIVE
    if ensemble.kind is not expected:
        raise ConfigError(f"cannot sweep {parameter} on a {ensemble.kind.value} ensemble")
    return ensemble.replace(**({"lam": value} if parameter == "lambda" else {"mu": value})), gammas


# -- running experiments ------------------------------------------------------

@dataclasses.dataclass
class CellRecord:
    cell: int
    strategy: str
    models: list[int]
    sweep_parameter: str | None
    sweep_value: float | None
    ensemble: dict
    gammas: list[int]
    default_proposer_index: int
    sessions: int
    tokens: int
    invocations: list[int]
    costs: list[float]
    simulated_time: float
    tokens_per_time: float
    speedup: float | None = None
    accepted: int = 0
    rejected: int = 0
    empirical_alpha: float | None = None
    alpha_by_origin: dict[str, float] = dataclasses.field(default_factory=dict)
    alpha_by_depth: list[float] = dataclasses.field(default_factory=list)
    exact_alpha: float | None = None
    cost_ratio: float | None = None
    predicted_alpha_bound: float | None = None
    predicted_factor: float | None = None
    predicted_factor_exact: float | None = None


CSV_FIELDS = [f.name for f in dataclasses.fields(CellRecord)]


@dataclasses.dataclass
class ExperimentReport:
    cells: list[CellRecord]
    metadata: dict

    def payload(self) -> dict:
        """Everything except the wall-clock timestamp."""
        meta = {k: v for k, v in self.metadata.items() if k != "generated_at"}
        return {"metadata": meta, "cells": [dataclasses.asdict(c) for c in self.cells]}

    def to_dict(self) -> dict:
        return {"metadata": dict(self.metadata), "cells": [dataclasses.asdict(c) for c in self.cells]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(CSV_FIELDS)
        for c in self.cells:
            row = []
            for name in CSV_FIELDS:
                v = getattr(c, name)
                if isinstance(v, (list, dict)):
                    v = json.dumps(v)
                elif v is None:
                    v = ""
                row.append(v)
            w.writerow(row)
        return buf.getvalue()

    def write(self, out_dir: str | Path, fmt: str = "both", stem: str = "report") -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        if fmt in ("csv", "both"):
            p = out_dir / f"{stem}.csv"
            p.write_text(self.to_csv(), encoding="utf-8", newline="")
            written.append(p)
        if fmt in ("json", "both"):
            p = out_dir / f"{stem}.json"
            p.write_text(self.to_json(), encoding="utf-8")
            written.append(p)
        return written

    def summary(self) -> str:
        lines = [f"{'cell':>4}  {'strategy':<17} {'sweep':<16} {'speedup':>8} {'alpha':>6}"]
        for c in self.cells:
            sweep = "" if c.sweep_parameter is None else f"{c.sweep_parameter}={c.sweep_value:g}"
            alpha = "-" if c.empirical_alpha is None else f"{c.empirical_alpha:.2f}"
            lines.append(f"{c.cell:>4}  {c.strategy:<17} {sweep:<16} {c.speedup:>7.2f}x {alpha:>6}")
        return "\n".join(lines)


@dataclasses.dataclass
class _Plan:
    strategy: Strategy
    models: tuple[int, ...]
    ensemble: EnsembleSpec
    gammas: tuple[int, ...]
    dpi: int
    sweep_value: float | None
    group: tuple


def _plan_cells(config: ExperimentConfig, n_models: int) -> list[_Plan]:
    sweep_values = config.sweep.values if config.sweep else (None,)
    parameter = config.sweep.parameter if config.sweep else None
    plans = []
    for value in sweep_values:
        group_plans: list[_Plan] = []
        baselines: dict[tuple[int, ...], _Plan] = {}
        for s in config.strategies:
            idx = s.models if s.models is not None else tuple(range(n_models))
            gammas = s.gammas if s.gammas is not None else (1,) * len(idx)
            ens, gammas = _apply_sweep(s.ensemble or config.ensemble, tuple(gammas),
                                       s.default_proposer_index, parameter, value)
            plan = _Plan(s.strategy, idx, ens, gammas, s.default_proposer_index, value, (value, idx))
            group_plans.append(plan)
            if s.strategy is Strategy.VANILLA_ENSEMBLE and idx not in baselines:
                baselines[idx] = plan
        for p in group_plans:
            if p.models not in baselines:
                base = _Plan(Strategy.VANILLA_ENSEMBLE, p.models, p.ensemble, (1,) * len(p.models), 0,
                             value, p.group)
                baselines[p.models] = base
                plans.append(base)
        plans.extend(group_plans)
    return plans


def _alpha_bound(plan: _Plan) -> float | None:
    ens = plan.ensemble
    if plan.strategy in (Strategy.VANILLA_ENSEMBLE, Strategy.VANILLA_SD):
        return None
    if ens.kind is EnsembleKind.WEIGHTED:
        return ens.lam if plan.dpi == 0 else 1.0 - ens.lam
    if ens.kind is EnsembleKind.GENERAL:
        return ens.weights[plan.dpi]
    return None


class _ExactAlpha:
    """Per-event exact acceptance probabilities, cached by context."""

    def __init__(self, decoder: Decoder, members: Sequence[LanguageModel], ensemble: EnsembleSpec):
        self.decoder = decoder
        self.members = list(members)
        self.ensemble = ensemble
        self.k = max(m.context_length for m in decoder.models)
        self._cache: dict = {}

    def __call__(self, origin: int, full_prefix: Sequence[int]) -> float:
        key = (origin, tuple(full_prefix[-self.k:]) if self.k else ())
        a = self._cache.get(key)
        if a is None:
            ctx = list(key[1])
            q = self.decoder.models[origin].distribution_for(ctx, self.ensemble.temperature)
            r = exact_ensemble_distribution(self.members, self.ensemble, ctx)
            a = self._cache[key] = acceptance_rate_exact(q, r)
        return a


def run_cell(decoder: Decoder, sessions: int, seed: int, cell: int, prefix: Sequence[int] = (),
             exact: _ExactAlpha | None = None) -> dict:
    """Aggregate ``sessions`` decodes; session ``j`` uses ``derive_seed(seed, cell, j)``."""
    n = len(decoder.models)
    invocations = [0] * n
    tokens = 0
    acc_by_origin: Counter = Counter()
    tot_by_origin: Counter = Counter()
    acc_by_depth: Counter = Counter()
    tot_by_depth: Counter = Counter()
    exact_sum = 0.0
    prefix = list(prefix)
    for j in range(sessions):
        trace = decoder.run(RandomSource(derive_seed(seed, cell, j)), prefix)
        tokens += len(trace.tokens)
        for k in range(n):
            invocations[k] += trace.invocations[k]
        for step in trace.steps:
            for v in step.verifications:
                tot_by_origin[v.origin] += 1
                tot_by_depth[v.depth] += 1
                if v.accepted:
                    acc_by_origin[v.origin] += 1
                    acc_by_depth[v.depth] += 1
                if exact is not None:
                    exact_sum += exact(v.origin, prefix + trace.tokens[:v.position])
    events = sum(tot_by_origin.values())
    accepted = sum(acc_by_origin.values())
    return {
        "tokens": tokens,
        "invocations": invocations,
        "accepted": accepted,
        "rejected": events - accepted,
        "alpha_by_origin": {str(o): acc_by_origin[o] / tot_by_origin[o] for o in sorted(tot_by_origin)},
        "alpha_by_depth": [acc_by_depth[d] / tot_by_depth[d] for d in range(max(tot_by_depth, default=-1) + 1)],
        "exact_alpha": exact_sum / events if exact is not None and events else None,
    }


def run_experiment(config: ExperimentConfig, models: Sequence[LanguageModel] | None = None,
                   base_dir: str | Path | None = None) -> ExperimentReport:
    """Run every (sweep value x strategy) cell plus the vanilla-ensemble baselines.

    ``models`` replaces the config's model specs when given.
    """
    if models is None:
        if not config.models:
            raise ConfigError("config declares no models")
        models = [m.build(Path(base_dir) if base_dir else None) for m in config.models]
    models = list(models)
    plans = _plan_cells(config, len(models))
    cells: list[CellRecord] = []
    baseline_speed: dict[tuple, float] = {}
    for index, plan in enumerate(plans):
        members = [models[i] for i in plan.models]
        try:
            decoder = build_decoder(plan.strategy, members, plan.ensemble, plan.gammas,
                                    config.tokens_per_session, plan.dpi)
            exact = _ExactAlpha(decoder, members, plan.ensemble) \
                if config.exact_alpha and plan.strategy.speculative else None
            agg = run_cell(decoder, config.sessions, config.seed, index, config.prefix, exact)
        except SpecEnsError as e:
            raise type(e)(f"cell {index} ({plan.strategy.value}, models {list(plan.models)}, "
                          f"sweep value {plan.sweep_value}): {e}") from e
        costs = decoder.costs
        time = simulated_time(agg["invocations"], costs)
        record = CellRecord(
            cell=index, strategy=plan.strategy.value, models=list(plan.models),
            sweep_parameter=config.sweep.parameter if config.sweep else None,
            sweep_value=plan.sweep_value, ensemble=plan.ensemble.to_dict(), gammas=list(plan.gammas),
            default_proposer_index=plan.dpi, sessions=config.sessions, tokens=agg["tokens"],
            invocations=agg["invocations"], costs=costs, simulated_time=time,
            tokens_per_time=agg["tokens"] / time, accepted=agg["accepted"], rejected=agg["rejected"],
            alpha_by_origin=agg["alpha_by_origin"], alpha_by_depth=agg["alpha_by_depth"],
            exact_alpha=agg["exact_alpha"], predicted_alpha_bound=_alpha_bound(plan),
        )
        events = record.accepted + record.rejected
        if events:
            record.empirical_alpha = record.accepted / events
        if plan.strategy is Strategy.VANILLA_ENSEMBLE:
            baseline_speed.setdefault(plan.group, record.tokens_per_time)
        _predict(record, plan, decoder)
        cells.append(record)
    for record, plan in zip(cells, plans):
        record.speedup = record.tokens_per_time / baseline_speed[plan.group]
    metadata = {
        "config_hash": config.hash(),
        "seed": config.seed,
        "engine_version": __version__,
        "generated_at": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
    }
    return ExperimentReport(cells, metadata)


def _predict(record: CellRecord, plan: _Plan, decoder: Decoder) -> None:
    if plan.strategy not in (Strategy.SPEC_ENSEMBLE, Strategy.ALTERNATE) or record.empirical_alpha is None:
        return
    prop = plan.dpi
    ver = 1 - prop
    costs = decoder.costs
    c = costs[prop] / costs[ver]
    record.cost_ratio = c
    alpha = record.empirical_alpha
    if plan.strategy is Strategy.SPEC_ENSEMBLE:
        record.predicted_factor = improvement_factor_se(alpha, plan.gammas[prop], c)
        return
    record.predicted_factor = improvement_factor_alternate(alpha, plan.gammas[prop], plan.gammas[ver], c)
    by_origin = record.alpha_by_origin
    a_q = by_origin.get(str(prop), alpha)
    a_p = by_origin.get(str(ver), alpha)
    record.predicted_factor_exact = alternate_speedup_exact(a_q, a_p, plan.gammas[prop], plan.gammas[ver], c)


def tradeoff_sweep(proposer: LanguageModel, target: LanguageModel, lambdas: Sequence[float],
                   config: DecodeConfig, sessions: int = 200, prefix: Sequence[int] = ()) -> ExperimentReport:
    """Speculative ensemble over a weighted-ensemble lambda grid.

    ``config`` supplies proposal lengths, session length, seed and
    temperature; only speed and acceptance are reported.
    """
    for lam in lambdas:
        if not 0.0 <= lam <= 1.0:
            raise ConfigError(f"lambda {lam} outside [0, 1]")
    ens = EnsembleSpec.weighted(0.5, config.ensemble.temperature)
    exp = ExperimentConfig(
        models=(), ensemble=ens,
        strategies=(StrategySpec(Strategy.SPEC_ENSEMBLE, tuple(config.gammas), None,
                                 config.default_proposer_index),),
        sweep=Sweep("lambda", tuple(float(x) for x in lambdas)),
        sessions=sessions, tokens_per_session=config.max_tokens, prefix=tuple(prefix),
        seed=config.seed, exact_alpha=True,
    )
    return run_experiment(exp, models=[proposer, target])


# -- validation suites --------------------------------------------------------

def _context_key(full: Sequence[int], k: int) -> tuple[int, ...]:
    return tuple(full[-k:]) if k else ()


@dataclasses.dataclass
class DistributionCheck:
    strategy: str
    sessions: int
    tolerance: float
    tv_by_position: list[float]
    strata: list[list[dict]]
    passed: bool


def validate_distributional_correctness(
        models: Sequence[LanguageModel], ensemble: EnsembleSpec, strategy: Strategy, sessions: int,
        tolerance: float, *, gammas: Sequence[int] | None = None, prefix: Sequence[int] = (),
        seed: int = 0, positions: int = 3, default_proposer_index: int = 0,
        decoder_cls: type[Decoder] | None = None, max_strata: int = 4, min_stratum: int = 1000,
        min_sessions: int = 100_000) -> DistributionCheck:
    """Check that each of the first ``positions`` tokens follows the exact ensemble.

    Sessions are stratified by the realized context at each position.  The
    pass statistic per position is the TV distance (sum of absolute
    differences) between the empirical token histogram and the mixture of
    exact ensemble rows weighted by stratum frequency.  The most frequent
    strata are also reported individually.
    """
    if sessions < min_sessions:
        raise InsufficientSamples(f"{sessions} sessions requested, at least {min_sessions} required")
    v = models[0].vocab.size
    if v > 64:
        raise ConfigError("distribution checks support vocabularies of at most 64 tokens")
    gammas = tuple(gammas) if gammas is not None else (2,) * len(models)
    decoder = build_decoder(strategy, models, ensemble, gammas, positions, default_proposer_index,
                            decoder_cls)
    k = max(m.context_length for m in models)
    prefix = list(prefix)
    counts = [defaultdict(lambda: np.zeros(v, dtype=np.int64)) for _ in range(positions)]
    for j in range(sessions):
        tokens = decoder.run(RandomSource(derive_seed(seed, j)), prefix).tokens
        full = prefix + tokens
        for i in range(positions):
            counts[i][_context_key(full[:len(prefix) + i], k)][tokens[i]] += 1
    tvs, strata = [], []
    for i in range(positions):
        mixture = np.zeros(v)
        hist = np.zeros(v)
        rows = []
        for key, c in counts[i].items():
            n = int(c.sum())
            r = exact_ensemble_distribution(models, ensemble, list(key) if k else prefix + [])
            mixture += n * r.probs
            hist += c
            rows.append((n, key, c, r))
        tvs.append(float(np.abs(hist / sessions - mixture / sessions).sum()))
        rows.sort(key=lambda x: (-x[0], x[1]))
        detail = []
        for n, key, c, r in rows[:max_strata]:
            if n < min_stratum:
                raise InsufficientSamples(f"position {i}: stratum {list(key)} has only {n} sessions")
            detail.append({"context": list(key), "sessions": n,
                           "tv": float(np.abs(c / n - r.probs).sum())})
        strata.append(detail)
    return DistributionCheck(Strategy(strategy).value, sessions, tolerance, tvs, strata,
                             all(t <= tolerance for t in tvs))


@dataclasses.dataclass
class AcceptanceCheck:
    strategy: str
    events: int
    tolerance: float
    empirical_alpha: float
    expected_alpha: float
    pooled_deviation: float
    max_deviation: float
    groups: list[dict]
    passed: bool


def validate_acceptance_identity(
        models: Sequence[LanguageModel], ensemble: EnsembleSpec, strategy: Strategy, events: int,
        tolerance: float, *, gammas: Sequence[int] | None = None, prefix: Sequence[int] = (),
        seed: int = 0, tokens_per_session: int = 64, default_proposer_index: int = 0,
        decoder_cls: type[Decoder] | None = None, min_group_events: int = 40_000,
        min_events: int = 100_000) -> AcceptanceCheck:
    """Compare empirical acceptance with the exact sum-of-min rate, per (q, r) context.

    Verification events are grouped by drafting model and realized context.
    Groups with at least ``min_group_events`` events are each held to
    ``tolerance``; the pooled rate over all events is held to it as well.
    The default floor keeps a 0.01 tolerance at four standard errors or more.
    """
    if events < min_events:
        raise InsufficientSamples(f"{events} events requested, at least {min_events} required")
    gammas = tuple(gammas) if gammas is not None else (2,) * len(models)
    decoder = build_decoder(strategy, models, ensemble, gammas, tokens_per_session,
                            default_proposer_index, decoder_cls)
    exact = _ExactAlpha(decoder, models, ensemble)
    prefix = list(prefix)
    acc: Counter = Counter()
    tot: Counter = Counter()
    seen = 0
    j = 0
    while seen < events:
        trace = decoder.run(RandomSource(derive_seed(seed, j)), prefix)
        j += 1
        full = prefix + trace.tokens
        for step in trace.steps:
            for ev in step.verifications:
                key = (ev.origin, _context_key(full[:len(prefix) + ev.position], exact.k))
                tot[key] += 1
                acc[key] += ev.accepted
                seen += 1
        if j > 100 * events:
            raise InsufficientSamples("the strategy produces no verification events")
    groups = []
    expected_sum = 0.0
    for key in sorted(tot):
        origin, ctx = key
        a = exact(origin, list(ctx))
        expected_sum += a * tot[key]
        groups.append({"origin": origin, "context": list(ctx), "events": tot[key],
                       "empirical": acc[key] / tot[key], "exact": a,
                       "deviation": acc[key] / tot[key] - a})
    assessed = [g for g in groups if g["events"] >= min_group_events]
    if not assessed:
        raise InsufficientSamples(f"no context gathered {min_group_events} verification events")
    empirical = sum(acc.values()) / seen
    expected = expected_sum / seen
    max_dev = max(abs(g["deviation"]) for g in assessed)
    pooled = abs(empirical - expected)
    return AcceptanceCheck(Strategy(strategy).value, seen, tolerance, empirical, expected, pooled, max_dev,
                           groups, max_dev <= tolerance and pooled <= tolerance)


@dataclasses.dataclass
class NeverSlowerCheck:
    comparisons: int
    violations: int
    strict_fraction: float
    records: list[dict]
    passed: bool


def validate_never_slower(model_pairs: Sequence[tuple[LanguageModel, LanguageModel]], seeds: Sequence[int],
                          *, ensemble: EnsembleSpec | None = None, max_tokens: int = 64,
                          prefix: Sequence[int] = ()) -> NeverSlowerCheck:
    """Alternate proposal with unit proposal lengths against the vanilla ensemble."""
    ensemble = ensemble or EnsembleSpec.weighted(0.5)
    records = []
    for pi, (q, p) in enumerate(model_pairs):
        alt = build_decoder(Strategy.ALTERNATE, [q, p], ensemble, (1, 1), max_tokens)
        van = build_decoder(Strategy.VANILLA_ENSEMBLE, [q, p], ensemble, (1, 1), max_tokens)
        for seed in seeds:
            a = alt.run(RandomSource(seed), prefix)
            b = van.run(RandomSource(seed), prefix)
            if len(a.tokens) != len(b.tokens):
                raise SpecEnsError("strategies emitted different token counts")
            records.append({"pair": pi, "seed": seed, "tokens": len(a.tokens),
                            "alternate_time": a.simulated_time, "vanilla_time": b.simulated_time})
    violations = sum(r["alternate_time"] > r["vanilla_time"] for r in records)
    strict = sum(r["alternate_time"] < r["vanilla_time"] for r in records)
    return NeverSlowerCheck(len(records), violations, strict / len(records) if records else math.nan,
                            records, violations == 0)


def trace_to_json(trace: DecodeTrace) -> str:
    return json.dumps(trace.to_dict(), indent=1) + "\n"
