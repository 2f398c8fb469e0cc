"""Decoding strategies that all emit a :class:`DecodeTrace`.

* vanilla ensemble: every model runs once per token, tokens sampled from r;
* vanilla speculative decoding: draft/verify against the target directly,
  bonus token appended on full acceptance;
* speculative ensemble: draft/verify against r = E(q, p), no bonus token;
* alternate proposal: the two models swap roles after a fully accepted
  cycle and the verifier's bonus token opens the next proposal;
* n-model speculative ensemble: per-model queues of scored rows, a token is
  verified once every model has scored it.

Accounting is in invocations: one autoregressive draft step is one
invocation of the drafting model, one parallel scoring pass is one
invocation of the scoring model.  ``simulated_time`` is the dot product of
invocation counts with the models' declared costs.

Random draws are consumed in a fixed order: one per drafted token while
drafting, then one per verified token in sequence order, then one for the
resample (on rejection) or the bonus token (on full acceptance).
"""

from __future__ import annotations

import dataclasses
import enum
from typing import Sequence

import numpy as np

from .core import (
    ZERO_MASS,
    Distribution,
    EnsembleKind,
    EnsembleSpec,
    RandomSource,
    ensemble,
    inverse_cdf,
)
from .errors import ConfigError, TokenOutOfRange, VocabMismatchError
from .models import LanguageModel


class Strategy(str, enum.Enum):
    VANILLA_ENSEMBLE = "vanilla-ensemble"
    VANILLA_SD = "vanilla-sd"
    SPEC_ENSEMBLE = "spec-ensemble"
    ALTERNATE = "alternate"
    NMODEL_SE = "nmodel-se"

    @property
    def speculative(self) -> bool:
        return self is not Strategy.VANILLA_ENSEMBLE


@dataclasses.dataclass(frozen=True)
class DecodeConfig:
    strategy: Strategy
    ensemble: EnsembleSpec
    gammas: tuple[int, ...]
    max_tokens: int
    seed: int = 0
    default_proposer_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "gammas", tuple(int(g) for g in self.gammas))
        if any(g < 1 for g in self.gammas):
            raise ConfigError(f"every proposal length must be >= 1: {self.gammas}")
        if self.max_tokens < 1:
            raise ConfigError("max_tokens must be positive")

    def replace(self, **changes) -> "DecodeConfig":
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass(slots=True)
class Verification:
    position: int      # index into the emitted tokens
    token: int
    origin: int        # model whose row drafted the token
    depth: int         # offset within the block being verified
    u: float
    ratio: float       # min(1, r(x) / q_origin(x))
    accepted: bool


@dataclasses.dataclass(slots=True)
class Step:
    """One invocation group.

    ``model == -1`` marks a vanilla-ensemble step where every model runs.
    ``kind`` is ``"propose"`` (autoregressive drafting, ``invocations``
    calls), ``"score"`` (one parallel pass that may trigger verification) or
    ``"ensemble"``.
    """

    model: int
    kind: str
    prefix_len: int
    invocations: int
    tokens: list[int]
    verifications: list[Verification] = dataclasses.field(default_factory=list)
    resampled: int | None = None
    bonus: int | None = None


@dataclasses.dataclass
class DecodeTrace:
    tokens: list[int]
    steps: list[Step]
    invocations: list[int]
    simulated_time: float
    empirical_alpha: float | None

    @property
    def accepted(self) -> int:
        return sum(v.accepted for s in self.steps for v in s.verifications)

    @property
    def rejected(self) -> int:
        return sum(not v.accepted for s in self.steps for v in s.verifications)

    def verifications(self) -> list[Verification]:
        return [v for s in self.steps for v in s.verifications]

    def invocation_sequence(self) -> list[int]:
        """Model index of every invocation, in order."""
        seq: list[int] = []
        n = len(self.invocations)
        for s in self.steps:
            if s.model < 0:
                seq.extend(range(n))
            else:
                seq.extend([s.model] * s.invocations)
        return seq

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DecodeTrace":
        steps = [Step(**{**s, "verifications": [Verification(**v) for v in s["verifications"]]})
                 for s in d["steps"]]
        return cls(list(d["tokens"]), steps, list(d["invocations"]), d["simulated_time"],
                   d["empirical_alpha"])


def simulated_time(invocations: Sequence[int], costs: Sequence[float]) -> float:
    total = 0.0
    for n, c in zip(invocations, costs):
        total += n * c
    return total


class _Row:
    """A model's (or the ensemble's) distribution at one position, with lookups cached."""

    __slots__ = ("dist", "p", "cdf", "logits")

    def __init__(self, dist: Distribution, logits=None):
        self.dist = dist
        self.p = dist.probs.tolist()
        self.cdf = dist.cdf
        self.logits = logits


class _Session:
    __slots__ = ("work", "start", "max_tokens", "rng", "steps", "counts")

    def __init__(self, prefix: Sequence[int], max_tokens: int, rng: RandomSource, n_models: int):
        self.work = list(prefix)
        self.start = len(self.work)
        self.max_tokens = max_tokens
        self.rng = rng
        self.steps: list[Step] = []
        self.counts = [0] * n_models


class Decoder:
    """Runs one strategy over fixed models; reusable across sessions.

    Rows are memoized by context key, which is sound because every model is
    a pure function of its last ``context_length`` tokens.
    """

    strategy: Strategy
    min_models = 2
    max_models: int | None = 2

    def __init__(self, models: Sequence[LanguageModel], config: DecodeConfig):
        self.models = list(models)
        self.config = config
        n = len(self.models)
        if n < self.min_models or (self.max_models is not None and n > self.max_models):
            allowed = (f"exactly {self.min_models}" if self.max_models == self.min_models
                       else f"at least {self.min_models}")
            raise ConfigError(f"{config.strategy.value} needs {allowed} models, got {n}")
        sizes = {m.vocab.size for m in self.models}
        if len(sizes) != 1:
            raise VocabMismatchError(f"models disagree on vocabulary size: {sorted(sizes)}")
        self.vocab_size = sizes.pop()
        if len(config.gammas) != n:
            raise ConfigError(f"{len(config.gammas)} proposal lengths for {n} models")
        if not 0 <= config.default_proposer_index < n:
            raise ConfigError(f"default proposer index {config.default_proposer_index} out of range")
        self.spec = config.ensemble
        self.temperature = self.spec.temperature
        self._check_spec()
        self._contrastive = self.spec.kind is EnsembleKind.CONTRASTIVE
        self._ctx = [m.context_length for m in self.models]
        self._rows: list[dict] = [{} for _ in self.models]
        self._ens: dict = {}
        self._resid: dict = {}

    def _check_spec(self) -> None:
        try:
            self.spec.check_model_count(len(self.models))
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @property
    def costs(self) -> list[float]:
        return [m.cost for m in self.models]

    # -- memoized rows --------------------------------------------------------

    def row(self, k: int, work: list[int], pos: int) -> _Row:
        """Model ``k``'s row for the token at ``pos`` given ``work[:pos]``."""
        c = self._ctx[k]
        key = tuple(work[pos - c:pos]) if pos >= c else tuple(work[:pos])
        cache = self._rows[k]
        r = cache.get(key)
        if r is None:
            m = self.models[k]
            ctx = list(key)
            dist = m.distribution_for(ctx, self.temperature)
            r = cache[key] = _Row(dist, m.logits_for(ctx) if self._contrastive else None)
        return r

    def ensemble_row(self, rows: tuple[_Row, ...]) -> _Row:
        """Ensemble row from per-model rows given in model order."""
        r = self._ens.get(rows)
        if r is None:
            dist = ensemble(self.spec, [x.dist for x in rows], [x.logits for x in rows])
            r = self._ens[rows] = _Row(dist)
        return r

    def residual_cdf(self, r: _Row, q: _Row) -> list[float]:
        key = (r, q)
        cdf = self._resid.get(key)
        if cdf is None:
            resid = np.maximum(r.dist.probs - q.dist.probs, 0.0)
            mass = float(resid.sum())
            # degenerate residual: rejection had ~zero probability, fall back to r
            cdf = Distribution(resid / mass).cdf if mass > ZERO_MASS else r.cdf
            self._resid[key] = cdf
        return cdf

    # -- primitives -----------------------------------------------------------

    def _draft(self, s: _Session, k: int, n: int, rows_out: list, origins_out: list | None = None) -> None:
        """Model ``k`` drafts ``n`` tokens autoregressively onto ``s.work``."""
        if n <= 0:
            return
        work, rng = s.work, s.rng
        start = len(work)
        for _ in range(n):
            row = self.row(k, work, len(work))
            work.append(inverse_cdf(row.cdf, rng.uniform()))
            rows_out.append(row)
            if origins_out is not None:
                origins_out.append(k)
        s.counts[k] += n
        s.steps.append(Step(k, "propose", start, n, work[start:]))

    @staticmethod
    def _verify(s: _Session, pos: int, origin: int, depth: int, q: _Row, r: _Row,
                out: list[Verification]) -> bool:
        x = s.work[pos]
        qx, rx = q.p[x], r.p[x]
        ratio = 1.0 if rx >= qx else rx / qx
        u = s.rng.uniform()
        ok = u <= ratio
        out.append(Verification(pos - s.start, x, origin, depth, u, ratio, ok))
        return ok

    def _trace(self, s: _Session) -> DecodeTrace:
        acc = rej = 0
        for step in s.steps:
            for v in step.verifications:
                if v.accepted:
                    acc += 1
                else:
                    rej += 1
        alpha = acc / (acc + rej) if acc + rej else None
        return DecodeTrace(s.work[s.start:], s.steps, s.counts,
                           simulated_time(s.counts, self.costs), alpha)

    def run(self, rng: RandomSource, prefix: Sequence[int] = ()) -> DecodeTrace:
        for t in prefix:
            if not 0 <= t < self.vocab_size:
                raise TokenOutOfRange(f"prefix token {t} outside vocabulary of size {self.vocab_size}")
        s = _Session(prefix, self.config.max_tokens, rng, len(self.models))
        self._decode(s)
        return self._trace(s)

    def _decode(self, s: _Session) -> None:
        raise NotImplementedError


class VanillaEnsembleDecoder(Decoder):
    strategy = Strategy.VANILLA_ENSEMBLE
    max_models = None

    def _decode(self, s):
        work, n = s.work, len(self.models)
        end = s.start + s.max_tokens
        while len(work) < end:
            pos = len(work)
            r = self.ensemble_row(tuple(self.row(k, work, pos) for k in range(n)))
            x = inverse_cdf(r.cdf, s.rng.uniform())
            work.append(x)
            for k in range(n):
                s.counts[k] += 1
            s.steps.append(Step(-1, "ensemble", pos, n, [x]))


class _TwoModelDecoder(Decoder):
    """Fixed-role draft/verify cycles (vanilla SD and speculative ensemble)."""

    bonus = False

    def target_row(self, rows: tuple[_Row, _Row], ver: int) -> _Row:
        raise NotImplementedError

    def _decode(self, s):
        prop = self.config.default_proposer_index
        ver = 1 - prop
        gamma = self.config.gammas[prop]
        work = s.work
        end = s.start + s.max_tokens
        while len(work) < end:
            base = len(work)
            q_rows: list[_Row] = []
            self._draft(s, prop, min(gamma, end - base), q_rows)
            n = len(q_rows)
            s.counts[ver] += 1
            step = Step(ver, "score", base, 1, [])
            s.steps.append(step)
            for i in range(n):
                pos = base + i
                p_row = self.row(ver, work, pos)
                pair = (q_rows[i], p_row) if prop == 0 else (p_row, q_rows[i])
                r = self.target_row(pair, ver)
                if not self._verify(s, pos, prop, i, q_rows[i], r, step.verifications):
                    y = inverse_cdf(self.residual_cdf(r, q_rows[i]), s.rng.uniform())
                    del work[pos:]
                    work.append(y)
                    step.resampled = y
                    break
            else:
                if self.bonus and len(work) < end:
                    b = inverse_cdf(self.row(ver, work, len(work)).cdf, s.rng.uniform())
                    work.append(b)
                    step.bonus = b


class VanillaSDDecoder(_TwoModelDecoder):
    """Plain speculative decoding: verification against the target's own rows.

    The ensemble spec only contributes its temperature.  Pass an
    :class:`~specens.models.EnsembleModel` as the target to speculate on an
    ensemble.
    """

    strategy = Strategy.VANILLA_SD
    bonus = True

    def _check_spec(self):
        pass

    def target_row(self, rows, ver):
        return rows[ver]


class SpecEnsembleDecoder(_TwoModelDecoder):
    strategy = Strategy.SPEC_ENSEMBLE

    def target_row(self, rows, ver):
        return self.ensemble_row(rows)


class AlternateProposalDecoder(Decoder):
    """Two models alternating as proposer after fully accepted cycles."""

    strategy = Strategy.ALTERNATE

    def _decode(self, s):
        default = self.config.default_proposer_index
        gammas = self.config.gammas
        work = s.work
        end = s.start + s.max_tokens
        cache: list[_Row] = []     # row of the cached bonus token, if any
        proposer = verifier = default
        while len(work) - len(cache) < end:
            if not cache:
                proposer, verifier = default, 1 - default
            else:
                proposer, verifier = verifier, proposer
            base = len(work) - len(cache)
            q_rows = list(cache)
            want = min(gammas[proposer], end - base) - len(cache)
            self._draft(s, proposer, want, q_rows)
            s.counts[verifier] += 1
            step = Step(verifier, "score", base, 1, [])
            s.steps.append(step)
            cache = []
            for i, q in enumerate(q_rows):
                pos = base + i
                v_row = self.row(verifier, work, pos)
                r = self.ensemble_row((q, v_row) if proposer == 0 else (v_row, q))
                if not self._verify(s, pos, proposer, i, q, r, step.verifications):
                    y = inverse_cdf(self.residual_cdf(r, q), s.rng.uniform())
                    del work[pos:]
                    work.append(y)
                    step.resampled = y
                    break
            else:
                if len(work) < end:
                    b_row = self.row(verifier, work, len(work))
                    b = inverse_cdf(b_row.cdf, s.rng.uniform())
                    work.append(b)
                    step.bonus = b
                    cache = [b_row]


class NModelSEDecoder(Decoder):
    """Speculative ensemble over n models with per-model queues of scored rows."""

    strategy = Strategy.NMODEL_SE
    max_models = None

    def _decode(self, s):
        n = len(self.models)
        default = self.config.default_proposer_index
        gammas = self.config.gammas
        work = s.work
        end = s.start + s.max_tokens
        committed = len(work)
        queues: list[list[_Row]] = [[] for _ in range(n)]
        origins: list[int] = []    # drafting model of each pending token
        while committed < end:
            if len(work) == committed:
                self._draft(s, default, min(gammas[default], end - committed), queues[default], origins)
                continue
            i = min(range(n), key=lambda j: len(queues[j]))
            qi = queues[i]
            s.counts[i] += 1
            step = Step(i, "score", committed, 1, [])
            s.steps.append(step)
            qi.extend(self.row(i, work, pos) for pos in range(len(qi) + committed, len(work)))
            depth = 0
            rejected = False
            while all(queues):
                fronts = tuple(q[0] for q in queues)
                o = origins[0]
                r = self.ensemble_row(fronts)
                if self._verify(s, committed, o, depth, fronts[o], r, step.verifications):
                    for q in queues:
                        del q[0]
                    del origins[0]
                    committed += 1
                    depth += 1
                else:
                    y = inverse_cdf(self.residual_cdf(r, fronts[o]), s.rng.uniform())
                    del work[committed:]
                    work.append(y)
                    committed += 1
                    step.resampled = y
                    for q in queues:
                        q.clear()
                    origins.clear()
                    rejected = True
                    break
            if rejected or len(work) >= end:
                continue
            b_row = self.row(i, work, len(work))
            b = inverse_cdf(b_row.cdf, s.rng.uniform())
            work.append(b)
            origins.append(i)
            qi.append(b_row)
            step.bonus = b
            self._draft(s, i, min(gammas[i] - 1, end - len(work)), qi, origins)


_DECODERS = {
    Strategy.VANILLA_ENSEMBLE: VanillaEnsembleDecoder,
    Strategy.VANILLA_SD: VanillaSDDecoder,
    Strategy.SPEC_ENSEMBLE: SpecEnsembleDecoder,
    Strategy.ALTERNATE: AlternateProposalDecoder,
    Strategy.NMODEL_SE: NModelSEDecoder,
}


def make_decoder(models: Sequence[LanguageModel], config: DecodeConfig) -> Decoder:
    return _DECODERS[config.strategy](models, config)


def decode(models: Sequence[LanguageModel], config: DecodeConfig, rng: RandomSource | None = None,
           prefix: Sequence[int] = ()) -> DecodeTrace:
    """Run ``config.strategy`` once; ``rng`` defaults to ``RandomSource(config.seed)``."""
    return make_decoder(models, config).run(rng or RandomSource(config.seed), prefix)


def vanilla_ensemble_decode(models, config, rng=None, prefix=()):
    return decode(models, config.replace(strategy=Strategy.VANILLA_ENSEMBLE), rng, prefix)


def vanilla_sd_decode(proposer, target, config, rng=None, prefix=()):
    return decode([proposer, target], config.replace(strategy=Strategy.VANILLA_SD), rng, prefix)


def spec_ensemble_decode(proposer, verifier, config, rng=None, prefix=()):
    return decode([proposer, verifier], config.replace(strategy=Strategy.SPEC_ENSEMBLE), rng, prefix)


def alternate_proposal_decode(model_q, model_p, config, rng=None, prefix=()):
    return decode([model_q, model_p], config.replace(strategy=Strategy.ALTERNATE), rng, prefix)


def n_model_se_decode(models, config, rng=None, prefix=()):
    return decode(models, config.replace(strategy=Strategy.NMODEL_SE), rng, prefix)
