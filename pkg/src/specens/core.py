"""Vocabularies, distributions, logits, ensemble functions and seeded draws.

Everything here is immutable except :class:`RandomSource`, which is
single-owner state.
"""

from __future__ import annotations

import bisect
import dataclasses
import enum
import math
from itertools import accumulate
from typing import Iterable, Sequence

import numpy as np

from .errors import VocabMismatchError, WeightError, ZeroMassError

NORM_TOL = 1e-9
ZERO_MASS = 1e-12
LOG_FLOOR = 1e-12
# Rows already this close to unit mass are stored untouched, so that
# re-wrapping a normalized vector is the identity (bitwise round-trips).
_RENORM_SKIP = 1e-12
MAX_SEED = 2**64 - 1


@dataclasses.dataclass(frozen=True)
class Vocabulary:
    size: int
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        if int(self.size) != self.size or self.size < 2:
            raise ValueError(f"vocabulary size must be an integer >= 2, got {self.size!r}")
        if self.labels is not None:
            labels = tuple(self.labels)
            if len(labels) != self.size:
                raise ValueError("labels must have exactly one entry per token id")
            if len(set(labels)) != len(labels):
                raise ValueError("labels must be unique")
            object.__setattr__(self, "labels", labels)

    def label(self, token: int) -> str:
        return self.labels[token] if self.labels is not None else str(token)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class Distribution:
    """Normalized probability vector over token ids ``0..vocab_size-1``."""

    __slots__ = ("probs", "_cdf")

    def __init__(self, probs: Iterable[float] | np.ndarray):
        a = np.array(probs, dtype=np.float64)
        if a.ndim != 1 or a.size < 2:
            raise ValueError("a distribution needs a 1-d vector with at least 2 entries")
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise ValueError("probabilities must be finite and non-negative")
        total = float(a.sum())
        if total <= ZERO_MASS:
            raise ZeroMassError("cannot normalize a vector with zero mass")
        if abs(total - 1.0) > _RENORM_SKIP:
            a = a / total
        assert abs(float(a.sum()) - 1.0) <= NORM_TOL
        self.probs = _readonly(a)
        self._cdf: list[float] | None = None

    @property
    def vocab_size(self) -> int:
        return int(self.probs.size)

    @property
    def cdf(self) -> list[float]:
        if self._cdf is None:
            self._cdf = list(accumulate(self.probs.tolist()))
        return self._cdf

    def __len__(self) -> int:
        return self.vocab_size

    def __getitem__(self, token: int) -> float:
        return float(self.probs[token])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Distribution):
            return NotImplemented
        return np.array_equal(self.probs, other.probs)

    def __hash__(self):
        return hash(self.probs.tobytes())

    def __repr__(self) -> str:
        return f"Distribution({np.array2string(self.probs, precision=4)})"

    def tolist(self) -> list[float]:
        return self.probs.tolist()

    def logits(self) -> "LogitsVec":
        return LogitsVec(np.log(np.maximum(self.probs, LOG_FLOOR)))


class LogitsVec:
    __slots__ = ("logits",)

    def __init__(self, logits: Iterable[float] | np.ndarray):
        a = np.array(logits, dtype=np.float64)
        if a.ndim != 1 or a.size < 2:
            raise ValueError("logits need a 1-d vector with at least 2 entries")
        if not np.all(np.isfinite(a)):
            raise ValueError("logits must be finite")
        self.logits = _readonly(a)

    @property
    def vocab_size(self) -> int:
        return int(self.logits.size)

    def __len__(self) -> int:
        return self.vocab_size

    def __eq__(self, other) -> bool:
        if not isinstance(other, LogitsVec):
            return NotImplemented
        return np.array_equal(self.logits, other.logits)

    def __hash__(self):
        return hash(self.logits.tobytes())

    def __repr__(self) -> str:
        return f"LogitsVec({np.array2string(self.logits, precision=4)})"


class EnsembleKind(str, enum.Enum):
    WEIGHTED = "weighted"
    CONTRASTIVE = "contrastive"
    GENERAL = "general"


@dataclasses.dataclass(frozen=True)
class EnsembleSpec:
    """How model outputs are combined into the ensemble distribution.

    For ``WEIGHTED`` and ``CONTRASTIVE`` model 0 is the proposal/amateur side
    and model 1 the target/expert side.
    """

    kind: EnsembleKind
    lam: float = 0.5
    mu: float = 0.1
    weights: tuple[float, ...] | None = None
    temperature: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", EnsembleKind(self.kind))
        if not (self.temperature >= 0 and math.isfinite(self.temperature)):
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.kind is EnsembleKind.WEIGHTED and not 0.0 <= self.lam <= 1.0:
            raise WeightError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.kind is EnsembleKind.CONTRASTIVE and not (self.mu >= 0 and math.isfinite(self.mu)):
            raise WeightError(f"mu must be >= 0, got {self.mu}")
        if self.kind is EnsembleKind.GENERAL:
            if self.weights is None:
                raise WeightError("general ensembles need explicit weights")
            w = tuple(float(x) for x in self.weights)
            _check_weights(w)
            object.__setattr__(self, "weights", w)

    @classmethod
    def weighted(cls, lam: float, temperature: float = 1.0) -> "EnsembleSpec":
        return cls(EnsembleKind.WEIGHTED, lam=lam, temperature=temperature)

    @classmethod
    def contrastive(cls, mu: float, temperature: float = 1.0) -> "EnsembleSpec":
        return cls(EnsembleKind.CONTRASTIVE, mu=mu, temperature=temperature)

    @classmethod
    def general(cls, weights: Sequence[float], temperature: float = 1.0) -> "EnsembleSpec":
        return cls(EnsembleKind.GENERAL, weights=tuple(weights), temperature=temperature)

    @classmethod
    def uniform(cls, n: int, temperature: float = 1.0) -> "EnsembleSpec":
        return cls.general([1.0 / n] * n, temperature)

    def n_models(self) -> int | None:
        if self.kind is EnsembleKind.GENERAL:
            return len(self.weights)
        return 2

    def check_model_count(self, n: int) -> None:
        expected = self.n_models()
        if n != expected:
            raise WeightError(f"{self.kind.value} ensemble needs {expected} models, got {n}")

    def replace(self, **changes) -> "EnsembleSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind.value, "temperature": self.temperature}
        if self.kind is EnsembleKind.WEIGHTED:
            d["lambda"] = self.lam
        elif self.kind is EnsembleKind.CONTRASTIVE:
            d["mu"] = self.mu
        else:
            d["weights"] = list(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleSpec":
        kind = EnsembleKind(d["kind"])
        t = float(d.get("temperature", 1.0))
        if kind is EnsembleKind.WEIGHTED:
            return cls.weighted(float(d.get("lambda", 0.5)), t)
        if kind is EnsembleKind.CONTRASTIVE:
            return cls.contrastive(float(d.get("mu", 0.1)), t)
        return cls.general([float(x) for x in d["weights"]], t)


def _check_weights(weights: Sequence[float]) -> None:
    if len(weights) < 2:
        raise WeightError("need at least two weights")
    if any(not (0.0 <= w <= 1.0) for w in weights):
        raise WeightError(f"every weight must lie in [0, 1]: {list(weights)}")
    if abs(math.fsum(weights) - 1.0) > NORM_TOL:
        raise WeightError(f"weights must sum to 1, got {math.fsum(weights)!r}")


class RandomSource:
    """Seeded stream of uniform draws on the half-open interval (0, 1].

    Backed by numpy's PCG64 bit generator seeded through ``SeedSequence``,
    whose output stream is fixed across platforms and numpy releases.
    Draws are ``1 - U`` with ``U`` from ``Generator.random``, so a test
    ``u <= ratio`` accepts with probability exactly ``ratio`` and never
    accepts when ``ratio == 0``.
    """

    __slots__ = ("seed", "draws", "_next")

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed <= MAX_SEED:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self.draws = 0
        self._next = np.random.Generator(np.random.PCG64(seed)).random

    def uniform(self) -> float:
        self.draws += 1
        return 1.0 - self._next()


def _as_probs(d: Distribution | Sequence[float] | np.ndarray) -> np.ndarray:
    return d.probs if isinstance(d, Distribution) else np.asarray(d, dtype=np.float64)


def _as_logits(l: LogitsVec | Sequence[float] | np.ndarray) -> np.ndarray:
    return l.logits if isinstance(l, LogitsVec) else np.asarray(l, dtype=np.float64)


def _same_size(*vectors: np.ndarray) -> None:
    sizes = {v.size for v in vectors}
    if len(sizes) != 1:
        raise VocabMismatchError(f"vocabulary sizes differ: {sorted(sizes)}")


def one_hot(index: int, size: int) -> Distribution:
    a = np.zeros(size)
    a[index] = 1.0
    return Distribution(a)


def normalize(raw: Sequence[float] | np.ndarray) -> Distribution:
    a = np.asarray(raw, dtype=np.float64)
    if a.ndim != 1 or a.size < 2:
        raise ValueError("need at least two entries")
    if np.any(a < 0):
        raise ValueError("entries must be non-negative")
    total = float(a.sum())
    if total <= ZERO_MASS:
        raise ZeroMassError(f"total mass {total!r} is below {ZERO_MASS}")
    return Distribution(a / total)


def weighted_ensemble(q: Distribution, p: Distribution, lam: float) -> Distribution:
    """``lam * q + (1 - lam) * p``."""
    qa, pa = _as_probs(q), _as_probs(p)
    _same_size(qa, pa)
    if not 0.0 <= lam <= 1.0:
        raise WeightError(f"lambda must lie in [0, 1], got {lam}")
    return Distribution(lam * qa + (1.0 - lam) * pa)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max())
    return z / z.sum()


def apply_temperature(l: LogitsVec, temperature: float) -> Distribution:
    """Softmax at ``temperature``; 0 is greedy (one-hot, lowest id wins ties)."""
    a = _as_logits(l)
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0:
        return one_hot(int(np.argmax(a)), a.size)
    return Distribution(softmax(a / temperature))


def contrastive_ensemble(l_q: LogitsVec, l_p: LogitsVec, mu: float, temperature: float) -> Distribution:
    """``softmax((l_p - mu * l_q) / T)``; q is the amateur, p the expert."""
    qa, pa = _as_logits(l_q), _as_logits(l_p)
    _same_size(qa, pa)
    if mu < 0:
        raise WeightError(f"mu must be >= 0, got {mu}")
    return apply_temperature(LogitsVec(pa - mu * qa), temperature)


def general_weighted_ensemble(dists: Sequence[Distribution], weights: Sequence[float]) -> Distribution:
    arrays = [_as_probs(d) for d in dists]
    if len(arrays) < 2:
        raise WeightError("need at least two distributions")
    _same_size(*arrays)
    if len(weights) != len(arrays):
        raise WeightError(f"{len(weights)} weights for {len(arrays)} distributions")
    _check_weights(weights)
    r = np.zeros_like(arrays[0])
    for w, a in zip(weights, arrays):
        r += w * a
    return Distribution(r)


def ensemble(spec: EnsembleSpec, dists: Sequence[Distribution], logits: Sequence[LogitsVec]) -> Distribution:
    """Combine per-model outputs according to ``spec``.

    ``dists`` are the models' distributions already tempered at
    ``spec.temperature``; ``logits`` are the raw logits (only the contrastive
    kind reads them).  At temperature 0 the combined result is itself
    collapsed to a one-hot at its argmax.
    """
    spec.check_model_count(len(dists))
    if spec.kind is EnsembleKind.CONTRASTIVE:
        return contrastive_ensemble(logits[0], logits[1], spec.mu, spec.temperature)
    if spec.kind is EnsembleKind.WEIGHTED:
        r = weighted_ensemble(dists[0], dists[1], spec.lam)
    else:
        r = general_weighted_ensemble(dists, spec.weights)
    if spec.temperature == 0:
        return one_hot(int(np.argmax(r.probs)), r.vocab_size)
    return r


def tv_distance(a: Distribution, b: Distribution) -> float:
    """Sum of absolute differences (no factor 1/2), so the range is [0, 2]."""
    aa, ba = _as_probs(a), _as_probs(b)
    _same_size(aa, ba)
    return float(np.abs(aa - ba).sum())


def inverse_cdf(cdf: Sequence[float], u: float) -> int:
    """Smallest token id whose cumulative mass reaches ``u`` (``u`` in (0, 1])."""
    i = bisect.bisect_left(cdf, u)
    if i >= len(cdf):
        # u beyond the rounded total: fall back to the last id with mass
        i = len(cdf) - 1
        while i > 0 and cdf[i] == cdf[i - 1]:
            i -= 1
    return i


def sample(d: Distribution, rng: RandomSource) -> int:
    return inverse_cdf(d.cdf, rng.uniform())
