"""Token-level language models: the abstract capability plus desk-scale stand-ins.

Every model is a pure function of the last ``context_length`` tokens of the
prefix and carries a declared per-invocation ``cost``.
"""

from __future__ import annotations

import abc
import copy
import itertools
import json
import math
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import (
    LOG_FLOOR,
    Distribution,
    EnsembleSpec,
    LogitsVec,
    Vocabulary,
    apply_temperature,
    ensemble,
)
from .errors import EmptyStream, FormatError, InvariantError, TokenOutOfRange, VocabMismatchError

LOAD_TOLERANCE = 1e-6
MAX_TABLE_ROWS = 1_000_000


def _as_vocab(vocab: Vocabulary | int) -> Vocabulary:
    return vocab if isinstance(vocab, Vocabulary) else Vocabulary(int(vocab))


class LanguageModel(abc.ABC):
    def __init__(self, vocab: Vocabulary | int, context_length: int, cost: float, name: str):
        if context_length < 0:
            raise ValueError("context_length must be non-negative")
        if not (cost > 0 and math.isfinite(cost)):
            raise ValueError(f"cost must be a positive real, got {cost!r}")
        self.vocab = _as_vocab(vocab)
        self.context_length = int(context_length)
        self.cost = float(cost)
        self.name = name

    @property
    def vocab_size(self) -> int:
        return self.vocab.size

    def context_key(self, prefix: Sequence[int]) -> tuple[int, ...]:
        k = self.context_length
        if k == 0:
            return ()
        return tuple(prefix[-k:])

    def check_prefix(self, prefix: Sequence[int]) -> None:
        v = self.vocab.size
        for t in prefix:
            if not 0 <= t < v:
                raise TokenOutOfRange(f"token {t} outside vocabulary of size {v}")

    @abc.abstractmethod
    def logits_for(self, prefix: Sequence[int]) -> LogitsVec:
        ...

    def distribution_for(self, prefix: Sequence[int], temperature: float = 1.0) -> Distribution:
        return apply_temperature(self.logits_for(prefix), temperature)

    def with_cost(self, cost: float) -> "LanguageModel":
        """Shallow copy with a different per-invocation cost."""
        if not (cost > 0 and math.isfinite(cost)):
            raise ValueError(f"cost must be a positive real, got {cost!r}")
        clone = copy.copy(self)
        clone.cost = float(cost)
        return clone

    def __repr__(self) -> str:
        return (f"{type(self).__name__}(name={self.name!r}, vocab={self.vocab.size}, "
                f"context={self.context_length}, cost={self.cost})")


class TableModel(LanguageModel):
    """Lookup table from the last ``context_length`` tokens to a distribution.

    Prefixes shorter than the context length, and contexts missing from the
    table, use ``default``.
    """

    def __init__(self, vocab, context_length, table: Mapping[tuple[int, ...], Distribution],
                 default: Distribution, cost: float = 1.0, name: str = "table"):
        super().__init__(vocab, context_length, cost, name)
        v = self.vocab.size
        rows = {}
        for key, row in table.items():
            key = tuple(int(t) for t in key)
            if len(key) != self.context_length:
                raise ValueError(f"context key {key} has length {len(key)}, expected {self.context_length}")
            if any(not 0 <= t < v for t in key):
                raise TokenOutOfRange(f"context key {key} outside vocabulary")
            rows[key] = row if isinstance(row, Distribution) else Distribution(row)
        default = default if isinstance(default, Distribution) else Distribution(default)
        for row in itertools.chain(rows.values(), [default]):
            if row.vocab_size != v:
                raise VocabMismatchError(f"row of size {row.vocab_size} in a vocabulary of {v}")
        self.table = rows
        self.default = default
        self._logits: dict[tuple[int, ...], LogitsVec] = {}

    def row(self, prefix: Sequence[int]) -> Distribution:
        if len(prefix) < self.context_length:
            return self.default
        return self.table.get(self.context_key(prefix), self.default)

    def logits_for(self, prefix):
        self.check_prefix(prefix)
        row = self.row(prefix)
        key = id(row)
        lv = self._logits.get(key)
        if lv is None:
            lv = self._logits[key] = row.logits()
        return lv

    def distribution_for(self, prefix, temperature=1.0):
        if temperature == 1.0:
            self.check_prefix(prefix)
            return self.row(prefix)
        return apply_temperature(self.logits_for(prefix), temperature)


class NGramModel(LanguageModel):
    """Add-delta smoothed n-gram model conditioned on ``order`` previous tokens.

    Counts are kept for every context length up to ``order`` so that prefixes
    shorter than ``order`` condition on all the tokens they have.
    """

    def __init__(self, vocab, order: int, counts: Mapping[tuple[int, ...], np.ndarray],
                 delta: float, cost: float = 1.0, name: str = "ngram"):
        super().__init__(vocab, order, cost, name)
        if not delta > 0:
            raise ValueError(f"delta must be positive, got {delta}")
        self.order = order
        self.delta = float(delta)
        self.counts = dict(counts)
        self._rows: dict[tuple[int, ...], Distribution] = {}

    def conditional(self, context: Sequence[int]) -> Distribution:
        context = tuple(context)
        row = self._rows.get(context)
        if row is None:
            v = self.vocab.size
            c = self.counts.get(context)
            if c is None:
                c = np.zeros(v)
            row = Distribution((c + self.delta) / (c.sum() + self.delta * v))
            self._rows[context] = row
        return row

    def logits_for(self, prefix):
        return self.distribution_for(prefix).logits()

    def distribution_for(self, prefix, temperature=1.0):
        self.check_prefix(prefix)
        row = self.conditional(self.context_key(prefix))
        if temperature == 1.0:
            return row
        return apply_temperature(row.logits(), temperature)

    def to_table(self) -> TableModel:
        """Export as a table model; exact for prefixes of at least ``order`` tokens.

        Shorter prefixes map to the context-free (unigram) row.
        """
        v, k = self.vocab.size, self.order
        if v ** k > MAX_TABLE_ROWS:
            raise ValueError(f"{v}^{k} contexts exceed the table budget")
        table = {ctx: self.conditional(ctx) for ctx in itertools.product(range(v), repeat=k)}
        return TableModel(self.vocab, k, table, self.conditional(()), self.cost, self.name)


class EnsembleModel(LanguageModel):
    """Several models queried jointly and combined by an ensemble function.

    Used as the verification target of plain speculative decoding.  One
    invocation runs every member, so the cost is the sum of member costs.
    """

    def __init__(self, models: Sequence[LanguageModel], spec: EnsembleSpec, name: str | None = None):
        models = list(models)
        spec.check_model_count(len(models))
        _check_shared_vocab(models)
        super().__init__(models[0].vocab, max(m.context_length for m in models),
                         sum(m.cost for m in models), name or "+".join(m.name for m in models))
        self.members = models
        self.spec = spec

    def distribution_for(self, prefix, temperature=1.0):
        spec = self.spec.replace(temperature=temperature)
        dists = [m.distribution_for(prefix, temperature) for m in self.members]
        logits = [m.logits_for(prefix) for m in self.members] if spec.kind.value == "contrastive" else []
        return ensemble(spec, dists, logits)

    def logits_for(self, prefix):
        return self.distribution_for(prefix, 1.0).logits()


def _check_shared_vocab(models: Sequence[LanguageModel]) -> None:
    sizes = {m.vocab.size for m in models}
    if len(sizes) != 1:
        raise VocabMismatchError(f"models disagree on vocabulary size: {sorted(sizes)}")


def random_table_model(seed: int, vocab_size: int, context_length: int, concentration: float = 1.0,
                       cost: float = 1.0, name: str | None = None) -> TableModel:
    """Table model whose rows are symmetric Dirichlet(``concentration``) draws.

    The default row is drawn first, then one row per context in lexicographic
    order, all from a single PCG64 stream seeded with ``seed``.
    """
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    if not concentration > 0:
        raise ValueError("concentration must be positive")
    n_ctx = vocab_size ** context_length
    if n_ctx > MAX_TABLE_ROWS:
        raise ValueError(f"{n_ctx} contexts exceed the table budget")
    rng = np.random.Generator(np.random.PCG64(seed))
    rows = rng.dirichlet(np.full(vocab_size, float(concentration)), size=n_ctx + 1)
    contexts = itertools.product(range(vocab_size), repeat=context_length)
    table = {ctx: Distribution(rows[i + 1]) for i, ctx in enumerate(contexts)}
    return TableModel(vocab_size, context_length, table, Distribution(rows[0]), cost,
                      name or f"table-s{seed}")


def train_ngram(stream: Sequence[int], order: int, delta: float, vocab: Vocabulary | int,
                cost: float = 1.0, name: str = "ngram") -> NGramModel:
    vocab = _as_vocab(vocab)
    stream = [int(t) for t in stream]
    if order < 0:
        raise ValueError("order must be non-negative")
    if not stream or len(stream) < order:
        raise EmptyStream(f"stream of {len(stream)} tokens cannot train an order-{order} model")
    for t in stream:
        if not 0 <= t < vocab.size:
            raise TokenOutOfRange(f"token {t} outside vocabulary of size {vocab.size}")
    counts: dict[tuple[int, ...], np.ndarray] = {}
    for length in range(order + 1):
        for i in range(length, len(stream)):
            ctx = tuple(stream[i - length:i])
            row = counts.get(ctx)
            if row is None:
                row = counts[ctx] = np.zeros(vocab.size)
            row[stream[i]] += 1
    return NGramModel(vocab, order, counts, delta, cost, name)


def read_token_stream(path: str | Path) -> list[int]:
    """Token ids separated by whitespace and/or commas."""
    text = Path(path).read_text(encoding="utf-8")
    out = []
    for i, line in enumerate(text.splitlines(), 1):
        for piece in line.replace(",", " ").split():
            try:
                out.append(int(piece))
            except ValueError:
                raise FormatError(f"not a token id: {piece!r}", line=i) from None
    return out


# -- on-disk format ----------------------------------------------------------

def _key_str(key: tuple[int, ...]) -> str:
    return ",".join(str(t) for t in key)


def _row_json(row: Distribution) -> str:
    return json.dumps(row.tolist())


def dumps_table_model(model: TableModel) -> str:
    """Serialize to the JSON file format, one table row per line.

    Floats are written with ``repr`` (shortest round-trip form, never more
    than 17 significant digits), so a reload is bitwise identical.
    """
    lines = [
        "{",
        f'  "vocab_size": {model.vocab.size},',
        f'  "context_length": {model.context_length},',
        f'  "name": {json.dumps(model.name)},',
        f'  "cost": {json.dumps(model.cost)},',
        f'  "default": {_row_json(model.default)},',
    ]
    items = sorted(model.table.items())
    if not items:
        lines.append('  "table": {}')
    else:
        lines.append('  "table": {')
        for i, (key, row) in enumerate(items):
            sep = "," if i + 1 < len(items) else ""
            lines.append(f"    {json.dumps(_key_str(key))}: {_row_json(row)}{sep}")
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


def save_table_model(model: TableModel, path: str | Path) -> None:
    Path(path).write_text(dumps_table_model(model), encoding="utf-8")


def _line_of(text: str, needle: str) -> int | None:
    idx = text.find(needle)
    return None if idx < 0 else text.count("\n", 0, idx) + 1


def _parse_row(value, vocab_size: int, field: str, text: str, anchor: str) -> Distribution:
    line = _line_of(text, anchor)
    if not isinstance(value, list) or len(value) != vocab_size:
        raise FormatError(f"expected a list of {vocab_size} probabilities", line=line, field=field)
    if any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in value):
        raise FormatError("probabilities must be numbers", line=line, field=field)
    a = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(a)) or np.any(a < 0):
        raise FormatError("probabilities must be finite and non-negative", line=line, field=field)
    total = float(a.sum())
    if abs(total - 1.0) > LOAD_TOLERANCE:
        raise InvariantError(f"{field} sums to {total!r}, more than {LOAD_TOLERANCE} from 1"
                             + (f" (line {line})" if line else ""))
    return Distribution(a)


def loads_table_model(text: str) -> TableModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON: {e.msg}", line=e.lineno) from None
    if not isinstance(doc, dict):
        raise FormatError("top level must be a JSON object", line=1)
    required = {"vocab_size": int, "context_length": int, "name": str, "cost": (int, float),
                "default": list, "table": dict}
    for field, kind in required.items():
        if field not in doc:
            raise FormatError("missing field", field=field)
        if isinstance(doc[field], bool) or not isinstance(doc[field], kind):
            raise FormatError("wrong type", line=_line_of(text, f'"{field}"'), field=field)
    v, k = doc["vocab_size"], doc["context_length"]
    if v < 2:
        raise FormatError("vocab_size must be >= 2", line=_line_of(text, '"vocab_size"'), field="vocab_size")
    if k < 0:
        raise FormatError("context_length must be >= 0", line=_line_of(text, '"context_length"'),
                          field="context_length")
    if not doc["cost"] > 0:
        raise FormatError("cost must be positive", line=_line_of(text, '"cost"'), field="cost")
    default = _parse_row(doc["default"], v, "default", text, '"default"')
    table = {}
    for key_s, value in doc["table"].items():
        field = f"table[{key_s!r}]"
        anchor = json.dumps(key_s) + ":"
        pieces = key_s.split(",") if key_s else []
        try:
            key = tuple(int(p) for p in pieces)
        except ValueError:
            raise FormatError("context key must be comma-joined token ids",
                              line=_line_of(text, anchor), field=field) from None
        if len(key) != k:
            raise FormatError(f"context key has {len(key)} ids, expected {k}",
                              line=_line_of(text, anchor), field=field)
        if any(not 0 <= t < v for t in key):
            raise FormatError("context key id outside vocabulary", line=_line_of(text, anchor), field=field)
        table[key] = _parse_row(value, v, field, text, anchor)
    return TableModel(v, k, table, default, float(doc["cost"]), doc["name"])


def load_table_model(path: str | Path) -> TableModel:
    return loads_table_model(Path(path).read_text(encoding="utf-8"))
