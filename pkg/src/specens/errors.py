"""Exception hierarchy shared by every module."""

from __future__ import annotations


class SpecEnsError(Exception):
    """Base class for all engine errors."""


class ZeroMassError(SpecEnsError, ValueError):
    """A vector that should be normalized carries (almost) no mass."""


class VocabMismatchError(SpecEnsError, ValueError):
    pass


class WeightError(SpecEnsError, ValueError):
    pass


class TokenOutOfRange(SpecEnsError, IndexError):
    pass


class EmptyStream(SpecEnsError, ValueError):
    pass


class FormatError(SpecEnsError, ValueError):
    """Malformed model or config file.

    ``line`` and ``field`` locate the problem when they are known.
    """

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class InvariantError(SpecEnsError, ValueError):
    pass


class ConfigError(SpecEnsError, ValueError):
    pass


class BudgetExceeded(SpecEnsError, ValueError):
    pass


class InsufficientSamples(SpecEnsError, RuntimeError):
    pass
