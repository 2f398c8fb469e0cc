import numpy as np
import pytest

from specens.core import Distribution
from specens.models import TableModel, random_table_model


def const_model(row, name="const", cost=1.0) -> TableModel:
    """Context-free table model that always returns ``row``."""
    row = Distribution(row)
    return TableModel(row.vocab_size, 0, {(): row}, row, cost, name)


def empirical(tokens, vocab_size) -> np.ndarray:
    counts = np.bincount(np.asarray(tokens, dtype=np.int64), minlength=vocab_size)
    return counts / counts.sum()


@pytest.fixture
def pair16():
    return random_table_model(11, 16, 1, name="q"), random_table_model(12, 16, 1, name="p")


@pytest.fixture
def pair4():
    return random_table_model(21, 4, 1, name="q", cost=0.2), random_table_model(22, 4, 1, name="p")


@pytest.fixture
def trio4():
    return [random_table_model(31 + i, 4, 1, name=f"m{i}") for i in range(3)]


# criterion number -> list of (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(criterion, []).append((bool(passed), detail))
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        results = ACCEPTANCE[n]
        ok = all(p for p, _ in results)
        failed = [d for p, d in results if not p]
        detail = f"{len(results) - len(failed)}/{len(results)} checks"
        if failed:
            detail += "; failing: " + " | ".join(failed)
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
