"""Acceptance criteria, each run at its stated tolerance.

Every check records a pass/fail line; the terminal summary prints one line
per criterion.
"""

import itertools
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from scipy.stats import rankdata, spearmanr

from specens.analysis import (
    best_side,
    exact_sequence_distribution,
    expected_accepted_tokens,
    improvement_factor_alternate,
    improvement_factor_se,
)
from specens.core import EnsembleSpec, RandomSource
from specens.decoding import Strategy
from specens.harness import (
    ExperimentConfig,
    build_decoder,
    derive_seed,
    run_experiment,
    validate_acceptance_identity,
    validate_distributional_correctness,
    validate_never_slower,
)
from specens.models import random_table_model

from conftest import record

W05 = EnsembleSpec.weighted(0.5)
C01 = EnsembleSpec.contrastive(0.1, 1.0)
G3 = EnsembleSpec.uniform(3)


def tables(n, vocab, context, base, cost=1.0, concentration=1.0):
    return [random_table_model(base + i, vocab, context, concentration, cost, f"m{i}") for i in range(n)]


def experiment(models, strategies, sweep, sessions, tokens, spec=W05, seed=1):
    cfg = ExperimentConfig.from_dict({
        "models": [], "ensemble": spec.to_dict(), "strategies": strategies,
        "sweep": sweep, "sessions": sessions, "tokens_per_session": tokens, "seed": seed,
    })
    return run_experiment(cfg, models=models)


# -- 1: distributional correctness --------------------------------------------

DIST_CELLS = [
    (Strategy.SPEC_ENSEMBLE, W05, (3, 1)),
    (Strategy.SPEC_ENSEMBLE, C01, (3, 1)),
    (Strategy.ALTERNATE, W05, (3, 2)),
    (Strategy.ALTERNATE, C01, (3, 2)),
    (Strategy.NMODEL_SE, G3, (2, 1, 3)),
    (Strategy.NMODEL_SE, W05, (3, 2)),
    (Strategy.NMODEL_SE, C01, (3, 2)),
]


@pytest.mark.parametrize("strategy, spec, gammas", DIST_CELLS,
                         ids=[f"{s.value}-{e.kind.value}" for s, e, _ in DIST_CELLS])
def test_c1_distributional_correctness(strategy, spec, gammas):
    models = tables(len(gammas), 16, 1, 500)
    r = validate_distributional_correctness(models, spec, strategy, 200_000, 0.02, gammas=gammas, seed=11)
    worst = max(r.tv_by_position)
    record(1, r.passed, f"{strategy.value}/{spec.kind.value} n={len(models)} max TV {worst:.4f} (<= 0.02)")
    assert r.passed


# -- 2: sequence oracle -------------------------------------------------------

SEQ_CELLS = [
    ("context-free", Strategy.SPEC_ENSEMBLE, W05, (2, 1), 0),
    ("context-free", Strategy.ALTERNATE, W05, (2, 2), 0),
    ("context-free", Strategy.NMODEL_SE, G3, (2, 1, 2), 0),
    ("context-free", Strategy.VANILLA_SD, W05, (2, 1), 0),
    ("context-free", Strategy.ALTERNATE, C01, (2, 1), 0),
    ("context-1", Strategy.ALTERNATE, W05, (2, 2), 1),
    ("context-1", Strategy.NMODEL_SE, G3, (2, 1, 2), 1),
]


@pytest.mark.parametrize("label, strategy, spec, gammas, context", SEQ_CELLS,
                         ids=[f"{c[0]}-{c[1].value}-{c[2].kind.value}" for c in SEQ_CELLS])
def test_c2_sequence_oracle(label, strategy, spec, gammas, context):
    models = tables(len(gammas), 5, context, 700)
    exact = exact_sequence_distribution(models, spec, [], 3)
    decoder = build_decoder(strategy, models, spec, gammas, 3)
    runs = 300_000
    counts = Counter(tuple(decoder.run(RandomSource(derive_seed(23, j))).tokens) for j in range(runs))
    tv = sum(abs(counts.get(s, 0) / runs - exact.get(s, 0.0)) for s in set(counts) | set(exact))
    ok = tv <= 0.03
    record(2, ok, f"{label} {strategy.value}/{spec.kind.value} TV {tv:.4f} (<= 0.03)")
    assert ok


# -- 3: acceptance identity and lambda bounds ---------------------------------

ACC_CELLS = [
    (Strategy.SPEC_ENSEMBLE, W05, (3, 1)),
    (Strategy.SPEC_ENSEMBLE, C01, (3, 1)),
    (Strategy.ALTERNATE, W05, (3, 2)),
    (Strategy.NMODEL_SE, G3, (2, 1, 3)),
]


@pytest.mark.parametrize("strategy, spec, gammas", ACC_CELLS,
                         ids=[f"{s.value}-{e.kind.value}" for s, e, _ in ACC_CELLS])
def test_c3_acceptance_identity(strategy, spec, gammas):
    models = tables(len(gammas), 4, 1, 900)
    r = validate_acceptance_identity(models, spec, strategy, 1_000_000, 0.01, gammas=gammas, seed=5)
    record(3, r.passed, f"{strategy.value}/{spec.kind.value} max per-context deviation {r.max_deviation:.4f}, "
                        f"pooled {r.pooled_deviation:.4f} (<= 0.01)")
    assert r.passed


LAMBDAS = [round(0.1 * i, 1) for i in range(1, 10)]


def test_c3_alpha_at_least_lambda():
    q, p = tables(2, 16, 1, 1100)
    report = experiment([q, p], [{"strategy": "spec-ensemble", "gammas": [3, 1]}],
                        {"parameter": "lambda", "values": LAMBDAS}, 200, 64)
    cells = [c for c in report.cells if c.strategy == "spec-ensemble"]
    slack = min(c.empirical_alpha - c.sweep_value for c in cells)
    ok = slack >= 0
    record(3, ok, f"alpha >= lambda in all {len(cells)} weighted cells, min slack {slack:.4f}")
    assert ok


def test_c3_alpha_at_least_best_side():
    q, p = tables(2, 16, 1, 1100)
    slacks = []
    for lam in LAMBDAS:
        bound, proposer = best_side(lam)
        report = experiment([q, p], [{"strategy": "spec-ensemble", "gammas": [3, 3],
                                      "default_proposer_index": proposer}],
                            None, 200, 64, spec=EnsembleSpec.weighted(lam))
        slacks.append(report.cells[1].empirical_alpha - bound)
    ok = min(slacks) >= 0
    record(3, ok, f"alpha >= max(lambda, 1 - lambda) with the better proposer, min slack {min(slacks):.4f}")
    assert ok


# -- 4 and 5: improvement factors against simulation --------------------------

COSTS = (0.1, 0.5, 1.0)


@pytest.mark.parametrize("c", COSTS)
def test_c4_se_factor(c):
    q, p = tables(2, 16, 1, 1300)
    report = experiment([q.with_cost(c), p], [{"strategy": "spec-ensemble", "gammas": [1, 1]}],
                        {"parameter": "gamma", "values": [1, 2, 5]}, 2000, 256)
    failures = []
    for cell in (x for x in report.cells if x.strategy == "spec-ensemble"):
        gamma = cell.gammas[0]
        predicted = improvement_factor_se(cell.empirical_alpha, gamma, c)
        err = abs(cell.speedup - predicted) / predicted
        ok = err <= 0.05
        record(4, ok, f"gamma={gamma} c={c} alpha={cell.empirical_alpha:.4f} measured {cell.speedup:.4f} "
                      f"predicted {predicted:.4f} rel err {err:.4f}")
        if not ok:
            failures.append((gamma, round(err, 4)))
    assert not failures, f"formula off by more than 5% at (gamma, err): {failures}"


@pytest.mark.parametrize("c", COSTS)
def test_c5_alternate_factor(c):
    q, p = tables(2, 16, 1, 1300)
    strategies = [{"strategy": "alternate", "gammas": [1, gp]} for gp in (1, 2)]
    report = experiment([q.with_cost(c), p], strategies, {"parameter": "gamma", "values": [1, 2, 5]}, 2000, 256)
    failures = []
    for cell in (x for x in report.cells if x.strategy == "alternate"):
        gq, gp = cell.gammas
        predicted = improvement_factor_alternate(cell.empirical_alpha, gq, gp, c)
        err = abs(cell.speedup - predicted) / predicted
        exact_err = abs(cell.speedup - cell.predicted_factor_exact) / cell.predicted_factor_exact
        ok = err <= 0.05
        record(5, ok, f"gamma_q={gq} gamma_p={gp} c={c} alpha={cell.empirical_alpha:.4f} "
                      f"measured {cell.speedup:.4f} predicted {predicted:.4f} rel err {err:.4f} "
                      f"(three-cycle model err {exact_err:.4f})")
        if not ok:
            failures.append((gq, gp, round(err, 4)))
    assert not failures, f"formula off by more than 5% at (gamma_q, gamma_p, err): {failures}"


# -- 6: never slower ----------------------------------------------------------

def test_c6_never_slower():
    pairs = [tuple(random_table_model(derive_seed(6, i, k), 8, 1) for k in range(2)) for i in range(50)]
    r = validate_never_slower(pairs, list(range(10)))
    ok = r.violations == 0 and r.strict_fraction > 0.95
    record(6, ok, f"{r.comparisons} comparisons, {r.violations} violations, strict fraction {r.strict_fraction:.3f}")
    assert ok


# -- 7: greedy equivalence ----------------------------------------------------

def _greedy_fixture(i):
    rng = np.random.default_rng(derive_seed(7, i))
    vocab = int(rng.integers(2, 13))
    context = int(rng.integers(0, 3))
    kind = ["weighted", "contrastive", "general"][i % 3]
    n = 3 if kind == "general" else 2
    models = [random_table_model(int(rng.integers(1 << 31)), vocab, context,
                                 float(rng.choice([0.1, 1.0, 10.0]))) for _ in range(n)]
    if kind == "weighted":
        spec = EnsembleSpec.weighted(float(rng.uniform()), 0.0)
    elif kind == "contrastive":
        spec = EnsembleSpec.contrastive(float(rng.uniform(0, 1)), 0.0)
    else:
        w = rng.dirichlet(np.ones(3))
        spec = EnsembleSpec.general([float(w[0]), float(w[1]), float(1.0 - w[0] - w[1])], 0.0)
    prefix = rng.integers(0, vocab, size=int(rng.integers(0, 4))).tolist()
    gammas = tuple(int(g) for g in rng.integers(1, 5, size=n))
    return models, spec, prefix, gammas


def test_c7_greedy_equivalence():
    mismatches = 0
    for i in range(100):
        models, spec, prefix, gammas = _greedy_fixture(i)
        n = len(models)
        strategies = [Strategy.VANILLA_SD, Strategy.NMODEL_SE]
        if n == 2:
            strategies += [Strategy.SPEC_ENSEMBLE, Strategy.ALTERNATE]
        base = build_decoder(Strategy.VANILLA_ENSEMBLE, models, spec, gammas, 40).run(RandomSource(i), prefix)
        for strategy in strategies:
            out = build_decoder(strategy, models, spec, gammas, 40).run(RandomSource(i + 1), prefix)
            if bytes(out.tokens) != bytes(base.tokens):
                mismatches += 1
    ok = mismatches == 0
    record(7, ok, f"100 fixtures, {mismatches} sequences differ from greedy vanilla ensemble")
    assert ok


# -- 8: two-model consistency -------------------------------------------------

def test_c8_two_model_consistency():
    mismatches = 0
    for i in range(100):
        rng = np.random.default_rng(derive_seed(8, i))
        vocab = int(rng.integers(2, 10))
        models = [random_table_model(int(rng.integers(1 << 31)), vocab, int(rng.integers(0, 2)),
                                     cost=float(rng.uniform(0.05, 1.0))) for _ in range(2)]
        spec = EnsembleSpec.weighted(float(rng.uniform())) if i % 2 else EnsembleSpec.contrastive(0.3)
        gammas = tuple(int(g) for g in rng.integers(1, 6, size=2))
        a = build_decoder(Strategy.ALTERNATE, models, spec, gammas, 64).run(RandomSource(i))
        b = build_decoder(Strategy.NMODEL_SE, models, spec, gammas, 64).run(RandomSource(i))
        if (a.tokens, a.invocation_sequence()) != (b.tokens, b.invocation_sequence()):
            mismatches += 1
    ok = mismatches == 0
    record(8, ok, f"100 fixtures, {mismatches} traces differ")
    assert ok


# -- 9: formula identities ----------------------------------------------------

def _tree(alpha: Fraction, gamma: int) -> Fraction:
    total = Fraction(0)
    for pattern in itertools.product((1, 0), repeat=gamma):
        prob = Fraction(1)
        for ok in pattern:
            prob *= alpha if ok else 1 - alpha
        emitted = next((i + 1 for i, ok in enumerate(pattern) if not ok), gamma)
        total += prob * emitted
    return total


def test_c9_formula_identities():
    grid = [(a, c) for a in np.linspace(0.0, 1.0, 100) for c in np.linspace(0.01, 5.0, 100)]
    se_err = max(abs(improvement_factor_se(a, 1, c) - 1.0) for a, c in grid)
    alt_min = min(improvement_factor_alternate(a, 1, 1, c) for a, c in grid)
    alphas = [Fraction(k, 20) for k in range(21)]
    tree_err = max(abs(expected_accepted_tokens(float(a), g) - float(_tree(a, g)))
                   for a in alphas for g in range(1, 7))
    ok = se_err <= 1e-12 and alt_min >= 1.0 and tree_err <= 1e-12
    record(9, ok, f"se(alpha,1,c)=1 max err {se_err:.1e}; alternate(gamma 1,1) min {alt_min:.6f} over "
                  f"{len(grid)} points; enumeration max err {tree_err:.1e}")
    assert ok


# -- 10: gamma-sweep shape ----------------------------------------------------

def spearman(a, b) -> float:
    """Rank correlation; exact rational arithmetic when there are no ties."""
    ra, rb = rankdata(a), rankdata(b)
    n = len(a)
    if len(set(ra)) == n and len(set(rb)) == n:
        d2 = sum(int(x - y) ** 2 for x, y in zip(ra, rb))
        return float(1 - Fraction(6 * d2, n * (n * n - 1)))
    return float(spearmanr(a, b).statistic)


SHAPE_PAIRS = [(1500, 0.05, 1.0), (1510, 0.3, 1.0), (1520, 0.6, 0.5), (1530, 0.15, 0.3)]


@pytest.mark.parametrize("base, c, concentration", SHAPE_PAIRS)
def test_c10_gamma_sweep_shape(base, c, concentration):
    q, p = tables(2, 16, 1, base, concentration=concentration)
    report = experiment([q.with_cost(c), p], [{"strategy": "spec-ensemble", "gammas": [1, 1]}],
                        {"parameter": "gamma", "values": [1, 2, 3, 4, 5]}, 500, 256)
    cells = [x for x in report.cells if x.strategy == "spec-ensemble"]
    measured = [x.speedup for x in cells]
    predicted = [improvement_factor_se(x.empirical_alpha, x.gammas[0], c) for x in cells]
    rho = spearman(measured, predicted)
    ok = rho >= 0.9
    record(10, ok, f"pair {base} c={c}: spearman {rho:.3f}; measured "
                   f"{' '.join(f'{m:.3f}' for m in measured)}; predicted {' '.join(f'{v:.3f}' for v in predicted)}")
    assert ok
