"""Closed-form speed/acceptance quantities and brute-force oracles."""

from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np

from .core import Distribution, EnsembleKind, EnsembleSpec, ensemble, tv_distance
from .errors import BudgetExceeded, InvariantError
from .models import LanguageModel

ENUMERATION_BUDGET = 1_000_000


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


def _check_gamma(*gammas: int) -> None:
    for g in gammas:
        if int(g) != g or g < 1:
            raise ValueError(f"proposal lengths must be integers >= 1, got {g}")


def _check_cost(c: float) -> None:
    if not (c > 0 and math.isfinite(c)):
        raise ValueError(f"cost coefficient must be positive, got {c}")


def acceptance_rate_exact(q: Distribution, r: Distribution) -> float:
    """Probability that a token drafted from ``q`` survives verification against ``r``."""
    alpha = float(np.minimum(q.probs, r.probs).sum())
    via_tv = 1.0 - 0.5 * tv_distance(q, r)
    if abs(alpha - via_tv) > 1e-12:
        raise InvariantError(f"sum-of-min {alpha!r} disagrees with 1 - TV/2 {via_tv!r}")
    return alpha


def expected_accepted_tokens(alpha: float, gamma: int) -> float:
    """Expected tokens emitted by one draft/verify cycle without a bonus token."""
    _check_alpha(alpha)
    _check_gamma(gamma)
    if alpha == 1.0:
        return float(gamma)
    return (1.0 - alpha ** gamma) / (1.0 - alpha)


def improvement_factor_se(alpha: float, gamma: int, c: float) -> float:
    """Speed of the speculative ensemble relative to the vanilla ensemble.

    ``c`` is the drafter's cost per invocation in units of the verifier's.
    """
    _check_cost(c)
    return expected_accepted_tokens(alpha, gamma) * (1.0 + c) / (1.0 + c * gamma)


def improvement_factor_alternate(alpha: float, gamma_q: int, gamma_p: int, c: float) -> float:
    """Per-cycle improvement factor of the alternate proposal framework.

    A cycle drafted by the cheaper model saves one draft invocation whenever
    the previous cycle ended in a bonus token (probability ``alpha**gamma_p``).
    """
    _check_cost(c)
    _check_gamma(gamma_p)
    tokens = expected_accepted_tokens(alpha, gamma_q)
    return tokens * (1.0 + c) / (1.0 + c * gamma_q - alpha ** gamma_p * c)


def alternate_speedup_exact(alpha_q: float, alpha_p: float, gamma_q: int, gamma_p: int, c: float) -> float:
    """Long-run speedup of the alternating scheme over the vanilla ensemble.

    Renewal-reward over the three cycle types the scheme actually visits:
    the default drafter with an empty cache, the other model drafting after
    its bonus token was cached, and the default drafter with a cached bonus.
    ``alpha_q``/``alpha_p`` are per-token acceptance rates when the default
    (cost ``c``) or the other model (cost 1) drafts.
    """
    _check_alpha(alpha_q)
    _check_alpha(alpha_p)
    _check_gamma(gamma_q, gamma_p)
    _check_cost(c)
    a = alpha_q ** gamma_q
    b = alpha_p ** gamma_p
    # stationary weights up to a common factor: empty, cached-default, other
    w_empty, w_cached, w_other = 1.0 - a * b, a * b, a
    tokens = ((w_empty + w_cached) * expected_accepted_tokens(alpha_q, gamma_q)
              + w_other * expected_accepted_tokens(alpha_p, gamma_p))
    time = (w_empty * (c * gamma_q + 1.0)
            + w_cached * (c * (gamma_q - 1) + 1.0)
            + w_other * ((gamma_p - 1) + c))
    return tokens / time * (1.0 + c)


def weighted_alpha_lower_bound(lam: float) -> float:
    """With r = lam*q + (1-lam)*p and q drafting, alpha >= lam."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return lam


def best_side(lam: float) -> tuple[float, int]:
    """Best acceptance bound over the choice of drafter, and that drafter's index.

    Index 0 is the model weighted by ``lam``; ties go to it.
    """
    bound = weighted_alpha_lower_bound(lam)
    if bound >= 1.0 - lam:
        return bound, 0
    return 1.0 - lam, 1


def speedup_exists_condition(lam: float, c: float) -> bool:
    weighted_alpha_lower_bound(lam)
    _check_cost(c)
    return lam > c / (1.0 + c)


def exact_ensemble_distribution(models: Sequence[LanguageModel], spec: EnsembleSpec,
                                prefix: Sequence[int]) -> Distribution:
    t = spec.temperature
    dists = [m.distribution_for(prefix, t) for m in models]
    logits = [m.logits_for(prefix) for m in models] if spec.kind is EnsembleKind.CONTRASTIVE else []
    return ensemble(spec, dists, logits)


def exact_sequence_distribution(models: Sequence[LanguageModel], spec: EnsembleSpec,
                                prefix: Sequence[int], length: int) -> dict[tuple[int, ...], float]:
    """Probability of every continuation of ``length`` tokens under direct ensemble sampling.

    Zero-probability sequences are omitted.
    """
    v = models[0].vocab.size
    if v ** length > ENUMERATION_BUDGET:
        raise BudgetExceeded(f"{v}^{length} sequences exceed the budget of {ENUMERATION_BUDGET}")
    out: dict[tuple[int, ...], float] = {}

    def walk(seq: tuple[int, ...], prob: float) -> None:
        if len(seq) == length:
            out[seq] = prob
            return
        r = exact_ensemble_distribution(models, spec, list(prefix) + list(seq))
        for x, px in enumerate(r.probs.tolist()):
            if px > 0.0:
                walk(seq + (x,), prob * px)

    walk((), 1.0)
    total = math.fsum(out.values())
    if abs(total - 1.0) > 1e-9:
        raise InvariantError(f"sequence probabilities sum to {total!r}")
    return out


def accepted_tokens_by_enumeration(alpha: float, gamma: int) -> float:
    """Expected tokens emitted by one cycle, summed over every accept/reject pattern."""
    _check_alpha(alpha)
    _check_gamma(gamma)
    total = 0.0
    for pattern in itertools.product((True, False), repeat=gamma):
        prob = 1.0
        for ok in pattern:
            prob *= alpha if ok else 1.0 - alpha
        run = next((i for i, ok in enumerate(pattern) if not ok), gamma)
        # a rejection still emits the resampled token
        total += prob * min(run + 1, gamma)
    return total


def formula_identity_checks(grid: int = 100, tol: float = 1e-12) -> list[dict]:
    """Self-checks of the closed forms; each entry records its worst case."""
    alphas = np.linspace(0.0, 1.0, grid)
    cs = np.linspace(0.01, 2.0, grid)
    checks = []

    worst = max(abs(improvement_factor_se(a, 1, c) - 1.0) for a in alphas for c in cs)
    checks.append({"name": "se_factor_gamma1_is_one", "max_error": worst, "passed": worst <= tol})

    low = min(improvement_factor_alternate(a, 1, 1, c) for a in alphas for c in cs)
    checks.append({"name": "alternate_factor_unit_gammas_at_least_one", "min_factor": low,
                   "passed": low >= 1.0 - tol})

    worst = max(abs(expected_accepted_tokens(a, g) - accepted_tokens_by_enumeration(a, g))
                for a in alphas[::10] for g in range(1, 7))
    checks.append({"name": "expected_tokens_matches_enumeration", "max_error": worst, "passed": worst <= tol})

    worst = max(abs(improvement_factor_se(0.0, g, c) - (1 + c) / (1 + c * g)) for g in range(1, 9) for c in cs)
    checks.append({"name": "se_factor_alpha0", "max_error": worst, "passed": worst <= tol})

    worst = max(abs(improvement_factor_se(1.0, g, c) - g * (1 + c) / (1 + c * g)) for g in range(1, 9) for c in cs)
    checks.append({"name": "se_factor_alpha1_limit", "max_error": worst, "passed": worst <= tol})

    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        q, r = (Distribution(x) for x in rng.dirichlet(np.ones(8), size=2))
        worst = max(worst, abs(acceptance_rate_exact(q, r) - (1.0 - 0.5 * tv_distance(q, r))))
    checks.append({"name": "acceptance_equals_one_minus_half_tv", "max_error": worst, "passed": worst <= tol})
    for c in checks:
        for k, v in c.items():
            if isinstance(v, np.generic):
                c[k] = v.item()
    return checks
