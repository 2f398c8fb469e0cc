import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specens.core import (
    Distribution,
    EnsembleKind,
    EnsembleSpec,
    LogitsVec,
    RandomSource,
    Vocabulary,
    apply_temperature,
    contrastive_ensemble,
    ensemble,
    general_weighted_ensemble,
    inverse_cdf,
    normalize,
    one_hot,
    sample,
    tv_distance,
    weighted_ensemble,
)
from specens.errors import VocabMismatchError, WeightError, ZeroMassError

# softmax([-0.1, 0.1]) evaluated to 40 digits with decimal arithmetic
SOFTMAX_M01_P01 = (0.4501660026875220914408474581608239082304, 0.5498339973124779085591525418391760917696)


def probs_vectors(min_size=2, max_size=12):
    return st.integers(min_size, max_size).flatmap(
        lambda n: st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=n, max_size=n)
        .filter(lambda xs: sum(xs) > 1e-3))


def dist_pairs(max_size=12):
    return st.integers(2, max_size).flatmap(
        lambda n: st.tuples(*[st.lists(st.floats(0.0, 1.0), min_size=n, max_size=n)
                              .filter(lambda xs: sum(xs) > 1e-3)] * 2))


def assert_is_distribution(d: Distribution):
    assert np.all(d.probs >= 0)
    assert abs(d.probs.sum() - 1.0) <= 1e-9


class TestVocabulary:
    def test_minimum_size(self):
        with pytest.raises(ValueError):
            Vocabulary(1)

    def test_labels(self):
        v = Vocabulary(2, ("a", "b"))
        assert v.label(1) == "b"
        with pytest.raises(ValueError):
            Vocabulary(2, ("a", "a"))
        with pytest.raises(ValueError):
            Vocabulary(3, ("a", "b"))


class TestDistribution:
    def test_normalizes_on_construction(self):
        d = Distribution([1.0, 3.0])
        assert d.tolist() == [0.25, 0.75]

    def test_rejects_negative_and_nan(self):
        with pytest.raises(ValueError):
            Distribution([0.5, -0.1, 0.6])
        with pytest.raises(ValueError):
            Distribution([math.nan, 1.0])

    def test_rejects_zero_mass(self):
        with pytest.raises(ZeroMassError):
            Distribution([0.0, 0.0])

    def test_probs_are_read_only(self):
        d = Distribution([0.5, 0.5])
        with pytest.raises(ValueError):
            d.probs[0] = 1.0

    def test_already_normalized_rows_are_kept_bitwise(self):
        row = np.random.default_rng(0).dirichlet(np.ones(7))
        assert np.array_equal(Distribution(row).probs, row)

    def test_logits_floor(self):
        l = Distribution([1.0, 0.0]).logits()
        assert l.logits[0] == 0.0
        assert l.logits[1] == pytest.approx(math.log(1e-12))


class TestLogitsVec:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            LogitsVec([0.0, math.inf])


class TestNormalize:
    @pytest.mark.parametrize("raw, expected", [
        ([0.2, 0.2], [0.5, 0.5]),
        ([0.0, 0.3], [0.0, 1.0]),
    ])
    def test_examples(self, raw, expected):
        assert normalize(raw).tolist() == pytest.approx(expected, abs=1e-15)

    @pytest.mark.parametrize("raw", [[0.0, 0.0], [1e-13, 0.0]])
    def test_zero_mass(self, raw):
        with pytest.raises(ZeroMassError):
            normalize(raw)


class TestWeightedEnsemble:
    def test_lambda_zero_is_p(self):
        r = weighted_ensemble(Distribution([0.6, 0.4]), Distribution([0.1, 0.9]), 0.0)
        assert r.tolist() == pytest.approx([0.1, 0.9], abs=1e-15)

    def test_lambda_one_is_q(self):
        r = weighted_ensemble(Distribution([0.7, 0.3]), Distribution([0.1, 0.9]), 1.0)
        assert r.tolist() == pytest.approx([0.7, 0.3], abs=1e-15)

    def test_midpoint(self):
        r = weighted_ensemble(Distribution([0.8, 0.2]), Distribution([0.2, 0.8]), 0.5)
        assert r.tolist() == pytest.approx([0.5, 0.5], abs=1e-15)

    def test_vocab_mismatch(self):
        with pytest.raises(VocabMismatchError):
            weighted_ensemble(Distribution([0.5, 0.5]), Distribution([0.2, 0.3, 0.5]), 0.5)

    @given(dist_pairs(), st.floats(0.0, 1.0))
    def test_swap_symmetry(self, pair, lam):
        q, p = Distribution(pair[0]), Distribution(pair[1])
        a = weighted_ensemble(q, p, lam).probs
        b = weighted_ensemble(p, q, 1.0 - lam).probs
        assert np.max(np.abs(a - b)) <= 1e-12
        assert_is_distribution(weighted_ensemble(q, p, lam))


class TestContrastiveEnsemble:
    def test_mu_zero_is_softmax_of_expert(self):
        r = contrastive_ensemble(LogitsVec([3.0, -2.0]), LogitsVec([0.0, 0.0]), 0.0, 1.0)
        assert r.tolist() == pytest.approx([0.5, 0.5], abs=1e-15)

    def test_against_high_precision_softmax(self):
        r = contrastive_ensemble(LogitsVec([1.0, -1.0]), LogitsVec([0.0, 0.0]), 0.1, 1.0)
        assert r.tolist() == pytest.approx(SOFTMAX_M01_P01, abs=1e-15)

    def test_greedy(self):
        r = contrastive_ensemble(LogitsVec([0.0, 0.0]), LogitsVec([2.0, 0.0]), 0.1, 0.0)
        assert r.tolist() == [1.0, 0.0]

    @given(st.lists(st.floats(-20, 20), min_size=4, max_size=4),
           st.lists(st.floats(-20, 20), min_size=4, max_size=4),
           st.floats(-50, 50), st.floats(0.0, 2.0), st.floats(0.1, 3.0))
    def test_shift_invariance_in_expert_logits(self, lq, lp, shift, mu, t):
        a = contrastive_ensemble(LogitsVec(lq), LogitsVec(lp), mu, t).probs
        b = contrastive_ensemble(LogitsVec(lq), LogitsVec(np.asarray(lp) + shift), mu, t).probs
        assert np.max(np.abs(a - b)) <= 1e-9


class TestGeneralWeightedEnsemble:
    def test_selects_first(self):
        d = [Distribution([0.3, 0.7]), Distribution([0.9, 0.1]), Distribution([0.5, 0.5])]
        assert general_weighted_ensemble(d, [1.0, 0.0, 0.0]).tolist() == pytest.approx([0.3, 0.7], abs=1e-15)

    def test_fixed_point(self):
        d = [Distribution([0.4, 0.6])] * 3
        assert general_weighted_ensemble(d, [1 / 3] * 3).tolist() == pytest.approx([0.4, 0.6], abs=1e-15)

    def test_arithmetic(self):
        d = [Distribution([1.0, 0.0]), Distribution([0.0, 1.0]), Distribution([0.5, 0.5])]
        assert general_weighted_ensemble(d, [1 / 3] * 3).tolist() == pytest.approx([0.5, 0.5], abs=1e-15)

    @pytest.mark.parametrize("weights", [[0.5, 0.6], [1.2, -0.2], [0.5, 0.5, 0.5]])
    def test_malformed_weights(self, weights):
        d = [Distribution([0.5, 0.5])] * 2
        with pytest.raises(WeightError):
            general_weighted_ensemble(d, weights)


class TestTemperature:
    @pytest.mark.parametrize("logits, t, expected", [
        ([0.0, 0.0], 1.0, [0.5, 0.5]),
        ([3.0, 1.0], 0.0, [1.0, 0.0]),
        ([1.0, 1.0], 0.0, [1.0, 0.0]),
    ])
    def test_examples(self, logits, t, expected):
        assert apply_temperature(LogitsVec(logits), t).tolist() == pytest.approx(expected, abs=1e-15)

    @given(probs_vectors())
    def test_unit_temperature_round_trip(self, raw):
        d = Distribution(raw)
        again = apply_temperature(d.logits(), 1.0)
        # entries below the logit floor come back at about 1e-12
        assert np.max(np.abs(again.probs - d.probs)) <= 1e-9

    def test_sharpening(self):
        d = apply_temperature(LogitsVec([1.0, 0.0]), 0.5)
        assert d[0] == pytest.approx(1 / (1 + math.exp(-2.0)), abs=1e-15)


class TestEnsembleSpec:
    @pytest.mark.parametrize("kwargs", [
        {"kind": "weighted", "lam": 1.5},
        {"kind": "contrastive", "mu": -0.1},
        {"kind": "general"},
        {"kind": "general", "weights": (0.5, 0.4)},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(WeightError):
            EnsembleSpec(**kwargs)

    def test_negative_temperature(self):
        with pytest.raises(ValueError):
            EnsembleSpec.weighted(0.5, -1.0)

    def test_model_counts(self):
        with pytest.raises(WeightError):
            EnsembleSpec.weighted(0.5).check_model_count(3)
        with pytest.raises(WeightError):
            EnsembleSpec.uniform(3).check_model_count(2)
        EnsembleSpec.uniform(3).check_model_count(3)

    @pytest.mark.parametrize("spec", [
        EnsembleSpec.weighted(0.3, 0.7),
        EnsembleSpec.contrastive(0.2),
        EnsembleSpec.general([0.2, 0.3, 0.5], 0.0),
    ])
    def test_dict_round_trip(self, spec):
        assert EnsembleSpec.from_dict(spec.to_dict()) == spec

    def test_greedy_ensemble_collapses(self):
        spec = EnsembleSpec.weighted(0.5, 0.0)
        q, p = one_hot(0, 3), one_hot(2, 3)
        # [0.5, 0, 0.5] ties break to the lowest id
        assert ensemble(spec, [q, p], []).tolist() == [1.0, 0.0, 0.0]
        assert spec.kind is EnsembleKind.WEIGHTED


class TestTVDistance:
    def test_examples(self):
        assert tv_distance(Distribution([0.3, 0.7]), Distribution([0.3, 0.7])) == 0.0
        assert tv_distance(Distribution([1.0, 0.0]), Distribution([0.0, 1.0])) == 2.0
        assert tv_distance(Distribution([0.8, 0.2]), Distribution([0.5, 0.5])) == pytest.approx(0.6, abs=1e-15)

    @given(dist_pairs())
    def test_metric_properties(self, pair):
        a, b = Distribution(pair[0]), Distribution(pair[1])
        d = tv_distance(a, b)
        assert d == tv_distance(b, a)
        assert 0.0 <= d <= 2.0 + 1e-12
        assert tv_distance(a, a) == 0.0
        if d <= 1e-12:
            assert np.allclose(a.probs, b.probs, atol=1e-12)


class TestSampling:
    def test_uniform_range(self):
        rng = RandomSource(5)
        draws = [rng.uniform() for _ in range(10000)]
        assert all(0.0 < u <= 1.0 for u in draws)
        assert rng.draws == 10000

    def test_seed_range(self):
        with pytest.raises(ValueError):
            RandomSource(-1)
        with pytest.raises(ValueError):
            RandomSource(2 ** 64)

    def test_degenerate(self):
        rng = RandomSource(0)
        assert {sample(Distribution([1.0, 0.0]), rng) for _ in range(100)} == {0}
        assert {sample(Distribution([0.0, 1.0]), rng) for _ in range(100)} == {1}

    @pytest.mark.parametrize("u, expected", [(0.75, 1), (0.5, 0), (0.25, 0), (1.0, 1)])
    def test_inverse_cdf_threshold(self, u, expected):
        assert inverse_cdf(Distribution([0.5, 0.5]).cdf, u) == expected

    def test_inverse_cdf_never_returns_zero_mass_tail(self):
        cdf = [0.5, 1.0 - 1e-17, 1.0 - 1e-17]
        assert inverse_cdf(cdf, 1.0) == 1

    def test_reproducible_and_calibrated(self):
        d = Distribution([0.1, 0.2, 0.3, 0.4])
        a = [sample(d, RandomSource(9)) for _ in range(1)]
        rng1, rng2 = RandomSource(123), RandomSource(123)
        s1 = [sample(d, rng1) for _ in range(100_000)]
        s2 = [sample(d, rng2) for _ in range(100_000)]
        assert s1 == s2
        freq = np.bincount(s1, minlength=4) / len(s1)
        assert np.abs(freq - d.probs).sum() <= 0.02
        assert a == [sample(d, RandomSource(9))]


@settings(max_examples=200)
@given(st.integers(2, 6).flatmap(lambda n: st.tuples(
    st.lists(st.lists(st.floats(0.0, 1.0), min_size=4, max_size=4).filter(lambda xs: sum(xs) > 1e-3),
             min_size=n, max_size=n),
    st.lists(st.floats(0.01, 1.0), min_size=n, max_size=n))))
def test_general_ensemble_is_distribution(case):
    rows, w = case
    w = np.asarray(w) / np.sum(w)
    w[-1] = 1.0 - w[:-1].sum()
    if w[-1] < 0:
        return
    assert_is_distribution(general_weighted_ensemble([Distribution(r) for r in rows], list(w)))
