import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import averaged_gap, composition_gamma_exact

from nashnet.operators import (
    AveragedOperator,
    GammaCertificate,
    NotCertifiableError,
    check_averaged,
    compose,
    composition_gamma,
    estimate_gamma,
    identity_operator,
    linear_gamma,
    promote_lipschitz,
    sample_pairs,
    smallest_gamma,
    weighted_sum,
)


def scalar(fn, gamma=1.0, label="f"):
    return AveragedOperator(fn, GammaCertificate(gamma), label=label, dim_in=1, dim_out=1, vectorized=True)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class TestCheckAveraged:
    def test_identity_passes_with_zero_violation(self):
        pairs = sample_pairs(3, 100, seed=1)
        rep = check_averaged(identity_operator(3), 1.0, pairs)
        assert rep.passed and rep.worst_violation <= 0.0

    def test_sigmoid_at_five_eighths(self):
        rep = check_averaged(scalar(sigmoid), 5 / 8, sample_pairs(1, 10_000))
        assert rep.passed

    def test_doubling_fails_with_violation_three(self):
        rep = check_averaged(scalar(lambda x: 2 * x), 1.0, [([0.0], [1.0])])
        assert not rep.passed
        assert rep.worst_violation == 3.0
        assert [w.tolist() for w in rep.witness] == [[0.0], [1.0]]

    def test_translation_is_nonexpansive(self):
        rep = check_averaged(scalar(lambda x: x + 2023.0), 1.0, sample_pairs(1, 1000))
        assert rep.passed

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            check_averaged(identity_operator(2), 1.0, sample_pairs(3, 10))

    @pytest.mark.parametrize("gamma", [0.0, -0.1, 1.5, math.nan])
    def test_gamma_out_of_range_rejected(self, gamma):
        with pytest.raises(ValueError):
            check_averaged(identity_operator(1), gamma, sample_pairs(1, 10))

    def test_empty_pairs_rejected(self):
        with pytest.raises(ValueError):
            check_averaged(identity_operator(1), 1.0, [])

    def test_report_serializes_witness(self):
        rep = check_averaged(scalar(lambda x: 3 * x), 1.0, sample_pairs(1, 50))
        d = rep.to_dict()
        assert set(d) >= {"label", "gamma", "provenance", "samples", "worst_violation", "witness"}
        assert len(d["witness"]) == 2

    def test_violations_match_oracle(self):
        X, Y = sample_pairs(1, 200, seed=3)
        rep = check_averaged(scalar(np.tanh), 0.7, (X, Y))
        gaps = [averaged_gap(np.tanh(x), np.tanh(y), x, y, 0.7) for x, y in zip(X, Y)]
        assert rep.worst_violation == pytest.approx(-min(gaps), abs=1e-12)


class TestCompose:
    def test_two_halves(self):
        op = compose([scalar(lambda x: x / 2, 0.5), scalar(lambda x: x / 2, 0.5)])
        assert op.gamma == 2 / 3

    def test_single_operator_unchanged(self):
        op = scalar(np.tanh, 0.8)
        assert compose([op]).gamma == 0.8

    def test_nonexpansive_factor_gives_one(self):
        assert composition_gamma([1.0, 0.5]) == 1.0

    def test_right_to_left_order(self):
        f = scalar(lambda x: x + 1.0, 1.0, "f")
        g = scalar(lambda x: 2.0 * x, 1.0, "g")
        assert compose([f, g])(np.array([3.0]))[0] == 7.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            compose([])

    def test_chain_mismatch_rejected(self):
        a = AveragedOperator(lambda x: x, GammaCertificate(1.0), dim_in=2, dim_out=2)
        b = AveragedOperator(lambda x: x, GammaCertificate(1.0), dim_in=3, dim_out=3)
        with pytest.raises(ValueError):
            compose([a, b])

    @given(st.lists(st.fractions(min_value=Fraction(1, 100), max_value=Fraction(99, 100), max_denominator=100), min_size=1, max_size=5))
    def test_formula_matches_exact_rational(self, gammas):
        got = composition_gamma([float(g) for g in gammas])
        assert got == pytest.approx(float(composition_gamma_exact(gammas)), rel=1e-12)

    @given(st.lists(st.floats(0.05, 0.95), min_size=2, max_size=4))
    def test_composition_not_better_than_factors(self, gammas):
        assert composition_gamma(gammas) >= max(gammas) - 1e-12


class TestWeightedSum:
    def test_five_eighths(self):
        op = weighted_sum([scalar(np.tanh, 0.5), scalar(np.tanh, 0.75)], [0.5, 0.5])
        assert op.gamma == 5 / 8

    def test_single_unchanged(self):
        op = scalar(np.tanh, 0.5)
        assert weighted_sum([op], [1.0]) is op

    def test_all_ones(self):
        assert weighted_sum([scalar(np.tanh), scalar(np.sin)], [0.3, 0.7]).gamma == 1.0

    @pytest.mark.parametrize("w", [[0.5, 0.6], [1.5, -0.5]])
    def test_invalid_weights(self, w):
        with pytest.raises(ValueError):
            weighted_sum([scalar(np.tanh), scalar(np.sin)], w)

    @given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=5), st.floats(-5, 5), st.randoms())
    def test_permutation_invariant(self, raw, x, rnd):
        w = np.array(raw) / np.sum(raw)
        fns = [np.tanh, np.sin, lambda v: v / 3, np.arctan, lambda v: 0.5 * np.cos(v)][: len(w)]
        ops = [scalar(f) for f in fns]
        idx = list(range(len(w)))
        rnd.shuffle(idx)
        a = weighted_sum(ops, w, atol=1e-9)(np.array([x]))
        b = weighted_sum([ops[i] for i in idx], w[idx], atol=1e-9)(np.array([x]))
        assert np.array_equal(a, b)


class TestPromote:
    @pytest.mark.parametrize("mu, gamma", [(0.5, 0.75), (0.0, 0.5), (0.99, 0.995)])
    def test_formula(self, mu, gamma):
        op = promote_lipschitz(lambda x: x, mu)
        assert op.gamma == pytest.approx(gamma, abs=1e-15)
        assert op.certificate.provenance == "derived_formula"

    def test_mu_one_rejected(self):
        with pytest.raises(ValueError):
            promote_lipschitz(lambda x: x, 1.0)

    @given(st.floats(0.0, 0.98), st.floats(-1, 1))
    def test_promoted_map_passes(self, mu, shift):
        op = promote_lipschitz(lambda x: mu * np.sin(x) + shift, mu, dim=1, vectorized=True)
        assert check_averaged(op, op.gamma, sample_pairs(1, 500, seed=7)).passed


class TestEstimate:
    def test_half_map(self):
        cert = estimate_gamma(scalar(lambda x: x / 2), box=(-10, 10), samples=10_000, dim=1)
        assert abs(cert.gamma - 0.75) <= 0.01
        assert cert.provenance == "numeric_estimate" and cert.samples == 10_000

    def test_identity(self):
        cert = estimate_gamma(identity_operator(2), samples=1000)
        assert cert.gamma <= 1.0 and cert.lipschitz == pytest.approx(1.0)

    def test_expansive_not_certifiable(self):
        with pytest.raises(NotCertifiableError) as err:
            estimate_gamma(scalar(lambda x: 2 * x), samples=1000, dim=1)
        assert err.value.lipschitz == pytest.approx(2.0)
        assert err.value.witness is not None

    def test_composed_estimate_below_certificate(self):
        a = scalar(lambda x: 0.5 * np.tanh(x), 0.75)
        b = scalar(lambda x: 0.9 * np.sin(x), 0.95)
        op = compose([a, b])
        est = estimate_gamma(op, samples=4000, dim=1)
        assert est.gamma <= op.gamma + 0.05

    def test_smallest_gamma_is_tight(self):
        X, Y = sample_pairs(1, 2000, seed=5)
        OX, OY = sigmoid(X), sigmoid(Y)
        g = smallest_gamma(X, Y, OX, OY)
        assert np.max(averaged_violations_at(X, Y, OX, OY, g)) <= 1e-9
        assert np.max(averaged_violations_at(X, Y, OX, OY, g * 0.99)) > 0

    def test_numeric_certificate_requires_metadata(self):
        with pytest.raises(ValueError):
            GammaCertificate(0.5, "numeric_estimate")


def averaged_violations_at(X, Y, OX, OY, g):
    return np.array([-averaged_gap(ox, oy, x, y, g) for x, y, ox, oy in zip(X, Y, OX, OY)])


class TestLinearGamma:
    def test_half_identity(self):
        assert linear_gamma(0.5 * np.eye(2)) == pytest.approx(0.25, abs=1e-10)

    def test_reflection(self):
        assert linear_gamma(-np.eye(2)) == pytest.approx(1.0, abs=1e-10)

    def test_expansive_none(self):
        assert linear_gamma(1.2 * np.eye(2)) is None

    @given(st.integers(0, 10_000))
    def test_certificate_valid(self, seed):
        rng = np.random.default_rng(seed)
        W = rng.standard_normal((3, 3))
        W /= 1.05 * np.linalg.norm(W, 2)
        g = linear_gamma(W)
        op = AveragedOperator(lambda x: x @ W.T, GammaCertificate(g), dim_in=3, vectorized=True)
        assert check_averaged(op, g, sample_pairs(3, 300, seed=seed), tol=1e-8).passed
