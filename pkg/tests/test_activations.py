import json

import numpy as np
import pytest

from nashnet.activations import CATALOG, ROWS, catalog, kinds, make_activation, verify_row
from nashnet.operators import AveragedOperator, GammaCertificate, check_averaged, sample_pairs

# rows whose constant is 1: the nonexpansiveness invariant applies
ONE_ROWS = [r.name for r in ROWS if r.claimed_gamma(dict(r.defaults, dim=4))[0] == 1.0]


class TestMakeActivation:
    def test_sigmoid(self):
        spec = make_activation("sigmoid")
        assert spec(0.0) == 0.5
        assert spec.gamma == 5 / 8 and spec.certificate.provenance == "closed_form_paper"

    def test_relu(self):
        spec = make_activation("relu", lam=1.0, b=0.0)
        assert spec(-3.0) == 0.0 and spec(3.0) == 3.0

    def test_metallic_mean(self):
        spec = make_activation("metallic_mean")
        assert spec(0.0) == 1.0 and spec.gamma == 0.5

    def test_softsign(self):
        spec = make_activation("softsign")
        assert spec(1.0) == 0.5 and spec.gamma == 1.0

    def test_unknown_kind_lists_valid(self):
        with pytest.raises(ValueError, match="valid kinds"):
            make_activation("nope")

    def test_unknown_param(self):
        with pytest.raises(ValueError):
            make_activation("relu", alpha=2.0)

    def test_out_of_regime_falls_back_to_estimate(self):
        spec = make_activation("tanh", lam=0.99)
        assert spec.certificate.provenance == "closed_form_paper"
        spec = make_activation("linear", lam=1.5)
        assert spec.certificate is None and "outside" in spec.discrepancy

    def test_failed_closed_form_is_downgraded(self):
        spec = make_activation("selu")
        assert spec.discrepancy and spec.certificate is None or spec.certificate.provenance == "numeric_estimate"

    def test_logistic_with_small_slope_uses_its_own_constant(self):
        assert make_activation("logistic", lam=0.5).gamma == pytest.approx(4.5 / 8)

    def test_logit_is_clamped(self):
        spec = make_activation("logit")
        assert spec(0.0) == spec(0.25) and spec(1.0) == spec(0.75)

    def test_vector_rows_declare_arity(self):
        assert make_activation("softmax").arity == "vector"
        assert make_activation("maxout").arity == "reduce"
        assert make_activation("sigmoid").arity == "elementwise"

    def test_softmax_sums_to_one(self):
        out = make_activation("softmax", lam=0.5)(np.array([1.0, 2.0, -3.0, 0.0]))
        assert out.sum() == pytest.approx(1.0, abs=1e-15)

    def test_attention_with_custom_r0(self):
        r0 = AveragedOperator(lambda x: 0.5 * x, GammaCertificate(0.75), dim_in=4, vectorized=True)
        spec = make_activation("attention", lam=0.5, r0=r0)
        soft = make_activation("softmax", lam=0.5)
        assert spec.table_gamma == pytest.approx(1 / (1 + 1 / (soft.gamma / (1 - soft.gamma) + 3)))
        x = np.array([1.0, -2.0, 0.5, 3.0])
        assert np.allclose(spec(x), soft(0.5 * x))

    def test_elementwise_coordinatewise(self):
        spec = make_activation("tanh", lam=0.5)
        x = np.array([[0.1, -2.0], [3.0, 0.0]])
        assert np.array_equal(spec(x), 0.5 * np.tanh(x))

    def test_spec_serializes(self):
        json.dumps(make_activation("attention").to_dict())


class TestCatalog:
    def test_every_row_has_unique_name(self):
        assert len(catalog()) == len(set(kinds())) == 47

    def test_duplicated_indices_are_keyed_by_name(self):
        by_index = {}
        for r in ROWS:
            by_index.setdefault(r.index, []).append(r.name)
        assert {"isrlu", "square_nonlinearity"} <= set(by_index["r25"])
        assert {"sinusoid", "sinc"} <= set(by_index["r29"])

    def test_entries_json(self):
        entries = json.loads(json.dumps(catalog()))
        assert {"name", "formula", "params", "gamma", "provenance"} <= set(entries[0])

    def test_rows_without_closed_form_say_estimate(self):
        for name in ("mish", "soft_clipping", "sinlu"):
            assert CATALOG[name].catalog_entry()["gamma"] == "estimate"
            assert verify_row(name) is None


@pytest.mark.parametrize("kind", ONE_ROWS)
def test_nonexpansive_rows(kind):
    rep = verify_row(kind, pairs=10_000, seed=11, gamma=1.0)
    assert rep.passed, f"{kind}: worst violation {rep.worst_violation:.3g} at {rep.witness}"


def test_gamma_below_sigmoid_constant_fails_with_witness():
    rep = verify_row("sigmoid", gamma=0.1, pairs=10_000)
    assert not rep.passed and rep.witness is not None


@pytest.mark.parametrize("kind", ["tanh", "relu", "softplus", "gelu", "cloglog", "metallic_mean"])
def test_closed_form_gamma_holds_on_other_seeds(kind):
    rep = verify_row(kind, pairs=5_000, seed=123)
    assert rep.passed


def test_swish_regime_is_sampled():
    spec = make_activation("swish", eps=0.5)
    assert spec.certificate is not None
    op = AveragedOperator(spec.fn, spec.certificate, dim_in=1, vectorized=True)
    assert check_averaged(op, spec.gamma, sample_pairs(1, 2000, seed=9)).passed
