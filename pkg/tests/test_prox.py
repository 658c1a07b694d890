import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import golden_min
from scipy.special import expit

from nashnet.prox import (
    F4,
    F23,
    F_ZERO,
    POTENTIALS,
    SIGMOID_POTENTIAL,
    activation_fixed_point,
    conjugate,
    conjugate_grad_identity_check,
    minimize_potential,
    moreau_envelope,
    potential_for,
    prox_eval,
)


def softsign(x):
    return x / (1 + np.abs(x))


GRID = np.linspace(-10, 10, 1000)


class TestProxEval:
    def test_zero_potential_is_identity(self):
        assert prox_eval(F_ZERO, 7.0) == pytest.approx(7.0, abs=1e-7)

    def test_f4_at_zero_is_centered(self):
        # f4 lives on |y| <= 1/2, so its prox is the centered sigmoid
        assert prox_eval(F4, 0.0) == pytest.approx(0.0, abs=1e-7)

    def test_sigmoid_potential_at_zero(self):
        assert prox_eval(SIGMOID_POTENTIAL, 0.0) == pytest.approx(0.5, abs=1e-7)

    def test_f23_at_one(self):
        assert prox_eval(F23, 1.0) == pytest.approx(0.5, abs=1e-7)

    def test_f4_grid(self):
        assert np.max(np.abs(prox_eval(F4, GRID) - (expit(GRID) - 0.5))) <= 1e-6

    def test_sigmoid_grid(self):
        assert np.max(np.abs(prox_eval(SIGMOID_POTENTIAL, GRID) - expit(GRID))) <= 1e-6

    def test_f23_grid(self):
        assert np.max(np.abs(prox_eval(F23, GRID) - softsign(GRID))) <= 1e-6

    def test_matches_scalar_oracle(self):
        for x in (-3.0, -0.2, 0.7, 4.0):
            ref = golden_min(lambda y: float(F23(y)) + 0.5 * (y - x) ** 2, -1 + 1e-12, 1 - 1e-12)
            assert prox_eval(F23, x) == pytest.approx(ref, abs=1e-7)

    def test_shape_preserved(self):
        assert prox_eval(F4, np.zeros((2, 3))).shape == (2, 3)

    @pytest.mark.parametrize("bad", [np.inf, np.nan])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(ValueError):
            prox_eval(F4, bad)

    def test_tol_must_be_positive(self):
        with pytest.raises(ValueError):
            prox_eval(F4, 0.0, tol=0.0)

    @given(st.floats(-30, 30), st.floats(-30, 30))
    def test_prox_is_firmly_nonexpansive(self, x, y):
        px, py = prox_eval(F23, x), prox_eval(F23, y)
        assert (px - py) ** 2 <= (px - py) * (x - y) + 1e-9


class TestPotentials:
    @pytest.mark.parametrize("name", list(POTENTIALS))
    def test_midpoint_convex(self, name):
        assert POTENTIALS[name].midpoint_convexity() <= 1e-12

    def test_infinite_outside_domain(self):
        assert F4(0.6) == np.inf and F23(1.0) == np.inf and F23(-1.0) == np.inf
        assert np.isfinite(F4(0.5))

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            potential_for("relu")

    @pytest.mark.parametrize("pot", [F4, F23, SIGMOID_POTENTIAL])
    def test_fixed_point_is_minimizer(self, pot):
        assert activation_fixed_point(pot) == pytest.approx(minimize_potential(pot), abs=1e-6)

    def test_envelope_below_potential(self):
        xs = np.linspace(-0.4, 0.4, 9)
        env, _ = moreau_envelope(F4, xs)
        assert np.all(env <= F4(xs) + 1e-12)


class TestConjugate:
    def test_sigmoid_at_zero(self):
        rep = conjugate_grad_identity_check("sigmoid", [0.0])
        assert rep.passed and rep.fd_grad[0] == pytest.approx(0.5, abs=1e-4)

    def test_softsign_at_zero(self):
        rep = conjugate_grad_identity_check("softsign", [0.0])
        assert abs(rep.fd_grad[0]) <= 1e-4

    def test_sigmoid_at_two(self):
        rep = conjugate_grad_identity_check("sigmoid", [2.0])
        assert rep.fd_grad[0] == pytest.approx(0.8808, abs=1e-4)

    @pytest.mark.parametrize("kind", ["sigmoid", "softsign", "identity"])
    def test_identity_on_grid(self, kind):
        rep = conjugate_grad_identity_check(kind, np.linspace(-6, 6, 25))
        assert rep.passed, rep.max_error

    def test_conjugate_is_convex(self):
        xs = np.linspace(-5, 5, 41)
        g = conjugate(F23, xs)
        assert np.all(np.diff(g, 2) >= -1e-10)

    def test_report_dict(self):
        d = conjugate_grad_identity_check("softsign", [1.0]).to_dict()
        assert d["passed"] and d["kind"] == "softsign"
