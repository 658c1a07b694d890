"""Catalog of averaged activation functions.

Every row of the activation tables is registered under a unique name (the
tables reuse some indices, so rows are keyed by name).  Each row knows how to
evaluate itself, its parameter defaults, and the closed-form averagedness
constant claimed for it, if any, together with the regime in which the claim
applies.

:func:`make_activation` never trusts a closed form blindly: the claimed
constant is accepted as the certificate only when a sampled
:func:`~nashnet.operators.check_averaged` also passes.  Otherwise the
certificate falls back to :func:`~nashnet.operators.estimate_gamma` and the
discrepancy is logged and kept on the returned spec.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy.special import erf, expit, ndtri

from .operators import (
    DEFAULT_BOX,
    DEFAULT_PAIRS,
    DEFAULT_SEED,
    DEFAULT_TOL,
    AveragedOperator,
    GammaCertificate,
    NotCertifiableError,
    check_averaged,
    composition_gamma,
    estimate_gamma,
    identity_operator,
    sample_pairs,
)

logger = logging.getLogger(__name__)

ELEMENTWISE = "elementwise"
VECTOR = "vector"
REDUCE = "reduce"

# clamp margin for rows defined on (0, 1)
_UNIT_MARGIN = 1e-12


def _softplus(z):
    return np.logaddexp(0.0, z)


def _lam_norm(lam):
    return float(np.max(np.abs(np.atleast_1d(lam))))


def _softmax(z):
    z = np.asarray(z, dtype=float)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


# ----------------------------------------------------------------------------
# row definitions
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ActivationRow:
    name: str
    index: str
    title: str
    formula: str
    build: Callable
    defaults: dict = field(default_factory=dict)
    arity: str = ELEMENTWISE
    gamma_text: str = "estimate"
    # params -> (gamma or None, in_regime)
    gamma_rule: Optional[Callable] = None
    provenance: str = "closed_form_paper"
    note: str = ""

    def claimed_gamma(self, params):
        if self.gamma_rule is None:
            return None, False
        gamma, in_regime = self.gamma_rule(params)
        if not in_regime or gamma is None or not (0.0 < gamma <= 1.0):
            return None, False
        return float(gamma), True

    def catalog_entry(self):
        return {
            "name": self.name,
            "index": self.index,
            "title": self.title,
            "formula": self.formula,
            "arity": self.arity,
            "params": {k: _jsonable_param(v) for k, v in self.defaults.items()},
            "gamma": self.gamma_text,
            "provenance": self.provenance if self.gamma_rule is not None else "numeric_estimate",
            "note": self.note,
        }


def _jsonable_param(v):
    if isinstance(v, AveragedOperator):
        return v.label
    if v is None:
        return None
    if np.ndim(v) > 0:
        return np.asarray(v, dtype=float).tolist()
    return float(v)


def _const(g):
    return lambda p: (g, True)


def _half_one_plus_lam(strict):
    def rule(p):
        n = _lam_norm(p["lam"])
        ok = n < 1.0 if strict else n <= 1.0
        return (1.0 + n) / 2.0, ok

    return rule


def _build_linear(p):
    lam, b = np.asarray(p["lam"], float), np.asarray(p["b"], float)
    return lambda x: lam * x + b


def _build_relu(p):
    lam, b = np.asarray(p["lam"], float), np.asarray(p["b"], float)
    return lambda x: np.maximum(0.0, lam * x + b)


def _build_logistic(p):
    lam, b = np.asarray(p["lam"], float), np.asarray(p["b"], float)
    return lambda x: expit(lam * x + b)


def _build_elu(p):
    lam = p["lam"]
    return lambda x: np.where(x > 0, x, lam * np.expm1(np.minimum(x, 0.0)))


def _build_selu(p):
    lam, alpha = p["lam"], p["alpha"]
    return lambda x: lam * np.where(x >= 0, alpha * x, alpha * np.expm1(np.minimum(x, 0.0)))


def _build_softexp(p):
    lam = p["lam"]
    if lam == 0.0:
        return lambda x: np.array(x, dtype=float, copy=True)
    if lam > 0.0:
        return lambda x: lam + np.expm1(lam * x) / lam

    # defined for 1 - lam*(x + lam) > 0, i.e. x > -lam + 1/lam
    x_min = -lam + 1.0 / lam

    def f(x):
        xc = np.maximum(x, x_min + 1e-9)
        return -np.log1p(-lam * (xc + lam)) / lam

    return f


def _build_soft_clip(p):
    lam = p["lam"]
    return lambda x: (_softplus(lam * x) - _softplus(lam * (x - 1.0))) / lam


def _build_square_nl(p):
    def f(x):
        return np.where(
            x < -2.0,
            -1.0,
            np.where(x < 0.0, x + x * x / 4.0, np.where(x <= 2.0, x - x * x / 4.0, 1.0)),
        )

    return f


def _build_piecewise(p):
    return lambda x: np.clip(x + 0.5, 0.0, 1.0)


def _build_logit(p):
    # clamped onto its support [1/4, 3/4] so the map stays continuous
    def f(x):
        xc = np.clip(x, 0.25, 0.75)
        return 0.1 * np.log(xc / (1.0 - xc))

    return f


def _build_probit_softsign(p):
    def f(x):
        u = ndtri(np.clip(x, _UNIT_MARGIN, 1.0 - _UNIT_MARGIN))
        return u / (1.0 + np.abs(u))

    return f


def _build_maxout(p):
    return lambda x: np.max(x, axis=-1, keepdims=True)


def _build_lse_softplus(p):
    def f(x):
        x = np.asarray(x, dtype=float)
        zeros = np.zeros(x.shape[:-1] + (1,))
        return np.logaddexp.reduce(np.concatenate([zeros, x], axis=-1), axis=-1)[..., None]

    return f


def _build_gaussian(p):
    return lambda x: np.exp(-np.sum(np.asarray(x) ** 2, axis=-1, keepdims=True))


def _build_softmax(p):
    lam = p["lam"]
    return lambda x: _softmax(lam * np.asarray(x, dtype=float))


def _build_vector_softsign(p):
    return lambda x: x / (1.0 + np.linalg.norm(x, axis=-1, keepdims=True))


def _r0_operator(p):
    r0 = p.get("r0")
    return identity_operator() if r0 is None else r0


def _build_attention(p):
    r0 = _r0_operator(p)
    lam = p["lam"]
    return lambda x: _softmax(lam * np.asarray(r0.fn(x), dtype=float))


def _build_attention_lingauss(p):
    inner = _build_attention(p)

    def f(x):
        z = inner(x)
        return z * np.exp(-z * z)

    return f


def _attention_rule(extra):
    def rule(p):
        soft = make_activation("softmax", lam=p["lam"], dim=p.get("dim", 4))
        if soft.certificate is None:
            return None, False
        gammas = [soft.certificate.gamma, _r0_operator(p).gamma] + extra
        return composition_gamma(gammas), True

    return rule


_SQRT_E = math.sqrt(math.e)

ROWS = [
    ActivationRow("identity", "r1", "Identity", "x", lambda p: (lambda x: np.array(x, dtype=float, copy=True)),
                  gamma_text="1", gamma_rule=_const(1.0)),
    ActivationRow("linear", "r2", "Linear", "lam*x + b", _build_linear, {"lam": 0.5, "b": 0.0},
                  gamma_text="(1+|lam|_inf)/2 if |lam|_inf <= 1", gamma_rule=_half_one_plus_lam(False),
                  note="applied coordinatewise with diagonal lam"),
    ActivationRow("relu", "r3", "Rectified linear unit", "max(0, lam*x + b)", _build_relu, {"lam": 1.0, "b": 0.0},
                  gamma_text="(1+|lam|)/2 if |lam| <= 1", gamma_rule=_half_one_plus_lam(False)),
    ActivationRow("logistic", "r4", "Logistic", "1/(1+exp(-lam*x - b))", _build_logistic, {"lam": 1.0, "b": 0.0},
                  gamma_text="(4+|lam|)/8 if |lam| <= 1",
                  gamma_rule=lambda p: ((4.0 + _lam_norm(p["lam"])) / 8.0, _lam_norm(p["lam"]) <= 1.0)),
    ActivationRow("sigmoid", "sigma", "Sigmoid", "1/(1+exp(-x))", lambda p: expit,
                  gamma_text="5/8", gamma_rule=_const(5.0 / 8.0)),
    ActivationRow("tanh", "r5", "Hyperbolic tangent", "lam*tanh(x)", lambda p: (lambda x: p["lam"] * np.tanh(x)),
                  {"lam": 0.5}, gamma_text="(1+|lam|)/2 if |lam| < 1", gamma_rule=_half_one_plus_lam(True)),
    ActivationRow("softmax", "r6", "Softmax", "exp(lam*x_i)/sum_k exp(lam*x_k)", _build_softmax, {"lam": 0.5},
                  arity=VECTOR, gamma_text="(1+|lam|)/2 if |lam| < 1", gamma_rule=_half_one_plus_lam(True)),
    ActivationRow("gelu_tanh", "r7", "Gaussian error linear unit (GELU2)",
                  "lam*x/2*(1+tanh(sqrt(2/pi)*(x+0.044715x^3)))",
                  lambda p: (lambda x: p["lam"] * 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))),
                  {"lam": 0.5}, gamma_text="18/20", gamma_rule=_const(18.0 / 20.0),
                  note="table states no parameter condition; verified by sampling"),
    ActivationRow("gelu", "GELU", "Gaussian error linear unit", "lam*x*Phi(x)",
                  lambda p: (lambda x: p["lam"] * x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))),
                  {"lam": 0.5}, gamma_text="(1+|lam|)/2 if |lam| <= 1", gamma_rule=_half_one_plus_lam(False)),
    ActivationRow("softplus", "r8", "Softplus", "lam*log(1+exp(x))", lambda p: (lambda x: p["lam"] * _softplus(x)),
                  {"lam": 0.5}, gamma_text="(1+|lam|)/2 if |lam| <= 1", gamma_rule=_half_one_plus_lam(False)),
    ActivationRow("softplus_scaled", "softplus", "Softplus (scaled)", "log(1+exp(lam*x))/lam",
                  lambda p: (lambda x: _softplus(p["lam"] * x) / p["lam"]), {"lam": 1.0},
                  gamma_text="1", gamma_rule=_const(1.0)),
    ActivationRow("softplus_lse", "softplus", "Softplus (log-sum-exp)", "log(1+sum_k exp(x_k))", _build_lse_softplus,
                  arity=REDUCE, gamma_text="1", gamma_rule=_const(1.0)),
    ActivationRow("elu", "r9", "Exponential linear unit", "lam*(exp(x)-1) if x<=0 else x", _build_elu, {"lam": 1.0},
                  gamma_text="1", gamma_rule=_const(1.0)),
    ActivationRow("selu", "r10", "Scaled exponential linear unit", "lam*alpha*(exp(x)-1) if x<0 else lam*alpha*x",
                  _build_selu, {"alpha": 0.0507, "lam": 0.6733}, gamma_text="lam*alpha",
                  gamma_rule=lambda p: (p["lam"] * p["alpha"], True)),
    ActivationRow("leaky_relu", "r11", "Leaky rectified linear unit", "0.01x if x<0 else x",
                  lambda p: (lambda x: np.where(x < 0, 0.01 * x, x)), gamma_text="1", gamma_rule=_const(1.0)),
    ActivationRow("prelu", "r12", "Parametric rectified linear unit", "lam*x if x<0 else x",
                  lambda p: (lambda x: np.where(x < 0, p["lam"] * x, x)), {"lam": 0.25},
                  gamma_text="1", gamma_rule=_const(1.0)),
    ActivationRow("silu", "r13", "Sigmoid linear unit", "x/(1+exp(-x))", lambda p: (lambda x: x * expit(x)),
                  gamma_text="1", gamma_rule=_const(1.0)),
    ActivationRow("swish", "r14", "Swish", "eps*x*sigmoid(lam*x)",
                  lambda p: (lambda x: p["eps"] * x * expit(p["lam"] * x)), {"eps": 0.5, "lam": 1.0},
                  gamma_text="(10+11eps)/20", gamma_rule=lambda p: ((10.0 + 11.0 * p["eps"]) / 20.0, True),
                  note="table states no parameter condition; verified by sampling"),
    ActivationRow("gaussian", "r15", "Gaussian", "exp(-<x,x>)", _build_gaussian, arity=REDUCE,
                  gamma_text="(1+exp(-1))/2", gamma_rule=_const((1.0 + math.exp(-1.0)) / 2.0)),
    ActivationRow("maxout", "r16", "Maxout", "max_k x_k", _build_maxout, arity=REDUCE,
                  gamma_text="1", gamma_rule=_const(1.0)),
    ActivationRow("approx_heaviside", "r17", "Approximate Heaviside", "sigmoid(x/eps)",
                  lambda p: (lambda x: expit(x / p["eps"])), {"eps": 0.5},
                  gamma_text="(1+4eps)/(8eps) if eps >= 1/4",
                  gamma_rule=lambda p: ((1.0 + 4.0 * p["eps"]) / (8.0 * p["eps"]), p["eps"] >= 0.25)),
    ActivationRow("multiquadratic", "r18", "Multiquadratics", "sqrt((x-alpha)^2+lam^2)",
                  lambda p: (lambda x: np.hypot(x - p["alpha"], p["lam"])), {"alpha": 0.0, "lam": 1.0},
                  gamma_text="1", gamma_rule=_const(1.0)),
    ActivationRow("inverse_multiquadratic", "r19", "Inverse multiquadratics", "1/sqrt((x-alpha)^2+(1+lam)^2)",
                  lambda p: (lambda x: 1.0 / np.hypot(x - p["alpha"], 1.0 + p["lam"])), {"alpha": 0.0, "lam": 0.5},
                  gamma_text="(2+lam)/(2(1+lam))",
                  gamma_rule=lambda p: ((2.0 + p["lam"]) / (2.0 * (1.0 + p["lam"])), p["lam"] >= 0.0)),
    ActivationRow("mish", "r20", "Mish", "x*tanh(softplus(x))", lambda p: (lambda x: x * np.tanh(_softplus(x)))),
    ActivationRow("metallic_mean", "r21", "Metallic mean", "(x+sqrt(x^2+4))/2",
                  lambda p: (lambda x: (x + np.hypot(x, 2.0)) / 2.0), gamma_text="1/2", gamma_rule=_const(0.5)),
    ActivationRow("arctan", "r22", "Arc tangent", "arctan(x)", lambda p: np.arctan, gamma_text="1",
                  gamma_rule=_const(1.0)),
    ActivationRow("softsign", "r23", "Softsign", "x/(1+|x|)", lambda p: (lambda x: x / (1.0 + np.abs(x))),
                  gamma_text="1", gamma_rule=_const(1.0)),
    ActivationRow("isru", "r24", "Inverse square root unit", "x/sqrt(1+(1+lam)x^2)",
                  lambda p: (lambda x: x / np.sqrt(1.0 + (1.0 + p["lam"]) * x * x)), {"lam": 0.5},
                  gamma_text="(1+sqrt(1+lam))/(2 sqrt(1+lam))",
                  gamma_rule=lambda p: ((1.0 + math.sqrt(1.0 + p["lam"])) / (2.0 * math.sqrt(1.0 + p["lam"])),
                                        p["lam"] > -1.0)),
    ActivationRow("isrlu", "r25", "Inverse square root linear unit", "x/sqrt(1+lam x^2) if x<0 else x",
                  lambda p: (lambda x: np.where(x < 0, x / np.sqrt(1.0 + p["lam"] * x * x), x)), {"lam": 1.0},
                  gamma_text="1", gamma_rule=_const(1.0)),
    ActivationRow("square_nonlinearity", "r25", "Square nonlinearity", "piecewise quadratic saturating at +-1",
                  _build_square_nl, gamma_text="1", gamma_rule=_const(1.0)),
    ActivationRow("bent_identity", "r26", "Bent identity", "2/3*lam*(x+(sqrt(1+x^2)-1)/2)",
                  lambda p: (lambda x: 2.0 / 3.0 * p["lam"] * (x + (np.sqrt(1.0 + x * x) - 1.0) / 2.0)), {"lam": 0.5},
                  gamma_text="lam", gamma_rule=lambda p: (p["lam"], True)),
    ActivationRow("soft_exponential", "r27", "Soft exponential", "piecewise in the sign of lam", _build_softexp,
                  {"lam": 0.0}, gamma_text="1", gamma_rule=_const(1.0)),
    ActivationRow("soft_clipping", "r28", "Soft clipping", "log((1+exp(lam x))/(1+exp(lam(x-1))))/lam",
                  _build_soft_clip, {"lam": 1.0}, note="table leaves gamma blank"),
    ActivationRow("softsign_vector", "r28~", "Vector softsign", "x/(1+|x|)", _build_vector_softsign, arity=VECTOR,
                  gamma_text="1 (as softsign)", gamma_rule=_const(1.0)),
    ActivationRow("sinusoid", "r29", "Sinusoid", "sin(x)", lambda p: np.sin, gamma_text="1", gamma_rule=_const(1.0)),
    ActivationRow("sinc", "r29", "Sinc", "sin(x)/x, 1 at 0", lambda p: (lambda x: np.sinc(np.asarray(x) / math.pi)),
                  gamma_text="1", gamma_rule=_const(1.0)),
    ActivationRow("piecewise_linear", "r30", "Piecewise linear", "clip(x+1/2, 0, 1)", _build_piecewise,
                  gamma_text="1", gamma_rule=_const(1.0)),
    ActivationRow("sinlu", "r32", "Sinu-sigmoidal linear unit", "(x+lam*sin(alpha x))*sigmoid(x)",
                  lambda p: (lambda x: (x + p["lam"] * np.sin(p["alpha"] * x)) * expit(x)), {"lam": 1.0, "alpha": 1.0}),
    ActivationRow("cloglog", "r33", "Complementary log-log", "1-exp(-exp(x))",
                  lambda p: (lambda x: -np.expm1(-np.exp(x))), gamma_text="3/4", gamma_rule=_const(0.75)),
    ActivationRow("bipolar_sigmoid", "r34", "Bipolar sigmoid", "(1-exp(-x))/(1+exp(-x))",
                  lambda p: (lambda x: np.tanh(np.asarray(x) / 2.0)), gamma_text="3/4 (as tanh, Lipschitz 1/2)",
                  gamma_rule=_const(0.75), provenance="derived_formula"),
    ActivationRow("hard_tanh", "r35", "Hard tanh", "max(-1, min(1, x))", lambda p: (lambda x: np.clip(x, -1.0, 1.0)),
                  gamma_text="1", gamma_rule=_const(1.0)),
    ActivationRow("absolute", "r36", "Absolute value", "|x|", lambda p: np.abs, gamma_text="1", gamma_rule=_const(1.0)),
    ActivationRow("logit", "r36", "Logit", "log(x/(1-x))/10 on [1/4, 3/4]", _build_logit, gamma_text="3/4",
                  gamma_rule=_const(0.75), note="inputs clamped to [1/4, 3/4]"),
    ActivationRow("probit_softsign", "r37", "Softsign (probit)", "softsign(Phi^{-1}(x))", _build_probit_softsign,
                  gamma_text="9/10", gamma_rule=_const(0.9), note="inputs clamped to (0, 1)"),
    ActivationRow("linear_gaussian", "r38", "Linear Gaussian", "x*exp(-x^2)",
                  lambda p: (lambda x: x * np.exp(-np.asarray(x) ** 2)), gamma_text="(2+sqrt(e))/4",
                  gamma_rule=_const((2.0 + _SQRT_E) / 4.0)),
    ActivationRow("attention", "r39", "Attention-based", "softmax o r0", _build_attention, {"lam": 1.0, "r0": None},
                  arity=VECTOR, gamma_text="composition of softmax and r0", gamma_rule=_attention_rule([]),
                  provenance="derived_formula"),
    ActivationRow("attention_lingauss", "r40", "Attention-based", "r38 o softmax o r0", _build_attention_lingauss,
                  {"lam": 1.0, "r0": None}, arity=VECTOR, gamma_text="composition of r38, softmax and r0",
                  gamma_rule=_attention_rule([(2.0 + _SQRT_E) / 4.0]), provenance="derived_formula"),
]

CATALOG = {row.name: row for row in ROWS}


def catalog():
    """Machine-readable description of every catalog row."""
    return [row.catalog_entry() for row in ROWS]


def kinds():
    return list(CATALOG)


# ----------------------------------------------------------------------------
# activation construction
# ----------------------------------------------------------------------------


@dataclass
class ActivationSpec:
    """A catalog row instantiated with concrete parameters.

    ``certificate`` is ``None`` when neither the closed form nor a sampled
    estimate yields a valid certificate; ``table_gamma`` keeps the table's
    claim (if in regime) regardless of whether sampling confirmed it.
    """

    kind: str
    params: dict
    fn: Callable
    arity: str
    certificate: Optional[GammaCertificate]
    table_gamma: Optional[float] = None
    in_regime: bool = False
    discrepancy: str = ""
    lipschitz_estimate: Optional[float] = None

    def __call__(self, x):
        return np.asarray(self.fn(np.asarray(x, dtype=float)), dtype=float)

    @property
    def certified(self):
        return self.certificate is not None

    @property
    def gamma(self):
        if self.certificate is None:
            raise NotCertifiableError(f"activation {self.kind} has no averagedness certificate",
                                      lipschitz=self.lipschitz_estimate)
        return self.certificate.gamma

    def operator(self, dim=None):
        """The activation as an :class:`AveragedOperator` on R^dim."""
        self.gamma
        dim_out = 1 if self.arity == REDUCE else dim
        return AveragedOperator(self.fn, self.certificate, label=self.kind, dim_in=dim,
                                dim_out=dim_out, vectorized=True)

    def to_dict(self):
        return {
            "kind": self.kind,
            "params": {k: _jsonable_param(v) for k, v in self.params.items()},
            "arity": self.arity,
            "table_gamma": self.table_gamma,
            "in_regime": self.in_regime,
            "certificate": None if self.certificate is None else self.certificate.to_dict(),
            "discrepancy": self.discrepancy,
        }


def check_dim(row, gamma=None):
    """Dimension on which a row is certified.

    Elementwise maps are separable, so the scalar case decides averagedness.
    Reductions only define an endomorphism at dimension one; with gamma = 1
    the inequality is plain nonexpansiveness and is checked on R^4.
    """
    if row.arity == ELEMENTWISE:
        return 1
    if row.arity == REDUCE:
        return 4 if gamma == 1.0 else 1
    return 4


def _validate_params(row, params):
    unknown = set(params) - set(row.defaults) - {"dim"}
    if unknown:
        raise ValueError(f"unknown parameters for {row.name}: {sorted(unknown)}")
    merged = dict(row.defaults)
    merged.update({k: v for k, v in params.items() if k != "dim"})
    for key, value in merged.items():
        if key == "r0":
            if value is not None and not isinstance(value, AveragedOperator):
                raise TypeError("r0 must be an AveragedOperator")
            continue
        arr = np.asarray(value, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {key} of {row.name} must be finite")
    if row.name in ("softplus_scaled",) and merged["lam"] <= 0:
        raise ValueError("softplus_scaled needs lam > 0")
    if row.name == "approx_heaviside" and merged["eps"] <= 0:
        raise ValueError("approx_heaviside needs eps > 0")
    if row.name == "soft_clipping" and merged["lam"] == 0:
        raise ValueError("soft_clipping needs lam != 0")
    if row.name == "inverse_multiquadratic" and merged["lam"] <= -1:
        raise ValueError("inverse_multiquadratic needs lam > -1")
    if row.name == "isru" and merged["lam"] <= -1:
        raise ValueError("isru needs lam > -1")
    return merged


def make_activation(kind, *, dim=None, verify=True, pairs=DEFAULT_PAIRS, seed=DEFAULT_SEED, **params):
    """Instantiate a catalog row.

    Parameters
    ----------
    kind : str
        Row name, see :func:`kinds`.
    dim : int, optional
        Dimension used to certify vector rows (defaults to 4).
    verify : bool
        Sample-check the closed-form constant before accepting it.
    **params
        Row parameters overriding the defaults.
    """
    try:
        row = CATALOG[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; valid kinds: {', '.join(CATALOG)}") from None
    merged = _validate_params(row, params)
    key = _cache_key(kind, merged, dim, verify, pairs, seed)
    if key is not None:
        return _make_cached(key)
    return _make(row, merged, dim, verify, pairs, seed)


def _cache_key(kind, merged, dim, verify, pairs, seed):
    items = []
    for k, v in sorted(merged.items()):
        if isinstance(v, AveragedOperator):
            return None
        items.append((k, None if v is None else tuple(np.atleast_1d(np.asarray(v, float)).tolist())))
    return (kind, tuple(items), dim, verify, pairs, seed)


@lru_cache(maxsize=512)
def _make_cached(key):
    kind, items, dim, verify, pairs, seed = key
    merged = {}
    for k, v in items:
        if v is None:
            merged[k] = None
        elif len(v) == 1 and np.ndim(CATALOG[kind].defaults.get(k, 0.0)) == 0:
            merged[k] = v[0]
        else:
            merged[k] = np.array(v)
    return _make(CATALOG[kind], merged, dim, verify, pairs, seed)


def _make(row, merged, dim, verify, pairs, seed):
    rule_params = dict(merged)
    if dim is not None:
        rule_params["dim"] = dim
    fn = row.build(merged)
    claimed, in_regime = row.claimed_gamma(rule_params)
    n = dim if (dim is not None and row.arity == VECTOR) else check_dim(row, claimed)
    probe = AveragedOperator(fn, GammaCertificate(1.0), label=row.name, dim_in=n, vectorized=True)
    spec = ActivationSpec(row.name, merged, fn, row.arity, None, table_gamma=claimed, in_regime=in_regime)

    if claimed is not None:
        if not verify:
            spec.certificate = GammaCertificate(claimed, row.provenance)
            return spec
        report = check_averaged(probe, claimed, sample_pairs(n, pairs, DEFAULT_BOX, seed), tol=DEFAULT_TOL)
        if report.passed:
            spec.certificate = GammaCertificate(claimed, row.provenance, samples=report.samples,
                                                max_violation=report.worst_violation)
            return spec
        spec.discrepancy = (
            f"closed-form gamma {claimed:.6g} fails the sampled check "
            f"(worst violation {report.worst_violation:.3g}); using a numeric estimate"
        )
        logger.warning("%s: %s", row.name, spec.discrepancy)
    elif row.gamma_rule is not None:
        spec.discrepancy = "parameters outside the closed-form regime; using a numeric estimate"

    try:
        spec.certificate = estimate_gamma(probe, box=DEFAULT_BOX, samples=pairs, rng_seed=seed, dim=n)
        spec.lipschitz_estimate = spec.certificate.lipschitz
    except NotCertifiableError as exc:
        spec.lipschitz_estimate = exc.lipschitz
        msg = f"not certifiable on the sample (Lipschitz estimate {exc.lipschitz:.6g})"
        spec.discrepancy = f"{spec.discrepancy}; {msg}" if spec.discrepancy else msg
        logger.warning("%s: %s", row.name, msg)
    return spec


def verify_row(kind, pairs=DEFAULT_PAIRS, seed=DEFAULT_SEED, tol=DEFAULT_TOL, gamma=None, **params):
    """Check a row at its claimed gamma (or at ``gamma``) on sampled pairs.

    Returns the :class:`~nashnet.operators.AveragedReport`, or ``None`` when the
    row has no in-regime closed form and no override was given.
    """
    row = CATALOG[kind]
    merged = _validate_params(row, params)
    claimed, _ = row.claimed_gamma(merged)
    target = claimed if gamma is None else float(gamma)
    if target is None:
        return None
    n = check_dim(row, target)
    op = AveragedOperator(row.build(merged), GammaCertificate(1.0, row.provenance), label=kind, dim_in=n,
                          vectorized=True)
    report = check_averaged(op, target, sample_pairs(n, pairs, DEFAULT_BOX, seed), tol=tol, label=kind)
    report.provenance = row.provenance if gamma is None else "override"
    return report
