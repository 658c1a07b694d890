"""Equilibrium checks for the layer game and cyclic projections onto convex sets.

In the layer game, player ``l`` picks its output ``y_l`` to minimize
``f_l(y_l) + |y_l - W_l x_{l-1} - b_l|^2 / 2``, whose unique minimizer is
``r_l(W_l x_{l-1} + b_l)`` when ``r_l = prox_{f_l}``.  A joint state is an
equilibrium exactly when every layer output equals its activation applied
to its affine input, the outputs of the last layer feeding the first.
"""

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._validation import as_matrix, as_vector
from .activations import ELEMENTWISE
from .network import DEFAULT_MAX_ITER, forward, km_iterate
from .operators import AveragedOperator, GammaCertificate, compose
from .prox import ACTIVATION_POTENTIALS, prox_eval
from .training import vi_directional_check, vi_residual  # noqa: F401  re-exported

DEVIATION_SCALES = (1e-3, 1e-1, 1.0)
DEFAULT_DEVIATIONS = 1000


@dataclass
class LayerGameState:
    """Candidate joint state ``(x*_1, ..., x*_L)`` of a network's layer game.

    ``layers`` is a network (anything with ``.layers``) or a list of layers,
    each callable as ``y -> r(W y + b)`` and exposing ``W``, ``b`` and
    ``activation``.  Block maps without that structure may be passed as
    plain callables; only the fixed-point form is then checked.
    """

    x_star: Sequence
    layers: Sequence

    def __post_init__(self):
        self.layers = list(getattr(self.layers, "layers", self.layers))
        self.x_star = [np.asarray(x, dtype=float).copy() for x in self.x_star]
        if len(self.x_star) != len(self.layers):
            raise ValueError(f"need one state per layer ({len(self.layers)}), got {len(self.x_star)}")

    @classmethod
    def from_point(cls, net, x):
        """State made of the layer outputs of ``net`` at ``x``."""
        return cls(forward(net, x), net)

    @classmethod
    def from_trace(cls, net, trace):
        return cls.from_point(net, trace.x_final)


def _layer_input(state, l, x0):
    if l == 0:
        return state.x_star[-1] if x0 is None else np.asarray(x0, dtype=float)
    return state.x_star[l - 1]


def _layer_objective(pot, z, Y):
    """``sum_i f(y_i) + |y - z|^2 / 2`` for each row of ``Y``."""
    Y = np.atleast_2d(Y)
    with np.errstate(invalid="ignore"):
        return np.sum(pot(Y), axis=1) + 0.5 * np.sum((Y - z) ** 2, axis=1)


@dataclass
class NashReport:
    per_layer_residual: list
    tol: float
    prox_residual: list = field(default_factory=list)
    deviation_samples: list = field(default_factory=list)
    best_improvement: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def is_equilibrium(self):
        return all(r <= self.tol for r in self.per_layer_residual)

    @property
    def deviation_ok(self):
        return all(b is None or b <= self.tol for b in self.best_improvement)

    @property
    def verdict(self):
        if not self.is_equilibrium:
            return "not_equilibrium"
        if not self.deviation_ok:
            return "deviation_found"
        return "equilibrium"

    def to_dict(self):
        return {
            "per_layer_residual": self.per_layer_residual,
            "prox_residual": self.prox_residual,
            "deviation_test": {
                "samples": self.deviation_samples,
                "best_improvement": self.best_improvement,
                "skipped_layers": self.skipped,
            },
            "tol": self.tol,
            "is_equilibrium": self.is_equilibrium,
            "verdict": self.verdict,
        }


def verify_nash(state, tol=1e-8, x0=None, deviations=DEFAULT_DEVIATIONS, seed=0):
    """Check that every layer plays its best response.

    Parameters
    ----------
    state : LayerGameState
    tol : float
        Bound on each residual ``|x*_l - r_l(W_l x*_{l-1} + b_l)|`` and on the
        objective improvement of any sampled deviation.
    x0 : array_like, optional
        Fixed input of the first layer.  By default the game is cyclic and
        the first layer reads the last layer's state.
    deviations : int
        Number of sampled unilateral deviations per layer with a known
        potential; scales cycle through 1e-3, 1e-1 and 1.

    Returns
    -------
    NashReport
        Layers whose activation has no closed-form potential are listed in
        ``skipped`` and only checked in fixed-point form.
    """
    report = NashReport([], tol)
    for l, lay in enumerate(state.layers):
        u = _layer_input(state, l, x0)
        xs = state.x_star[l]
        if not hasattr(lay, "W"):
            out = np.asarray(lay(u), dtype=float).reshape(xs.shape)
            report.per_layer_residual.append(float(np.linalg.norm(xs - out)))
            report.prox_residual.append(None)
            report.deviation_samples.append(0)
            report.best_improvement.append(None)
            report.skipped.append(l)
            continue
        if u.shape[-1] != lay.W.shape[1] or xs.shape[-1] != lay.dim_out:
            raise ValueError(f"layer {l + 1}: state dimensions do not match the layer")
        z = lay.W @ u + lay.b
        out = np.asarray(lay.activation.fn(z), dtype=float).reshape(-1)
        report.per_layer_residual.append(float(np.linalg.norm(xs - out)))
        pot = ACTIVATION_POTENTIALS.get(lay.activation.kind)
        if pot is None or lay.activation.arity != ELEMENTWISE:
            report.prox_residual.append(None)
            report.deviation_samples.append(0)
            report.best_improvement.append(None)
            report.skipped.append(l)
            continue
        best = np.asarray(prox_eval(pot, z)).reshape(-1)
        report.prox_residual.append(float(np.linalg.norm(xs - best)))
        rng = np.random.default_rng([seed, l])
        scales = np.array(DEVIATION_SCALES)[np.arange(deviations) % len(DEVIATION_SCALES)]
        Y = xs + scales[:, None] * rng.standard_normal((deviations, xs.size))
        j0 = float(_layer_objective(pot, z, xs)[0])
        js = _layer_objective(pot, z, Y)
        if not math.isfinite(j0):
            improvement = math.inf
        else:
            improvement = float(np.max(j0 - js)) if deviations else None
        report.deviation_samples.append(int(deviations))
        report.best_improvement.append(improvement)
    return report


def sweep(state, x0=None):
    """One Gauss-Seidel pass ``x_l <- r_l(W_l x_{l-1} + b_l)`` over the layers."""
    new = [x.copy() for x in state.x_star]
    tmp = LayerGameState(new, state.layers)
    for l, lay in enumerate(state.layers):
        u = _layer_input(tmp, l, x0)
        tmp.x_star[l] = np.asarray(lay(u), dtype=float).reshape(-1)
    return tmp


# ----------------------------------------------------------------------------
# convex sets and cyclic projections
# ----------------------------------------------------------------------------


@dataclass
class ConvexSet:
    """Closed convex set with an exact projector and a membership predicate.

    Kinds and parameters:

    * ``box``: ``lo``, ``hi``
    * ``ball``: ``center``, ``radius`` (radius 0 is a single point)
    * ``halfspace``: ``{x : <a, x> <= c}`` with ``a``, ``c``
    * ``affine_subspace``: ``{x : A x = c}`` with ``A``, ``c``
    """

    kind: str
    params: dict
    label: str = ""

    def __post_init__(self):
        self.params = p = dict(self.params)
        if self.kind == "box":
            p["lo"], p["hi"] = as_vector(p["lo"], "lo"), as_vector(p["hi"], "hi")
            if p["lo"].shape != p["hi"].shape or np.any(p["lo"] > p["hi"]):
                raise ValueError("box needs lo <= hi of equal length")
            self.dim = p["lo"].size
        elif self.kind == "ball":
            p["center"] = as_vector(p["center"], "center")
            p["radius"] = float(p["radius"])
            if p["radius"] < 0:
                raise ValueError("ball radius must be nonnegative")
            self.dim = p["center"].size
        elif self.kind == "halfspace":
            p["a"] = as_vector(p["a"], "a")
            p["c"] = float(p["c"])
            if not np.any(p["a"]):
                raise ValueError("halfspace normal must be nonzero")
            self.dim = p["a"].size
        elif self.kind == "affine_subspace":
            p["A"] = as_matrix(p["A"], "A")
            p["c"] = as_vector(p["c"], "c", dim=p["A"].shape[0])
            p["pinv"] = np.linalg.pinv(p["A"])
            if np.linalg.norm(p["A"] @ (p["pinv"] @ p["c"]) - p["c"]) > 1e-10 * max(1.0, np.linalg.norm(p["c"])):
                raise ValueError("affine subspace is empty (A x = c is inconsistent)")
            self.dim = p["A"].shape[1]
        else:
            raise ValueError(f"unknown convex set kind {self.kind!r}")
        self.label = self.label or self.kind

    @classmethod
    def box(cls, lo, hi, label=""):
        return cls("box", {"lo": lo, "hi": hi}, label)

    @classmethod
    def ball(cls, center, radius, label=""):
        return cls("ball", {"center": center, "radius": radius}, label)

    @classmethod
    def halfspace(cls, a, c, label=""):
        """``{x : <a, x> <= c}``; use ``-a, -c`` for a lower bound."""
        return cls("halfspace", {"a": a, "c": c}, label)

    @classmethod
    def affine_subspace(cls, A, c, label=""):
        return cls("affine_subspace", {"A": A, "c": c}, label)

    def project(self, x):
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "box":
            return np.clip(x, p["lo"], p["hi"])
        if self.kind == "ball":
            d = x - p["center"]
            n = float(np.linalg.norm(d))
            if n <= p["radius"]:
                return x.copy()
            return p["center"] + (p["radius"] / n) * d
        if self.kind == "halfspace":
            a = p["a"]
            excess = float(a @ x) - p["c"]
            if excess <= 0:
                return x.copy()
            return x - (excess / float(a @ a)) * a
        return x - p["pinv"] @ (p["A"] @ x - p["c"])

    def distance(self, x):
        """Distance to the set, computed from its defining inequalities."""
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "box":
            return float(np.linalg.norm(np.maximum(p["lo"] - x, 0) + np.maximum(x - p["hi"], 0)))
        if self.kind == "ball":
            return max(0.0, float(np.linalg.norm(x - p["center"])) - p["radius"])
        if self.kind == "halfspace":
            return max(0.0, (float(p["a"] @ x) - p["c"]) / float(np.linalg.norm(p["a"])))
        # residual of A x = c measured in the row space
        return float(np.linalg.norm(p["pinv"] @ (p["A"] @ x - p["c"])))

    def contains(self, x, tol=0.0):
        return self.distance(x) <= tol

    def operator(self):
        """The projector as a 1/2-averaged operator."""
        return AveragedOperator(self.project, GammaCertificate(0.5, "derived_formula"), label=self.label,
                                dim_in=self.dim, dim_out=self.dim)

    def to_dict(self):
        out = {"kind": self.kind, "label": self.label}
        out.update({k: v for k, v in self.params.items() if k != "pinv"})
        return out


def _cyclic_gap(sets, x0, iters=2000):
    op = compose([s.operator() for s in reversed(sets)])
    x = np.asarray(x0, dtype=float)
    for _ in range(iters):
        x = op(x)
    return max(s.distance(x) for s in sets), x


def check_common_point(sets, witness=None, tol=1e-9, x0=None):
    """Reject set families without a common point.

    With a witness the membership predicates decide; otherwise cyclic
    projections are run and a persistent gap is taken as evidence of an
    empty intersection.
    """
    if witness is not None:
        bad = [s.label for s in sets if not s.contains(witness, tol)]
        if bad:
            raise ValueError(f"witness is not in every set; outside {bad}")
        return np.asarray(witness, dtype=float)
    start = np.zeros(sets[0].dim) if x0 is None else x0
    gap, x = _cyclic_gap(sets, start)
    if gap > 1e-6:
        raise ValueError(f"the sets appear to have empty intersection (cyclic projection gap {gap:.3g})")
    return x


@dataclass
class PocsReport:
    final_point: np.ndarray
    distances: list
    membership: list
    pairwise_distinct: list
    gamma: float
    tol: float

    @property
    def passed(self):
        return all(self.membership)

    def to_dict(self):
        return {
            "final_point": self.final_point,
            "distances": self.distances,
            "membership": self.membership,
            "pairwise_distinct": self.pairwise_distinct,
            "gamma": self.gamma,
            "tol": self.tol,
            "passed": self.passed,
        }


def pocs_demo(sets, x0, tol=1e-8, max_iter=DEFAULT_MAX_ITER, schedule=1.0, witness=None, seed=0,
              probes=200):
    """Relaxed iteration of ``P_L o ... o P_1`` over three or more convex sets.

    Every projector is 1/2-averaged, so the composition is certified and its
    fixed points are the common points of the sets.  The report checks
    membership of the limit with each set's predicate and records, for
    every pair of sets, whether their projectors differ near the limit.

    Returns
    -------
    (IterationTrace, PocsReport)
    """
    sets = list(sets)
    if len(sets) < 3:
        raise ValueError("the construction needs at least three sets")
    dims = {s.dim for s in sets}
    if len(dims) != 1:
        raise ValueError("all sets must live in the same space")
    x0 = as_vector(x0, "x0", dim=dims.pop())
    check_common_point(sets, witness=witness, x0=x0)
    # compose applies the last operator first, so list P_L first
    op = compose([s.operator() for s in reversed(sets)], label="cyclic projections")
    trace = km_iterate(op, tol=tol, max_iter=max_iter, schedule=schedule, x0=x0)
    xf = trace.x_final
    dists = [s.distance(xf) for s in sets]
    rng = np.random.default_rng(seed)
    Z = xf + rng.standard_normal((probes, xf.size))
    distinct = []
    for i in range(len(sets)):
        row = []
        for j in range(len(sets)):
            if i == j:
                row.append(False)
                continue
            gaps = [np.linalg.norm(sets[i].project(z) - sets[j].project(z)) for z in Z]
            row.append(bool(max(gaps) > 1e-6))
        distinct.append(row)
    report = PocsReport(xf, dists, [d <= tol for d in dists], distinct, op.gamma, tol)
    trace.extra["membership"] = report.membership
    return trace, report


def projection_layers(sets):
    """The sets as players of the layer game: identity weights, zero biases, projector activations."""
    return [s.project for s in sets]
