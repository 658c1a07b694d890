"""Layerwise training as a game: per-layer variational inequalities and dual descent.

Layer ``l`` with parameters ``theta = (W, b)`` sees inputs ``x_t`` and
targets ``y_t``.  The affine lift ``A_t theta = W x_t + b`` turns the layer
into ``r(A_t theta)`` and the training condition into the variational
inequality with operator::

    F(theta) = sum_t omega_t A_t^T [r(A_t theta) - y_t]

For activations that are proximal maps, ``F`` is the gradient of the dual
objective ``sum_t omega_t [g(A_t theta) - <A_t theta, y_t>]`` where
``g' = r``; the update below is a gradient step with the safe step size
``gamma / (2 |A_t|^2)``.
"""

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._validation import as_matrix, as_vector
from .activations import ELEMENTWISE, ActivationSpec, make_activation
from .prox import conjugate, potential_for
from .serialization import to_csv

logger = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.5
DEFAULT_TOL = 1e-8
DEFAULT_MAX_STEPS = 100_000


class UnavailableError(ValueError):
    """The requested quantity needs a closed-form potential the activation lacks."""


@dataclass
class AffineLift:
    """``(W, b) -> W x + b`` for a fixed input ``x`` and its adjoint."""

    x: np.ndarray

    def __post_init__(self):
        self.x = as_vector(self.x, "x")

    @property
    def norm(self):
        """Exact operator norm ``sqrt(|x|^2 + 1)``."""
        return math.sqrt(float(self.x @ self.x) + 1.0)

    def __call__(self, W, b):
        return W @ self.x + b

    def adjoint(self, z):
        z = np.asarray(z, dtype=float)
        return np.outer(z, self.x), z.copy()


def _act(spec):
    return make_activation(spec) if isinstance(spec, str) else spec


def teacher_forward(theta, activations, x):
    """Layer outputs of a parameter list ``[(W_1, b_1), ...]`` at input ``x``."""
    y = as_vector(x, "x")
    outs = []
    for (W, b), act in zip(theta, activations):
        y = np.asarray(act.fn(W @ y + b), dtype=float).reshape(-1)
        outs.append(y)
    return outs


@dataclass
class TrainingProblem:
    """Dataset, per-layer weights and architecture of a layerwise training problem.

    Parameters
    ----------
    X : array of shape (T, n_0)
        Inputs ``x_t``.
    y_L : array of shape (T, n_L)
        Final-layer targets.
    activations : list
        Catalog names or ActivationSpec per layer.
    y_layers : list of arrays, optional
        Explicit targets for every layer, ``y_layers[l]`` of shape (T, n_l).
    teacher : list of (W, b), optional
        Generates per-layer targets when ``y_layers`` is absent.
    omega : array of shape (L, T), optional
        Positive weights summing to one over ``t``; uniform when omitted.
    input_mode : {"forward", "targets"}
        Layer inputs come from the student's own upstream forward pass or
        from the previous layer's targets.
    """

    X: np.ndarray
    y_L: np.ndarray
    activations: Sequence
    y_layers: Optional[list] = None
    teacher: Optional[list] = None
    omega: Optional[np.ndarray] = None
    input_mode: str = "forward"
    target_source: str = field(default="", init=False)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y_L = np.atleast_2d(np.asarray(self.y_L, dtype=float))
        if self.X.shape[0] != self.y_L.shape[0]:
            raise ValueError("X and y_L need the same number of samples")
        if self.X.shape[0] < 1:
            raise ValueError("need at least one sample")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y_L))):
            raise ValueError("data must be finite")
        self.activations = [_act(a) for a in self.activations]
        if not self.activations:
            raise ValueError("need at least one layer")
        if self.input_mode not in ("forward", "targets"):
            raise ValueError("input_mode must be 'forward' or 'targets'")
        if self.teacher is not None:
            self.teacher = [(as_matrix(W, "W"), as_vector(b, "b")) for W, b in self.teacher]
            if len(self.teacher) != self.depth:
                raise ValueError("teacher depth differs from the number of activations")
        if self.y_layers is not None:
            self.y_layers = [np.atleast_2d(np.asarray(y, dtype=float)) for y in self.y_layers]
            if len(self.y_layers) != self.depth:
                raise ValueError("y_layers needs one target array per layer")
        if self.omega is None:
            logger.info("omega not given; using uniform weights 1/T")
            self.omega = np.full((self.depth, self.T), 1.0 / self.T)
        else:
            self.omega = np.atleast_2d(np.asarray(self.omega, dtype=float))
            if self.omega.shape == (1, self.T) and self.depth > 1:
                self.omega = np.repeat(self.omega, self.depth, axis=0)
            if self.omega.shape != (self.depth, self.T):
                raise ValueError(f"omega must have shape {(self.depth, self.T)}")
            if np.any(self.omega <= 0) or np.any(np.abs(self.omega.sum(axis=1) - 1.0) > 1e-12):
                raise ValueError("omega must be positive and sum to 1 over t for every layer")
        self._targets = None

    @property
    def T(self):
        return self.X.shape[0]

    @property
    def depth(self):
        return len(self.activations)

    @classmethod
    def from_teacher(cls, teacher, activations, X, **kwargs):
        """Problem whose final targets are produced by ``teacher`` on ``X``."""
        acts = [_act(a) for a in activations]
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y_L = np.stack([teacher_forward(teacher, acts, x)[-1] for x in X])
        return cls(X, y_L, acts, teacher=teacher, **kwargs)

    def targets(self):
        if self._targets is None:
            self._targets = layer_targets(self)
        return self._targets

    def dims(self):
        tg = self.targets()
        return [self.X.shape[1]] + [y.shape[1] for y in tg]

    def layer_inputs(self, theta, layer):
        """Inputs ``x_{l-1,t}`` for layer ``layer`` (0-based) as a (T, n) array."""
        if layer == 0:
            return self.X
        if self.input_mode == "targets":
            return self.targets()[layer - 1]
        Y = self.X
        for (W, b), act in zip(theta[:layer], self.activations[:layer]):
            Y = np.asarray(act.fn(Y @ W.T + b), dtype=float).reshape(Y.shape[0], -1)
        return Y

    def predict(self, theta, X=None):
        X = self.X if X is None else np.atleast_2d(np.asarray(X, dtype=float))
        Y = X
        for (W, b), act in zip(theta, self.activations):
            Y = np.asarray(act.fn(Y @ W.T + b), dtype=float).reshape(Y.shape[0], -1)
        return Y

    def zero_theta(self):
        d = self.dims()
        return [(np.zeros((d[l + 1], d[l])), np.zeros(d[l + 1])) for l in range(self.depth)]

    def random_theta(self, seed=0, scale=0.1):
        rng = np.random.default_rng(seed)
        d = self.dims()
        return [(scale * rng.standard_normal((d[l + 1], d[l])), scale * rng.standard_normal(d[l + 1]))
                for l in range(self.depth)]


def layer_targets(problem):
    """Per-layer targets ``y_{l,t}``; records where they came from.

    Explicit ``y_layers`` pass through unchanged, otherwise the teacher's
    layer outputs are used.  Final-layer data alone does not determine the
    hidden targets and is rejected.
    """
    if problem.y_layers is not None:
        problem.target_source = "given"
        return [y.copy() for y in problem.y_layers]
    if problem.teacher is not None:
        outs = [teacher_forward(problem.teacher, problem.activations, x) for x in problem.X]
        problem.target_source = "teacher"
        return [np.stack([o[l] for o in outs]) for l in range(problem.depth)]
    if problem.depth == 1:
        problem.target_source = "given"
        return [problem.y_L.copy()]
    raise ValueError(
        "only final-layer targets are available; hidden-layer targets need either "
        "explicit y_layers or a teacher network"
    )


def _layer_terms(problem, theta, layer, W=None, b=None, inputs=None):
    """Residuals ``r(A_t theta) - y_t`` and inputs for one layer."""
    if W is None:
        W, b = theta[layer]
    Xin = problem.layer_inputs(theta, layer) if inputs is None else inputs
    act = problem.activations[layer]
    Y = problem.targets()[layer]
    Z = Xin @ W.T + b
    R = np.asarray(act.fn(Z), dtype=float).reshape(Z.shape[0], -1) - Y
    return Xin, Z, R


def vi_operator(problem, theta, layer, inputs=None):
    """``sum_t omega_t A_t^T [r(A_t theta) - y_t]`` as a (grad_W, grad_b) pair."""
    Xin, _, R = _layer_terms(problem, theta, layer, inputs=inputs)
    w = problem.omega[layer]
    return (w[:, None] * R).T @ Xin, w @ R


def vi_residual(problem, theta, layer, inputs=None):
    """Norm of the layer's variational-inequality operator at ``theta``.

    ``theta`` holds one ``(W, b)`` per layer.  For the per-sample form pass
    ``theta[layer]`` as a list of ``(W_t, b_t)``; the operator then lives on
    the product space and has components ``omega_t A_t^T [r(A_t theta_t) - y_t]``.
    """
    if _is_per_sample(theta[layer]):
        comps = per_sample_vi_components(problem, theta, layer, inputs=inputs)
        return float(math.sqrt(sum(float(np.sum(gW * gW) + np.sum(gb * gb)) for gW, gb in comps)))
    gW, gb = vi_operator(problem, theta, layer, inputs=inputs)
    return float(math.sqrt(float(np.sum(gW * gW) + np.sum(gb * gb))))


def _is_per_sample(params):
    return isinstance(params, list)


def per_sample_vi_components(problem, theta, layer, inputs=None):
    Xin = problem.layer_inputs(_shared_view(problem, theta), layer) if inputs is None else inputs
    act = problem.activations[layer]
    Y = problem.targets()[layer]
    out = []
    for t, (W, b) in enumerate(theta[layer]):
        r = np.asarray(act.fn(W @ Xin[t] + b), dtype=float).reshape(-1) - Y[t]
        w = problem.omega[layer, t]
        out.append((w * np.outer(r, Xin[t]), w * r))
    return out


def _shared_view(problem, theta):
    # the per-sample form has no single upstream model; inputs then come from targets
    if problem.input_mode != "targets" and any(_is_per_sample(p) for p in theta):
        raise ValueError("per-sample parameters need input_mode='targets'")
    return theta


def vi_directional_check(problem, theta_star, layer, n_dirs=1000, seed=0):
    """Smallest sampled ``sum_t omega_t <r(A_t theta*) - y_t, A_t d>`` over unit directions ``d``.

    The variational inequality asks for this to be nonnegative for every
    ``d = theta - theta*``.  The value is formed in the data space through
    the lift, not through the adjoint, so it also exercises the adjoint
    identity.  Returns ``(min_value, max_abs_value)``.
    """
    rng = np.random.default_rng(seed)
    Xin, _, R = _layer_terms(problem, theta_star, layer)
    W, b = theta_star[layer]
    w = problem.omega[layer]
    vals = np.empty(n_dirs)
    for k in range(n_dirs):
        dW = rng.standard_normal(W.shape)
        db = rng.standard_normal(b.shape)
        scale = math.sqrt(float(np.sum(dW * dW) + db @ db))
        dZ = (Xin @ dW.T + db) / scale
        vals[k] = math.fsum(w * np.sum(R * dZ, axis=1))
    return float(np.min(vals)), float(np.max(np.abs(vals)))


def fit_loss(problem, theta, layer):
    _, _, R = _layer_terms(problem, theta, layer)
    return 0.5 * float(problem.omega[layer] @ np.sum(R * R, axis=1))


@dataclass
class TrainState:
    """Parameters plus the history of a training run.

    ``objective`` is the summed per-layer weighted fit loss and
    ``grad_norm`` the root-sum-square of per-layer VI residuals, both
    recorded once initially and after every step.
    """

    theta: list
    step: int = 0
    objective: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    layer_residuals: list = field(default_factory=list)

    @classmethod
    def initial(cls, problem, theta=None):
        theta = problem.zero_theta() if theta is None else _copy_theta(theta)
        state = cls(theta)
        state._record(problem)
        return state

    def _record(self, problem):
        res = [vi_residual(problem, self.theta, l) for l in range(problem.depth)]
        loss = math.fsum(_fit_loss_any(problem, self.theta, l) for l in range(problem.depth))
        self.objective.append(loss)
        self.grad_norm.append(math.sqrt(math.fsum(r * r for r in res)))
        self.layer_residuals.append(res)

    def copy(self):
        return TrainState(_copy_theta(self.theta), self.step, list(self.objective), list(self.grad_norm),
                          [list(r) for r in self.layer_residuals])

    def history_csv(self):
        rows = [[p, o, g] for p, (o, g) in enumerate(zip(self.objective, self.grad_norm))]
        return to_csv(["step", "objective", "grad_norm"], rows)


def _fit_loss_any(problem, theta, layer):
    if _is_per_sample(theta[layer]):
        Xin = problem.targets()[layer - 1] if layer else problem.X
        act = problem.activations[layer]
        Y = problem.targets()[layer]
        tot = []
        for t, (W, b) in enumerate(theta[layer]):
            r = np.asarray(act.fn(W @ Xin[t] + b), dtype=float).reshape(-1) - Y[t]
            tot.append(problem.omega[layer, t] * 0.5 * float(r @ r))
        return math.fsum(tot)
    return fit_loss(problem, theta, layer)


def _copy_theta(theta):
    return copy.deepcopy([[(W.copy(), b.copy()) for W, b in p] if _is_per_sample(p) else (p[0].copy(), p[1].copy())
                          for p in theta])


def _check_gamma_open(gamma):
    if not (0.0 < gamma < 1.0):
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")


def layer_update(problem, theta, layer, gamma):
    """Update ``-sum_t omega_t gamma/(2|A_t|^2) A_t^T [r(A_t theta) - y_t]`` for a shared theta."""
    Xin, _, R = _layer_terms(problem, theta, layer)
    norms2 = np.sum(Xin * Xin, axis=1) + 1.0
    if np.any(norms2 <= 0):
        raise ValueError("the affine lift must be nonzero")
    c = problem.omega[layer] * gamma / (2.0 * norms2)
    return -((c[:, None] * R).T @ Xin), -(c @ R)


def _per_sample_update(problem, params, layer, gamma):
    """In-place update of per-sample parameters; returns whether any entry changed."""
    Xin = problem.targets()[layer - 1] if layer else problem.X
    act = problem.activations[layer]
    Y = problem.targets()[layer]
    changed = False
    for t, (W, b) in enumerate(params):
        lift = AffineLift(Xin[t])
        r = np.asarray(act.fn(lift(W, b)), dtype=float).reshape(-1) - Y[t]
        c = gamma / (2.0 * lift.norm ** 2)
        dW, db = lift.adjoint(r)
        params[t] = (W - c * dW, b - c * db)
        changed = changed or _changed(params[t], (W, b))
    return changed


def _changed(new, old):
    return not (np.array_equal(new[0], old[0]) and np.array_equal(new[1], old[1]))


def gd_step(state, problem, layer, gamma=DEFAULT_GAMMA):
    """One gradient step on ``layer``; returns a new TrainState."""
    _check_gamma_open(gamma)
    new = state.copy()
    params = new.theta[layer]
    if _is_per_sample(params):
        _per_sample_update(problem, params, layer, gamma)
    else:
        dW, db = layer_update(problem, new.theta, layer, gamma)
        W, b = params
        new.theta[layer] = (W + dW, b + db)
    new.step += 1
    new._record(problem)
    return new


@dataclass
class TrainReport:
    converged: bool
    stop_reason: str
    epochs: int
    layer_residuals: list
    fit_residual: list
    exact_fit: bool
    output_error: float
    residual_curves: list

    def to_dict(self):
        return {
            "converged": self.converged,
            "stop_reason": self.stop_reason,
            "epochs": self.epochs,
            "layer_residuals": self.layer_residuals,
            "fit_residual": self.fit_residual,
            "exact_fit": self.exact_fit,
            "output_error": self.output_error,
            "residual_curves": self.residual_curves,
        }


def train(problem, gamma=DEFAULT_GAMMA, tol=DEFAULT_TOL, max_steps=DEFAULT_MAX_STEPS, theta=None,
          mode="shared", fit_tol=1e-6, record_every=1):
    """Sweep the layers in order until every VI residual is below ``tol``.

    ``max_steps`` counts epochs (one step per layer each).  The run also
    stops when a full epoch leaves every parameter bit-for-bit unchanged;
    all later epochs would repeat it, so stopping there loses nothing.

    Returns
    -------
    (TrainState, TrainReport)
    """
    _check_gamma_open(gamma)
    if mode not in ("shared", "per_sample"):
        raise ValueError("mode must be 'shared' or 'per_sample'")
    if mode == "per_sample" and problem.input_mode != "targets":
        raise ValueError("per-sample training needs input_mode='targets'")
    if theta is None:
        theta = problem.zero_theta()
    if mode == "per_sample":
        theta = [p if _is_per_sample(p) else [(p[0].copy(), p[1].copy()) for _ in range(problem.T)]
                 for p in theta]
    state = _FastState(problem, theta)
    curves = [[r] for r in state.residuals()]
    stop = "max_steps"
    epochs = 0
    if max(state.residuals()) <= tol:
        stop = "residual_tol"
    else:
        for epoch in range(1, max_steps + 1):
            changed = False
            for l in range(problem.depth):
                changed = state.step_layer(l, gamma) or changed
            epochs = epoch
            res = state.residuals()
            if epoch % record_every == 0:
                for l, r in enumerate(res):
                    curves[l].append(r)
            if max(res) <= tol:
                stop = "residual_tol"
                break
            if not changed:
                stop = "stationary"
                break
    final = TrainState.initial(problem, state.theta)
    final.step = epochs * problem.depth
    fit = [math.sqrt(2.0 * _fit_loss_any(problem, final.theta, l)) for l in range(problem.depth)]
    out_err = float(np.max(np.abs(_predict_any(problem, final.theta) - problem.y_L))) if mode == "shared" else fit[-1]
    report = TrainReport(
        converged=stop == "residual_tol",
        stop_reason=stop,
        epochs=epochs,
        layer_residuals=final.layer_residuals[-1],
        fit_residual=fit,
        exact_fit=bool(max(fit) <= fit_tol),
        output_error=out_err,
        residual_curves=curves,
    )
    return final, report


def _predict_any(problem, theta):
    return problem.predict(theta)


class _FastState:
    """Parameter holder used inside :func:`train`; skips the per-step history."""

    def __init__(self, problem, theta):
        self.problem = problem
        self.theta = _copy_theta(theta)

    def residuals(self):
        return [vi_residual(self.problem, self.theta, l) for l in range(self.problem.depth)]

    def step_layer(self, layer, gamma):
        params = self.theta[layer]
        if _is_per_sample(params):
            return _per_sample_update(self.problem, params, layer, gamma)
        dW, db = layer_update(self.problem, self.theta, layer, gamma)
        W, b = params
        self.theta[layer] = (W + dW, b + db)
        return _changed(self.theta[layer], params)


def dual_objective(theta, problem, layer):
    """``sum_t omega_t [g(A_t theta) - <A_t theta, y_t>]`` with ``g`` the numeric conjugate.

    Only available for activations with a closed-form potential; ``g`` acts
    coordinatewise.
    """
    act = problem.activations[layer]
    if act.arity != ELEMENTWISE:
        raise UnavailableError(f"dual objective needs an elementwise activation, got {act.kind}")
    try:
        pot = potential_for(act.kind)
    except ValueError as exc:
        raise UnavailableError(str(exc)) from None
    W, b = theta[layer]
    Xin = problem.layer_inputs(theta, layer)
    Z = Xin @ W.T + b
    Y = problem.targets()[layer]
    G = np.asarray(conjugate(pot, Z.reshape(-1))).reshape(Z.shape)
    per_t = np.sum(G, axis=1) - np.sum(Z * Y, axis=1)
    return math.fsum(problem.omega[layer] * per_t)


def dual_gradient_check(problem, theta, layer, h=1e-5):
    """Central finite differences of :func:`dual_objective` against the VI operator.

    The layer inputs are frozen at ``theta`` so only ``theta[layer]`` varies.
    Returns ``(max_abs_error, fd_grad, analytic_grad)`` with gradients
    flattened as ``[W.ravel(), b]``.
    """
    W, b = theta[layer]
    Xin = problem.layer_inputs(theta, layer)
    frozen = _FrozenInputs(problem, layer, Xin)
    flat = np.concatenate([W.ravel(), b])
    fd = np.empty_like(flat)
    for k in range(flat.size):
        e = np.zeros_like(flat)
        e[k] = h
        fd[k] = (frozen.objective(flat + e, W.shape) - frozen.objective(flat - e, W.shape)) / (2.0 * h)
    gW, gb = vi_operator(problem, theta, layer, inputs=Xin)
    analytic = np.concatenate([gW.ravel(), gb])
    return float(np.max(np.abs(fd - analytic))), fd, analytic


class _FrozenInputs:
    def __init__(self, problem, layer, Xin):
        self.problem = problem
        self.layer = layer
        self.Xin = Xin
        act = problem.activations[layer]
        try:
            self.pot = potential_for(act.kind)
        except ValueError as exc:
            raise UnavailableError(str(exc)) from None

    def objective(self, flat, shape):
        W = flat[: shape[0] * shape[1]].reshape(shape)
        b = flat[shape[0] * shape[1]:]
        Z = self.Xin @ W.T + b
        Y = self.problem.targets()[self.layer]
        G = np.asarray(conjugate(self.pot, Z.reshape(-1))).reshape(Z.shape)
        per_t = np.sum(G, axis=1) - np.sum(Z * Y, axis=1)
        return math.fsum(self.problem.omega[self.layer] * per_t)
