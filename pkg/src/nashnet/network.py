"""Layered networks as averaged operators and their relaxed fixed-point iteration.

A network maps ``x`` through ``y_l = r_l(W_l y_{l-1} + b_l)`` with ``y_0 = x``;
when the last layer returns to the input space the whole map ``O`` is an
endomorphism and its fixed points are found by the relaxed iteration::

    x_{t+1} = x_t + lambda_t (O(x_t) - x_t)

Convergence is monitored on the residual ``|O(x_t) - x_t|``.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ._validation import as_matrix, as_vector, operator_norm
from .activations import REDUCE, VECTOR, ActivationSpec, make_activation
from .operators import (
    AveragedOperator,
    GammaCertificate,
    NotCertifiableError,
    composition_gamma,
    estimate_gamma,
    linear_gamma,
)
from .serialization import to_csv

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100_000

# residuals below this fraction of the iterate scale are dominated by rounding
RATE_NOISE_FLOOR = 1e-6

# size limit on iterates embedded in JSON exports
JSON_ITERATE_CAP = 10_000


class ScheduleError(ValueError):
    """A relaxation schedule leaves the admissible range."""

    def __init__(self, message, t=None, value=None):
        super().__init__(message)
        self.t = t
        self.value = value


@dataclass
class LayerSpec:
    """One affine-plus-activation layer ``y -> r(W y + b)``."""

    W: np.ndarray
    b: np.ndarray
    activation: ActivationSpec

    def __post_init__(self):
        self.W = as_matrix(self.W, "W")
        self.b = as_vector(self.b, "b", dim=self.W.shape[0])
        if isinstance(self.activation, str):
            self.activation = make_activation(self.activation, dim=self._act_dim(self.activation))

    def _act_dim(self, kind):
        from .activations import CATALOG

        return self.W.shape[0] if CATALOG[kind].arity == VECTOR else None

    @property
    def dim_in(self):
        return self.W.shape[1]

    @property
    def dim_out(self):
        return 1 if self.activation.arity == REDUCE else self.W.shape[0]

    def __call__(self, y):
        return np.asarray(self.activation.fn(self.W @ y + self.b), dtype=float).reshape(-1)

    def to_dict(self):
        return {"W": self.W, "b": self.b, "activation": self.activation.to_dict()}


def layer(W, b=None, activation="identity", **params):
    """Convenience constructor; ``activation`` is a catalog name or an ActivationSpec."""
    W = as_matrix(W, "W")
    if b is None:
        b = np.zeros(W.shape[0])
    if isinstance(activation, str):
        from .activations import CATALOG

        dim = W.shape[0] if activation in CATALOG and CATALOG[activation].arity == VECTOR else None
        activation = make_activation(activation, dim=dim, **params)
    return LayerSpec(W, b, activation)


def _normalize_schedule(schedule):
    if schedule is None or isinstance(schedule, (int, float, np.floating, np.integer)):
        return schedule if schedule is None else float(schedule)
    if callable(schedule):
        return schedule
    seq = np.asarray(schedule, dtype=float).reshape(-1)

    def from_seq(t):
        return float(seq[min(t, seq.size - 1)])

    return from_seq


@dataclass
class NetworkSpec:
    """Input point, layers and relaxation schedule of a network.

    ``lambda_schedule`` is ``None`` (use the default for the certified gamma),
    a constant, a callable ``t -> lambda_t`` or a sequence (last value
    repeated).
    """

    x0: np.ndarray
    layers: Sequence[LayerSpec]
    lambda_schedule: object = None
    label: str = "network"

    def __post_init__(self):
        self.layers = list(self.layers)
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        self.x0 = as_vector(self.x0, "x0", dim=self.layers[0].dim_in)
        for l, (prev, nxt) in enumerate(zip(self.layers[:-1], self.layers[1:]), start=2):
            if nxt.dim_in != prev.dim_out:
                raise ValueError(f"layer {l} expects input {nxt.dim_in}, layer {l - 1} outputs {prev.dim_out}")
        if self.layers[-1].dim_out != self.layers[0].dim_in:
            raise ValueError("the last layer must map back to the input space")
        self.lambda_schedule = _normalize_schedule(self.lambda_schedule)
        self._certificate = None

    @property
    def dim(self):
        return self.layers[0].dim_in

    @property
    def depth(self):
        return len(self.layers)

    def __call__(self, x):
        return forward(self, x)[-1]

    def batch(self, X):
        return np.stack([self(x) for x in np.asarray(X, dtype=float)])

    def weight_norms(self):
        return [operator_norm(layer.W) for layer in self.layers]

    @property
    def certificate(self):
        """End-to-end averagedness certificate, or ``None`` if none could be found."""
        if self._certificate is None:
            self._certificate = certify_network(self)
        return self._certificate or None

    def operator(self):
        cert = self.certificate
        if cert is None:
            raise NotCertifiableError(f"{self.label} has no averagedness certificate")
        return AveragedOperator(self.__call__, cert, label=self.label, dim_in=self.dim, dim_out=self.dim)

    def to_dict(self):
        return {
            "label": self.label,
            "x0": self.x0,
            "layers": [layer.to_dict() for layer in self.layers],
        }


def forward(net, x):
    """All layer outputs ``(y_1, ..., y_L)`` for input ``x``."""
    y = as_vector(x, "x", dim=net.dim)
    outs = []
    for layer in net.layers:
        y = layer(y)
        outs.append(y)
    return outs


def certify_network(net, samples=10_000, seed=None):
    """Averagedness certificate of the end-to-end network map.

    Tried in order of strength and the smallest valid gamma kept:

    * layerwise formula, when every weight is square: the affine part is
      gamma-averaged with the exact constant of its weight matrix and the
      layer composes it with its activation;
    * promotion of the Lipschitz bound ``prod_l |W_l|`` when it is below one
      (activations with a certificate are nonexpansive);
    * a sampled estimate on the default box as the last resort.

    Returns ``False`` when nothing certifies the map.
    """
    acts = [layer.activation for layer in net.layers]
    candidates = []
    if all(a.certified for a in acts):
        layer_gammas = []
        for layer in net.layers:
            if layer.W.shape[0] != layer.W.shape[1] or layer.activation.arity == REDUCE:
                layer_gammas = None
                break
            g_aff = linear_gamma(layer.W)
            if g_aff is None:
                layer_gammas = None
                break
            layer_gammas.append(composition_gamma([layer.activation.gamma, g_aff]))
        numeric = any(a.certificate.provenance == "numeric_estimate" for a in acts)
        samples_used = max((a.certificate.samples or 0) for a in acts) or None
        if layer_gammas is not None:
            g = composition_gamma(layer_gammas)
            candidates.append(GammaCertificate(
                g, "numeric_estimate" if numeric else "derived_formula",
                samples=samples_used if numeric else None, note="layerwise composition"))
        mu = math.prod(net.weight_norms())
        if mu < 1.0:
            candidates.append(GammaCertificate(
                (1.0 + mu) / 2.0, "numeric_estimate" if numeric else "derived_formula",
                samples=samples_used if numeric else None, lipschitz=mu,
                note="promoted from the product of weight norms"))
    if candidates:
        return min(candidates, key=lambda c: c.gamma)
    probe = AveragedOperator(net.__call__, GammaCertificate(1.0), label=net.label, dim_in=net.dim)
    kwargs = {} if seed is None else {"rng_seed": seed}
    try:
        return estimate_gamma(probe, samples=samples, dim=net.dim, **kwargs)
    except NotCertifiableError as exc:
        logger.warning("%s: %s", net.label, exc)
        return False


def default_lambda(gamma):
    """Constant relaxation ``min(1, 1/(2 gamma))``."""
    return min(1.0, 1.0 / (2.0 * gamma))


def check_schedule(schedule, gamma, horizon, slack=1e-12):
    """Validate ``lambda_t`` against ``[0, 1/gamma]`` and return a step function.

    Constant schedules must lie strictly inside ``(0, 1/gamma)``, which makes
    ``sum_t lambda_t (1 - gamma lambda_t)`` diverge.  Other schedules are
    scanned over ``horizon`` steps; a vanishing tail of that sum triggers a
    warning since divergence can only be guessed from a finite horizon.
    """
    upper = 1.0 / gamma
    if schedule is None:
        lam = default_lambda(gamma)
        return lambda t: lam
    if isinstance(schedule, float):
        if not (0.0 < schedule < upper * (1.0 + slack)) or schedule * gamma >= 1.0:
            raise ScheduleError(f"constant lambda={schedule} must lie in (0, 1/gamma) = (0, {upper:.6g})",
                                t=0, value=schedule)
        return lambda t: schedule
    terms = np.empty(horizon)
    for t in range(horizon):
        lam = float(schedule(t))
        if not (0.0 <= lam <= upper * (1.0 + slack)) or not math.isfinite(lam):
            raise ScheduleError(f"lambda_{t}={lam} leaves [0, 1/gamma] = [0, {upper:.6g}]", t=t, value=lam)
        terms[t] = lam * (1.0 - gamma * lam)
    tail = float(np.sum(terms[horizon // 2:]))
    if tail < 1e-3:
        warnings.warn(
            f"sum of lambda_t(1 - gamma lambda_t) over the last {horizon - horizon // 2} steps is {tail:.3g}; "
            "the schedule may be summable and the iteration may stall",
            RuntimeWarning,
            stacklevel=3,
        )
    return schedule


@dataclass
class IterationTrace:
    """Record of a relaxed fixed-point run.

    ``iterates`` holds ``x_0 ... x_T``; ``residuals[t]`` is
    ``|O(x_t) - x_t|`` for the steps taken (so one fewer than iterates) and
    ``final_residual`` is the residual at ``x_T``.
    """

    iterates: list
    residuals: list
    lambdas: list
    final_residual: float
    converged: bool
    stop_reason: str
    gamma: Optional[float]
    tol: float
    layer_outputs: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    operator: Optional[Callable] = field(default=None, repr=False, compare=False)

    @property
    def x_final(self):
        return self.iterates[-1]

    @property
    def n_steps(self):
        return len(self.residuals)

    @property
    def all_residuals(self):
        return list(self.residuals) + [self.final_residual]

    def to_rows(self, x_star=None):
        res = self.all_residuals
        rows = []
        for t, x in enumerate(self.iterates):
            row = [t, res[t]]
            if x_star is not None:
                row.append(float(np.linalg.norm(x - x_star)))
            rows.append(row)
        return rows

    def to_csv(self, x_star=None):
        header = ["t", "residual"] + (["distance_to_xstar"] if x_star is not None else [])
        return to_csv(header, self.to_rows(x_star))

    def to_dict(self, include_iterates=False, cap=JSON_ITERATE_CAP):
        out = {
            "converged": self.converged,
            "stop_reason": self.stop_reason,
            "steps": self.n_steps,
            "gamma": self.gamma,
            "tol": self.tol,
            "final_residual": self.final_residual,
            "x_final": self.x_final,
            "residuals": self.all_residuals,
        }
        if include_iterates:
            its = self.iterates
            truncated = len(its) > cap
            if truncated:
                keep = np.unique(np.linspace(0, len(its) - 1, cap).round().astype(int))
                out["iterate_index"] = keep.tolist()
                its = [its[i] for i in keep]
            out["iterates"] = its
            out["iterates_truncated"] = truncated
        out.update(self.extra)
        return out


def _residual(op_fn, x):
    ox = np.asarray(op_fn(x), dtype=float).reshape(-1)
    return ox, float(np.linalg.norm(ox - x))


def relaxed_iteration(op_fn, x0, step, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, gamma=None,
                      layer_fn=None, record_layers=True):
    """Run ``x <- x + lambda_t (O(x) - x)`` without any schedule validation.

    ``step`` maps ``t`` to ``lambda_t``.  ``layer_fn`` (optional) returns the
    per-layer outputs at an iterate; when given, ``O(x)`` is its last entry,
    so the recorded layer outputs and the iteration share one evaluation.
    """
    x = as_vector(x0, "x0").copy()
    iterates, residuals, lambdas, layers = [x.copy()], [], [], []
    stop = "max_iter"
    final = math.nan
    for t in range(max_iter + 1):
        if layer_fn is not None:
            ys = layer_fn(x)
            ox = ys[-1]
            if record_layers:
                layers.append([y.copy() for y in ys])
        else:
            ox = np.asarray(op_fn(x), dtype=float).reshape(-1)
        if not (np.all(np.isfinite(ox)) and np.all(np.isfinite(x))):
            stop = "diverged"
            final = math.inf
            break
        r = float(np.linalg.norm(ox - x))
        if r <= tol:
            final = r
            stop = "residual_tol"
            break
        if t == max_iter:
            final = r
            break
        lam = float(step(t))
        x = x + lam * (ox - x)
        residuals.append(r)
        lambdas.append(lam)
        iterates.append(x.copy())
    if layer_fn is not None and not record_layers:
        layers = [[y.copy() for y in layer_fn(x)]] if stop != "diverged" else []
    return IterationTrace(
        iterates=iterates,
        residuals=residuals,
        lambdas=lambdas,
        final_residual=final,
        converged=stop == "residual_tol",
        stop_reason=stop,
        gamma=gamma,
        tol=tol,
        layer_outputs=layers,
        operator=op_fn,
    )


def km_iterate(net, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, schedule=None, x0=None, check=True,
               record_layers=True):
    """Krasnoselskii-Mann iteration of a network or an averaged operator.

    Parameters
    ----------
    net : NetworkSpec or AveragedOperator
        The map to iterate.  An operator must carry ``x0`` explicitly.
    schedule : float, callable or sequence, optional
        Overrides the network's own schedule.
    check : bool
        Validate the schedule against the certified gamma.  ``False`` runs
        the iteration unchecked and logs a warning.

    Returns
    -------
    IterationTrace
    """
    if isinstance(net, NetworkSpec):
        op_fn = net.__call__
        layer_fn = lambda x: forward(net, x)  # noqa: E731
        x_start = net.x0 if x0 is None else as_vector(x0, "x0", dim=net.dim)
        sched = net.lambda_schedule if schedule is None else _normalize_schedule(schedule)
        cert = net.certificate
    else:
        op_fn, layer_fn = net.__call__, None
        if x0 is None:
            raise ValueError("x0 is required when iterating a bare operator")
        x_start = as_vector(x0, "x0", dim=net.dim_in)
        sched = _normalize_schedule(schedule)
        cert = net.certificate
    gamma = cert.gamma if cert is not None else None
    if check:
        if gamma is None:
            raise NotCertifiableError("cannot run a checked iteration without a certificate; pass check=False")
        step = check_schedule(sched, gamma, max_iter)
    else:
        logger.warning("running an unchecked relaxed iteration; convergence is not guaranteed")
        if sched is None:
            sched = 1.0 if gamma is None else default_lambda(gamma)
        step = (lambda t: sched) if isinstance(sched, float) else sched
    trace = relaxed_iteration(op_fn, x_start, step, tol=tol, max_iter=max_iter, gamma=gamma,
                              layer_fn=layer_fn, record_layers=record_layers)
    trace.extra["checked"] = bool(check)
    return trace


def refine_fixed_point(op_fn, x, max_iter=100_000, patience=50, step=1.0):
    """Polish an approximate fixed point until the residual stops improving.

    Used to turn the end of a converged trace into a reference point whose
    error is at rounding level, so distance diagnostics are not polluted by
    the stopping tolerance.
    """
    x = np.asarray(x, dtype=float).copy()
    best_x, best_r = x.copy(), math.inf
    stale = 0
    for _ in range(max_iter):
        ox, r = _residual(op_fn, x)
        if r < best_r:
            best_x, best_r, stale = x.copy(), r, 0
        else:
            stale += 1
        if r == 0.0 or stale >= patience:
            break
        x = x + step * (ox - x)
    return best_x, best_r


def contraction_mode(net, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, rate_tol=1e-9, x0=None):
    """Plain Picard iteration (``lambda = 1``) for networks with contracting weights.

    Requires every activation to be nonexpansive (certified) and
    ``max_l |W_l| < 1``.  Every recorded step is compared with the rate bound
    ``prod_l |W_l|``; steps whose residual is below the rounding floor
    ``RATE_NOISE_FLOOR * max(1, |x_t|)`` are not rated.
    """
    norms = net.weight_norms()
    bad = [a.kind for a in (layer.activation for layer in net.layers) if not a.certified]
    if bad:
        raise ValueError(f"activations without a nonexpansiveness certificate: {bad}")
    if max(norms) >= 1.0:
        raise ValueError(f"contraction mode needs max |W_l| < 1, got norms {norms}")
    bound = math.prod(norms)
    layer_fn = lambda x: forward(net, x)  # noqa: E731
    x_start = net.x0 if x0 is None else as_vector(x0, "x0", dim=net.dim)
    cert = net.certificate
    trace = relaxed_iteration(net.__call__, x_start, lambda t: 1.0, tol=tol, max_iter=max_iter,
                              gamma=None if cert is None else cert.gamma, layer_fn=layer_fn)
    res = trace.all_residuals
    rates = []
    for t in range(len(res) - 1):
        floor = RATE_NOISE_FLOOR * max(1.0, float(np.linalg.norm(trace.iterates[t])))
        if res[t] > floor and math.isfinite(res[t + 1]):
            rates.append(res[t + 1] / res[t])
    max_rate = max(rates) if rates else 0.0
    trace.extra.update({
        "weight_norms": norms,
        "rate_bound": bound,
        "rates": rates,
        "max_rate": max_rate,
        "rate_ok": bool(max_rate <= bound + rate_tol),
    })
    return trace


@dataclass
class FejerReport:
    distances: list
    monotone: bool
    max_increase: float
    telescoping_sum: float
    telescoping_bound: float
    telescoping_ok: bool
    x_star_residual: float

    @property
    def passed(self):
        return self.monotone and self.telescoping_ok

    def to_dict(self):
        return {
            "distances": self.distances,
            "monotone": self.monotone,
            "max_increase": self.max_increase,
            "telescoping_sum": self.telescoping_sum,
            "telescoping_bound": self.telescoping_bound,
            "telescoping_ok": self.telescoping_ok,
            "x_star_residual": self.x_star_residual,
            "passed": self.passed,
        }


def fejer_check(trace, x_star, tol=1e-12, fixed_tol=DEFAULT_TOL, op=None):
    """Fejer monotonicity and the telescoping bound along a trace.

    With ``eps_t = gamma * lambda_t`` and the nonexpansive companion
    ``Id + (O - Id)/gamma`` the step satisfies
    ``|x_{t+1} - x*|^2 <= |x_t - x*|^2 - eps_t (1 - eps_t) (r_t / gamma)^2``,
    which sums to ``sum_t eps_t (1 - eps_t)(r_t / gamma)^2 <= |x_0 - x*|^2 - |x_T - x*|^2``.
    """
    op = op or trace.operator
    x_star = as_vector(x_star, "x_star", dim=trace.iterates[0].size)
    if op is None:
        raise ValueError("the trace carries no operator; pass op to validate x_star")
    _, r_star = _residual(op, x_star)
    if r_star > fixed_tol:
        raise ValueError(f"x_star is not a fixed point (residual {r_star:.3g} > {fixed_tol:.3g})")
    if trace.gamma is None:
        raise ValueError("the telescoping bound needs the certified gamma of the trace")
    gamma = trace.gamma
    dist = [float(np.linalg.norm(x - x_star)) for x in trace.iterates]
    inc = [b - a for a, b in zip(dist[:-1], dist[1:])]
    max_inc = max(inc) if inc else 0.0
    terms = []
    for lam, r in zip(trace.lambdas, trace.residuals):
        eps = gamma * lam
        terms.append(eps * (1.0 - eps) * (r / gamma) ** 2)
    total = math.fsum(terms)
    bound = dist[0] ** 2 - dist[-1] ** 2
    scale = max(1.0, dist[0] ** 2)
    return FejerReport(
        distances=dist,
        monotone=bool(max_inc <= tol),
        max_increase=max_inc,
        telescoping_sum=total,
        telescoping_bound=bound,
        telescoping_ok=bool(total <= bound + tol * scale),
        x_star_residual=r_star,
    )


def scalar_operator(fn, gamma, provenance="derived_formula", label="map", dim=1):
    """Wrap a map on R^dim with a known gamma (for fixtures and examples)."""
    return AveragedOperator(lambda x: np.asarray(fn(np.asarray(x, dtype=float)), dtype=float),
                            GammaCertificate(gamma, provenance), label=label, dim_in=dim, dim_out=dim)
