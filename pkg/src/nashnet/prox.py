"""Proximal potentials, a derivative-free prox evaluator and numeric conjugates.

For a proper lower semi-continuous convex ``f`` on R the proximal map is
``prox_f(x) = argmin_y f(y) + (y - x)^2 / 2``.  Its conjugate companion
``g = (|.|^2/2 + f)^*`` satisfies ``g' = prox_f``, which is the identity
the dual training objective relies on.

Everything here is computed by bracketed golden-section search on the
potential itself; the closed-form activations are never consulted, so the
results can serve as an independent check of them.
"""

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit, xlogy

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class ProxPotential:
    """Extended-real convex potential on an interval.

    ``f`` is evaluated elementwise and must return ``+inf`` outside the
    domain ``[lo, hi]``.  ``closed`` says whether the end points belong to the
    effective domain; open ends are approached but never evaluated.
    ``activation`` is the closed-form prox, kept only for comparison.
    """

    name: str
    f: Callable
    lo: float = -math.inf
    hi: float = math.inf
    closed: bool = True
    activation: Optional[Callable] = None

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.asarray(self.f(y), dtype=float)
        outside = (y < self.lo) | (y > self.hi)
        if not self.closed:
            outside |= (y <= self.lo) | (y >= self.hi)
        return np.where(outside, np.inf, out)

    @property
    def bounded(self):
        return math.isfinite(self.lo) and math.isfinite(self.hi)

    def midpoint_convexity(self, n=10_000, seed=0, tol=1e-12):
        """Largest violation of ``f((a+b)/2) <= (f(a)+f(b))/2`` on sampled pairs."""
        rng = np.random.default_rng(seed)
        lo = self.lo if math.isfinite(self.lo) else -20.0
        hi = self.hi if math.isfinite(self.hi) else 20.0
        span = hi - lo
        a = rng.uniform(lo + 1e-9 * span, hi - 1e-9 * span, n)
        b = rng.uniform(lo + 1e-9 * span, hi - 1e-9 * span, n)
        viol = self((a + b) / 2.0) - (self(a) + self(b)) / 2.0
        return float(np.max(viol))


def _f_zero(y):
    return np.zeros_like(y)


def _f4(y):
    # xlogy keeps the end points |y| = 1/2 finite (value -1/4)
    u = (1.0 + 2.0 * y) / 2.0
    v = (1.0 - 2.0 * y) / 2.0
    return xlogy(u, u) + xlogy(v, v) - (4.0 * y * y + 1.0) / 8.0


def _f23(y):
    a = np.abs(y)
    return -a - np.log1p(-a) - y * y / 2.0


def _f_sigmoid(y):
    # shift of f4 onto [0, 1]; its prox is the uncentered logistic sigmoid
    return _f4(y - 0.5) - y / 2.0


F_ZERO = ProxPotential("zero", _f_zero, activation=lambda x: np.asarray(x, dtype=float))
F4 = ProxPotential("f4", _f4, -0.5, 0.5, closed=True, activation=lambda x: expit(x) - 0.5)
F23 = ProxPotential("f23", _f23, -1.0, 1.0, closed=False, activation=lambda x: x / (1.0 + np.abs(x)))
SIGMOID_POTENTIAL = ProxPotential("sigmoid", _f_sigmoid, 0.0, 1.0, closed=True, activation=expit)

POTENTIALS = {p.name: p for p in (F_ZERO, F4, F23, SIGMOID_POTENTIAL)}

# activation kind -> potential whose prox it is
ACTIVATION_POTENTIALS = {"identity": F_ZERO, "sigmoid": SIGMOID_POTENTIAL, "softsign": F23}


def potential_for(kind):
    try:
        return ACTIVATION_POTENTIALS[kind]
    except KeyError:
        raise ValueError(f"no closed-form potential is known for activation {kind!r}") from None


def _bracket(f, x, lo, hi, closed):
    """Finite interval containing the minimizer of ``f(y) + (y - x)^2 / 2``."""
    x = np.asarray(x, dtype=float)
    if math.isfinite(lo) and math.isfinite(hi):
        # open ends: shrink by one ulp-scale step so evaluations stay finite
        eps = 0.0 if closed else 1e-15 * max(1.0, hi - lo)
        return np.full_like(x, lo + eps), np.full_like(x, hi - eps)
    # unbounded side: grow the interval until the objective rises at both ends
    a = np.where(math.isfinite(lo), lo, x - 1.0)
    b = np.where(math.isfinite(hi), hi, x + 1.0)
    m = 0.5 * (a + b)

    def phi(y):
        return f(y) + 0.5 * (y - x) ** 2

    for _ in range(200):
        fm = phi(m)
        grow_a = (~np.isfinite(lo)) & (phi(a) <= fm)
        grow_b = (~np.isfinite(hi)) & (phi(b) <= fm)
        if not (np.any(grow_a) or np.any(grow_b)):
            return a, b
        a = np.where(grow_a, m - 2.0 * (m - a), a)
        b = np.where(grow_b, m + 2.0 * (b - m), b)
    raise ValueError("objective appears unbounded below; potential is not proper convex")


def golden_section(phi, a, b, tol=1e-13, max_iter=400):
    """Vectorized golden-section minimization of a unimodal ``phi`` on ``[a, b]``.

    Returns the best point evaluated, which for strictly convex objectives is
    within ``tol`` of the minimizer (up to objective rounding).
    """
    a = np.array(a, dtype=float)
    b = np.array(b, dtype=float)
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = phi(c), phi(d)
    for _ in range(max_iter):
        if np.all(b - a <= tol * np.maximum(1.0, np.abs(a) + np.abs(b))):
            break
        left = fc <= fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - _INVPHI * (b - a)
        new_d = a + _INVPHI * (b - a)
        # reuse the surviving interior point
        c_next = np.where(left, new_c, d)
        d_next = np.where(left, c, new_d)
        fc_next = np.where(left, np.nan, fd)
        fd_next = np.where(left, fc, np.nan)
        need_c = np.isnan(fc_next)
        need_d = np.isnan(fd_next)
        if np.any(need_c):
            fc_next = np.where(need_c, phi(c_next), fc_next)
        if np.any(need_d):
            fd_next = np.where(need_d, phi(d_next), fd_next)
        c, d, fc, fd = c_next, d_next, fc_next, fd_next
    # compare interior points with the end points (the minimizer may sit on a closed end)
    cands = np.stack([a, b, c, d])
    vals = np.stack([phi(a), phi(b), fc, fd])
    vals = np.where(np.isnan(vals), np.inf, vals)
    k = np.argmin(vals, axis=0)
    return np.take_along_axis(cands, k[None, ...], axis=0)[0]


def prox_eval(f, x, tol=1e-13):
    """Evaluate ``argmin_y f(y) + (y - x)^2 / 2`` by golden-section search.

    Parameters
    ----------
    f : ProxPotential
        Convex potential.
    x : float or array_like
        Point(s) at which to evaluate the proximal map (elementwise).
    tol : float
        Relative bracket width at termination.

    Returns
    -------
    float or ndarray
        Matching the shape of ``x``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    x_arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x_arr)):
        raise ValueError("x must be finite")
    flat = x_arr.reshape(-1)
    a, b = _bracket(f, flat, f.lo, f.hi, f.closed)

    def phi(y):
        return f(y) + 0.5 * (y - flat) ** 2

    y = golden_section(phi, a, b, tol=tol)
    y = y.reshape(x_arr.shape)
    return float(y) if np.ndim(x) == 0 else y


def moreau_envelope(f, x, tol=1e-13):
    """``min_y f(y) + (y - x)^2 / 2`` together with the minimizer."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(prox_eval(f, x, tol=tol))
    return f(y) + 0.5 * (y - x) ** 2, y


def conjugate(f, x, tol=1e-13):
    """``g(x) = sup_y [x*y - y^2/2 - f(y)]``, the conjugate of ``|.|^2/2 + f``.

    The supremum is located by the same golden-section search; it equals
    ``x^2/2`` minus the Moreau envelope of ``f`` at ``x``.
    """
    x = np.asarray(x, dtype=float)
    env, _ = moreau_envelope(f, x, tol=tol)
    out = 0.5 * x * x - env
    return float(out) if out.ndim == 0 else out


def conjugate_grad(f, x, h=1e-4, tol=1e-13):
    """Central finite difference of :func:`conjugate`."""
    x = np.asarray(x, dtype=float)
    return (conjugate(f, x + h, tol) - conjugate(f, x - h, tol)) / (2.0 * h)


@dataclass
class ConjugateReport:
    kind: str
    xs: np.ndarray
    fd_grad: np.ndarray
    activation: np.ndarray
    max_error: float
    tol: float

    @property
    def passed(self):
        return self.max_error <= self.tol

    def to_dict(self):
        return {
            "kind": self.kind,
            "points": self.xs.tolist(),
            "fd_grad": self.fd_grad.tolist(),
            "activation": self.activation.tolist(),
            "max_error": self.max_error,
            "tol": self.tol,
            "passed": self.passed,
        }


def conjugate_grad_identity_check(kind, xs, tol=1e-4, h=1e-4):
    """Check ``g' = r`` by finite differences for an activation with known potential.

    ``kind`` is ``"sigmoid"`` or ``"softsign"`` (or ``"identity"``).
    """
    pot = potential_for(kind)
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    fd = np.atleast_1d(conjugate_grad(pot, xs, h=h))
    act = np.atleast_1d(pot.activation(xs))
    err = float(np.max(np.abs(fd - act)))
    return ConjugateReport(kind, xs, fd, act, err, tol)


def activation_fixed_point(f):
    """Fixed point of the closed-form prox of ``f``, by bracketed root finding.

    Picard iteration converges only sublinearly for maps like softsign
    (``r(x) - x ~ -x^2``), so the sign change of ``r(x) - x`` over the domain
    is bisected instead; the sign is exact in floating point for these maps.
    """
    lo = max(f.lo, -1e3)
    hi = min(f.hi, 1e3)
    return float(brentq(lambda x: float(f.activation(x)) - x, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps))


def minimize_potential(f, tol=1e-13):
    """Numerically located minimizer of ``f`` on its domain."""
    if f.bounded:
        eps = 0.0 if f.closed else 1e-15 * (f.hi - f.lo)
        a, b = np.array([f.lo + eps]), np.array([f.hi - eps])
    else:
        # unbounded potentials are searched on a wide finite window
        a = np.array([max(f.lo, -1e3)])
        b = np.array([min(f.hi, 1e3)])
    return float(golden_section(f, a, b, tol=tol)[0])
