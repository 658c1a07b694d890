"""A network of projection layers that orthonormalizes random variables.

A random variable with values in R^d is represented by N draws, an array
of shape (N, d).  The inner product is the empirical mean of the per-draw
dot product, so every identity below holds exactly in this finite Hilbert
space.  Layer ``l`` removes from every later member its projection onto
the current ``l``-th member; a final layer normalizes.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._validation import as_matrix

GRAM_COND_LIMIT = 1e12


def as_sample(x, name="x"):
    """Coerce to an ``(N, d)`` sample array with ``N >= 2`` finite draws."""
    a = np.asarray(x, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    a = as_matrix(a, name)
    if a.shape[0] < 2:
        raise ValueError(f"{name} needs at least two draws")
    return a


def inner(x, y):
    """``E[<x, y>]`` estimated by the mean over draws."""
    return float(np.sum(x * y) / x.shape[0])


def norm(x):
    return float(np.sqrt(inner(x, x)))


def project(x_i, x_j):
    """Projection of ``x_j`` onto the span of ``x_i``."""
    x_i, x_j = as_sample(x_i, "x_i"), as_sample(x_j, "x_j")
    if x_i.shape != x_j.shape:
        raise ValueError("x_i and x_j must have the same shape")
    nn = inner(x_i, x_i)
    if nn <= 0:
        raise ValueError("cannot project onto a zero random variable")
    return (inner(x_j, x_i) / nn) * x_i


def gram_matrix(family):
    L = len(family)
    G = np.empty((L, L))
    for i in range(L):
        for j in range(i, L):
            G[i, j] = G[j, i] = inner(family[i], family[j])
    return G


class DependentFamilyError(ValueError):
    def __init__(self, message, cond=None, gram=None):
        super().__init__(message)
        self.cond = cond
        self.gram = gram


def _as_family(family):
    members = [as_sample(x, f"member {k + 1}") for k, x in enumerate(family)]
    if not members:
        raise ValueError("family is empty")
    shape = members[0].shape
    if any(m.shape != shape for m in members):
        raise ValueError("all members need the same (N, d) shape")
    return members


def check_independent(family, limit=GRAM_COND_LIMIT):
    """Reject families whose Gram matrix is singular or too ill-conditioned."""
    G = gram_matrix(family)
    eig = np.linalg.eigvalsh(G)
    cond = np.inf if eig[0] <= 0 else float(eig[-1] / eig[0])
    if not cond <= limit:
        raise DependentFamilyError(
            f"family is numerically dependent (Gram condition number {cond:.3g} > {limit:.3g})", cond, G
        )
    return cond


def projection_layer(l):
    """Layer ``l``: subtract from members ``j > l`` their projection onto member ``l``."""

    def apply(ys):
        out = list(ys)
        for j in range(l + 1, len(out)):
            out[j] = out[j] - project(out[l], out[j])
        return out

    return apply


def normalization_layer(ys):
    """Scale every member to unit norm."""
    out = []
    for y in ys:
        n = norm(y)
        if n <= 0:
            raise DependentFamilyError("a member vanished during orthogonalization")
        out.append(y / n)
    return out


def gs_network_run(family, check=True, return_coefficients=False):
    """Pass the family through the projection layers and the normalization layer.

    Each output member equals its input member minus a combination of the
    earlier ones, rescaled by a positive factor, so the coefficient on the
    original member stays positive; that fixes the sign convention.

    Returns
    -------
    list of arrays
        Orthonormal family of the same shapes.  With
        ``return_coefficients`` also the lower-triangular ``R`` with
        ``out[k] = sum_m R[k, m] family[m]``.
    """
    ys = _as_family(family)
    if check:
        check_independent(ys)
    R = np.eye(len(ys))
    for l in range(len(ys) - 1):
        nn = inner(ys[l], ys[l])
        if nn <= 0:
            raise DependentFamilyError("a member vanished during orthogonalization")
        for j in range(l + 1, len(ys)):
            c = inner(ys[j], ys[l]) / nn
            ys[j] = ys[j] - c * ys[l]
            R[j] -= c * R[l]
    norms = np.array([norm(y) for y in ys])
    out = normalization_layer(ys)
    R /= norms[:, None]
    return (out, R) if return_coefficients else out


@dataclass
class GSReport:
    family_size: int
    draws: int
    gram_error: float
    span_error: float
    idempotence_error: Optional[float]
    gram_condition: float

    def to_dict(self):
        return {
            "family_size": self.family_size,
            "draws": self.draws,
            "gram_error": self.gram_error,
            "span_error": self.span_error,
            "idempotence_error": self.idempotence_error,
            "gram_condition": self.gram_condition,
        }


def _span_error(family, X1):
    """Largest residual of ``X1[k]`` after least squares on ``members[:k+1]``."""
    worst = 0.0
    for k, q in enumerate(X1):
        B = np.stack([m.reshape(-1) for m in family[: k + 1]], axis=1)
        coef, *_ = np.linalg.lstsq(B, q.reshape(-1), rcond=None)
        worst = max(worst, float(np.max(np.abs(B @ coef - q.reshape(-1)))))
    return worst


def idempotence_check(family):
    """Run the network twice; the second pass should return its input."""
    X1 = gs_network_run(family)
    X2 = gs_network_run(X1)
    err = max(float(np.max(np.abs(a - b))) for a, b in zip(X1, X2))
    return X1, X2, err


def gs_report(family):
    members = _as_family(family)
    cond = check_independent(members)
    X1, _, idem = idempotence_check(members)
    G = gram_matrix(X1)
    return X1, GSReport(
        family_size=len(members),
        draws=members[0].shape[0],
        gram_error=float(np.max(np.abs(G - np.eye(len(X1))))),
        span_error=_span_error(members, X1),
        idempotence_error=idem,
        gram_condition=cond,
    )


@dataclass
class LinearPredictor:
    """Projection of ``y`` onto the span of the constant and the components of ``x``.

    ``alpha`` and ``beta`` are the coefficients of ``y - E[y]`` on the
    orthonormalized family (``alpha`` multiplies the constant and vanishes);
    ``intercept`` and ``slope`` express the same predictor as
    ``intercept + slope @ x``.
    """

    prediction: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    intercept: np.ndarray
    slope: np.ndarray

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        x2 = x[:, None] if x.ndim == 1 else x
        out = self.intercept + x2 @ self.slope.T
        return out[:, 0] if x.ndim == 1 and self.slope.shape[0] == 1 else out


def best_linear_predictor(x, y):
    """Best linear (affine) predictor of ``y`` given ``x`` by orthogonal projection.

    Parameters
    ----------
    x : array of shape (N,) or (N, p)
    y : array of shape (N,) or (N, q)

    Returns
    -------
    LinearPredictor
        ``prediction`` has the shape of ``y``.
    """
    x_arr, y_arr = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    X, Y = as_sample(x_arr, "x"), as_sample(y_arr, "y")
    if X.shape[0] != Y.shape[0]:
        raise ValueError("x and y need the same number of draws")
    N, p = X.shape
    one = np.ones((N, 1))
    family = [one] + [X[:, [k]] for k in range(p)]
    try:
        Q, R = gs_network_run(family, return_coefficients=True)
    except DependentFamilyError as err:
        raise ValueError(f"covariance of x is singular: {err}") from err
    Yc = Y - Y.mean(axis=0)
    # coefficients of each centred y component on the orthonormal family
    C = np.array([[inner(Yc[:, [i]], q) for q in Q] for i in range(Y.shape[1])])
    pred = Y.mean(axis=0) + sum(C[:, [k]].T * Q[k] for k in range(len(Q)))
    coef = C @ R
    intercept = Y.mean(axis=0) + coef[:, 0]
    slope = coef[:, 1:]
    prediction = pred[:, 0] if y_arr.ndim == 1 else pred
    return LinearPredictor(prediction, C[:, 0], C[:, 1:], intercept, slope)
