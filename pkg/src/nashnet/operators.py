"""Averaged operators and their certificate calculus.

An operator ``O`` on R^n is gamma-averaged (``0 < gamma <= 1``) when
``Id + (O - Id) / gamma`` is nonexpansive, equivalently when for all x, y::

    |O(x) - O(y)|^2 <= |x - y|^2 - (1 - gamma)/gamma * |(x - O(x)) - (y - O(y))|^2

The functions here check that inequality on samples, combine certificates
under composition and convex combination, and estimate certificates for maps
that come without a closed form.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._validation import as_vector, check_gamma, check_positive_int, check_weights

PROVENANCES = ("closed_form_paper", "derived_formula", "numeric_estimate")

DEFAULT_BOX = (-20.0, 20.0)
DEFAULT_TOL = 1e-9
DEFAULT_PAIRS = 10_000
DEFAULT_SEED = 20230101

# smallest gamma we ever report; the identity is gamma-averaged for every gamma > 0
GAMMA_FLOOR = 1e-12


class NotCertifiableError(ValueError):
    """Raised when no averagedness certificate can be produced for a map."""

    def __init__(self, message, lipschitz=None, witness=None):
        super().__init__(message)
        self.lipschitz = lipschitz
        self.witness = witness


@dataclass(frozen=True)
class GammaCertificate:
    gamma: float
    provenance: str = "derived_formula"
    samples: Optional[int] = None
    max_violation: Optional[float] = None
    lipschitz: Optional[float] = None
    note: str = ""

    def __post_init__(self):
        check_gamma(self.gamma)
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.provenance == "numeric_estimate" and self.samples is None:
            raise ValueError("numeric estimates must record their sample count")

    def to_dict(self):
        return {
            "gamma": self.gamma,
            "provenance": self.provenance,
            "samples": self.samples,
            "max_violation": self.max_violation,
            "lipschitz": self.lipschitz,
            "note": self.note,
        }


@dataclass
class AveragedOperator:
    """A map R^n -> R^m together with an averagedness certificate.

    ``fn`` maps a 1-D array to a 1-D array.  When ``vectorized`` is true it
    also accepts a 2-D batch of shape ``(k, n)`` and maps rows independently,
    which the samplers use to avoid Python loops.
    """

    fn: Callable
    certificate: GammaCertificate
    label: str = "operator"
    dim_in: Optional[int] = None
    dim_out: Optional[int] = None
    vectorized: bool = False

    @property
    def gamma(self):
        return self.certificate.gamma

    def __call__(self, x):
        return np.asarray(self.fn(np.asarray(x, dtype=float)), dtype=float)

    def batch(self, X):
        """Evaluate on every row of ``X``."""
        X = np.asarray(X, dtype=float)
        if self.vectorized:
            return np.asarray(self.fn(X), dtype=float).reshape(X.shape[0], -1)
        return np.stack([np.atleast_1d(self(x)) for x in X])


def _batch_eval(op, X):
    if isinstance(op, AveragedOperator):
        return op.batch(X)
    return np.stack([np.atleast_1d(np.asarray(op(x), dtype=float)) for x in X])


@dataclass
class AveragedReport:
    passed: bool
    gamma: float
    worst_violation: float
    samples: int
    witness: Optional[tuple] = None
    label: str = ""
    provenance: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        witness = None
        if self.witness is not None:
            witness = [np.asarray(w).tolist() for w in self.witness]
        out = {
            "label": self.label,
            "gamma": self.gamma,
            "provenance": self.provenance,
            "samples": self.samples,
            "passed": self.passed,
            "worst_violation": self.worst_violation,
            "witness": witness,
        }
        out.update(self.extra)
        return out


def sample_pairs(dim, n_pairs=DEFAULT_PAIRS, box=DEFAULT_BOX, seed=DEFAULT_SEED):
    """Draw ``n_pairs`` point pairs from a box in R^dim.

    Half of the pairs are independent uniform draws; the other half are local
    pairs ``(x, x + s*u)`` with ``u`` a random unit direction and ``s`` cycling
    through 1e-3, 1e-2, 1e-1, 1.  Far pairs only see averaged slopes, so the
    local half is what exposes regions where a map expands.
    """
    dim = check_positive_int(dim, "dim")
    n_pairs = check_positive_int(n_pairs, "n_pairs")
    lo, hi = _box_bounds(box, dim)
    rng = np.random.default_rng(seed)
    n_far = n_pairs // 2
    n_near = n_pairs - n_far
    X = rng.uniform(lo, hi, size=(n_pairs, dim))
    Y = np.empty_like(X)
    Y[:n_far] = rng.uniform(lo, hi, size=(n_far, dim))
    u = rng.standard_normal(size=(n_near, dim))
    u /= np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-300)
    scales = np.array([1e-3, 1e-2, 1e-1, 1.0])[np.arange(n_near) % 4]
    Y[n_far:] = np.clip(X[n_far:] + scales[:, None] * u, lo, hi)
    # clipping can collapse a pair onto itself at a corner; nudge inward
    same = np.all(Y == X, axis=1)
    if np.any(same):
        Y[same] = np.clip(X[same] - 1e-3 * np.sign(X[same] - (lo + hi) / 2 + 1e-300), lo, hi)
    return X, Y


def _box_bounds(box, dim):
    lo, hi = box
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (dim,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (dim,)).copy()
    if np.any(hi <= lo):
        raise ValueError("sampling box is degenerate")
    return lo, hi


def averaged_violations(X, Y, OX, OY, gamma):
    """Per-pair ``LHS - RHS`` of the averagedness inequality.

    Maps between spaces of different dimension are only meaningful at
    ``gamma == 1``, where the inequality reduces to nonexpansiveness.
    """
    dx = X - Y
    do = OX - OY
    lhs = np.sum(do * do, axis=1)
    rhs = np.sum(dx * dx, axis=1)
    if gamma < 1.0:
        if OX.shape[1] != X.shape[1]:
            raise ValueError("gamma < 1 requires an operator from a space to itself")
        dr = dx - do
        rhs = rhs - (1.0 - gamma) / gamma * np.sum(dr * dr, axis=1)
    return lhs - rhs


def check_averaged(op, gamma, pairs, tol=DEFAULT_TOL, label=None):
    """Test the gamma-averaged inequality on every supplied pair.

    Parameters
    ----------
    op : AveragedOperator or callable
        The candidate operator.
    gamma : float
        Averagedness constant in (0, 1].
    pairs : tuple of arrays or list of (x, y)
        Either ``(X, Y)`` arrays of shape ``(k, n)`` or a list of vector pairs.
    tol : float
        Absolute slack allowed on ``LHS - RHS``.

    Returns
    -------
    AveragedReport
        ``passed`` is true iff every pair satisfies the inequality within
        ``tol``; ``witness`` holds the worst pair when it fails.
    """
    gamma = check_gamma(gamma)
    X, Y = _pairs_to_arrays(pairs)
    dim = getattr(op, "dim_in", None)
    if dim is not None and X.shape[1] != dim:
        raise ValueError(f"pairs have dimension {X.shape[1]}, operator expects {dim}")
    OX = _batch_eval(op, X)
    OY = _batch_eval(op, Y)
    viol = averaged_violations(X, Y, OX, OY, gamma)
    if not np.all(np.isfinite(viol)):
        raise ValueError("operator produced non-finite values on the sample")
    k = int(np.argmax(viol))
    worst = float(viol[k])
    passed = worst <= tol
    witness = None if passed else (X[k].copy(), Y[k].copy())
    cert = getattr(op, "certificate", None)
    return AveragedReport(
        passed=passed,
        gamma=gamma,
        worst_violation=worst,
        samples=X.shape[0],
        witness=witness,
        label=label or getattr(op, "label", ""),
        provenance=cert.provenance if cert is not None else "",
    )


def _pairs_to_arrays(pairs):
    if isinstance(pairs, tuple) and len(pairs) == 2 and np.ndim(pairs[0]) == 2:
        X = np.asarray(pairs[0], dtype=float)
        Y = np.asarray(pairs[1], dtype=float)
    else:
        pairs = list(pairs)
        if not pairs:
            raise ValueError("pairs must be nonempty")
        X = np.stack([as_vector(p[0], "x") for p in pairs])
        Y = np.stack([as_vector(p[1], "y") for p in pairs])
    if X.shape != Y.shape or X.shape[0] == 0:
        raise ValueError("pair arrays must be nonempty and share a shape")
    return X, Y


def composition_gamma(gammas):
    """Certificate of ``O_L o ... o O_1`` from the individual gammas.

    Any nonexpansive (gamma = 1) factor makes the sum diverge, and the limit
    of the formula is then 1.
    """
    gammas = [check_gamma(g) for g in gammas]
    if not gammas:
        raise ValueError("need at least one gamma")
    if len(gammas) == 1:
        return gammas[0]
    if any(g == 1.0 for g in gammas):
        return 1.0
    s = math.fsum(g / (1.0 - g) for g in gammas)
    return min(1.0, max(s / (1.0 + s), GAMMA_FLOOR))


def compose(ops, label=None):
    """Compose operators right to left: ``compose([f, g])(x) == f(g(x))``."""
    ops = list(ops)
    if not ops:
        raise ValueError("compose needs at least one operator")
    for outer, inner in zip(ops[:-1], ops[1:]):
        if outer.dim_in is not None and inner.dim_out is not None and outer.dim_in != inner.dim_out:
            raise ValueError(
                f"cannot compose {outer.label} (input {outer.dim_in}) after "
                f"{inner.label} (output {inner.dim_out})"
            )
    if len(ops) == 1:
        return ops[0]
    gamma = composition_gamma([op.gamma for op in ops])
    vectorized = all(op.vectorized for op in ops)

    def fn(x):
        for op in reversed(ops):
            x = op.fn(x)
        return x

    provs = {op.certificate.provenance for op in ops}
    prov = "numeric_estimate" if "numeric_estimate" in provs else "derived_formula"
    samples = max((op.certificate.samples or 0) for op in ops) or None
    cert = GammaCertificate(gamma, prov, samples=samples if prov == "numeric_estimate" else None)
    return AveragedOperator(
        fn,
        cert,
        label=label or " o ".join(op.label for op in ops),
        dim_in=ops[-1].dim_in,
        dim_out=ops[0].dim_out,
        vectorized=vectorized,
    )


def weighted_sum(ops, weights, label=None, atol=1e-12):
    """Convex combination ``sum_l w_l O_l`` with certificate ``sum_l w_l gamma_l``.

    Evaluation sums the weighted terms with ``math.fsum`` so the result does not
    depend on the order in which operators are listed.
    """
    ops = list(ops)
    w = check_weights(weights, n=len(ops), atol=atol)
    dims = {op.dim_in for op in ops if op.dim_in is not None}
    if len(dims) > 1:
        raise ValueError("weighted_sum needs operators on a common space")
    if len(ops) == 1:
        return ops[0]
    gamma = min(1.0, math.fsum(float(wi) * op.gamma for wi, op in zip(w, ops)))
    vectorized = all(op.vectorized for op in ops)

    def fn(x):
        terms = np.stack([wi * np.asarray(op.fn(x), dtype=float) for wi, op in zip(w, ops)])
        flat = terms.reshape(len(ops), -1)
        out = np.array([math.fsum(col) for col in flat.T])
        return out.reshape(terms.shape[1:])

    provs = {op.certificate.provenance for op in ops}
    prov = "numeric_estimate" if "numeric_estimate" in provs else "derived_formula"
    samples = max((op.certificate.samples or 0) for op in ops) or None
    cert = GammaCertificate(gamma, prov, samples=samples if prov == "numeric_estimate" else None)
    return AveragedOperator(
        fn,
        cert,
        label=label or "weighted(" + ", ".join(op.label for op in ops) + ")",
        dim_in=dims.pop() if dims else None,
        dim_out=ops[0].dim_out,
        vectorized=vectorized,
    )


def promote_lipschitz(fn, mu, label="lipschitz", dim=None, vectorized=False):
    """Certify a ``mu``-Lipschitz map with ``mu < 1`` as ``(1 + mu)/2``-averaged."""
    mu = float(mu)
    if not (0.0 <= mu < 1.0):
        raise ValueError(f"promotion needs 0 <= mu < 1, got {mu}")
    cert = GammaCertificate((1.0 + mu) / 2.0, "derived_formula", lipschitz=mu)
    return AveragedOperator(fn, cert, label=label, dim_in=dim, dim_out=dim, vectorized=vectorized)


def smallest_gamma(X, Y, OX, OY, tol=DEFAULT_TOL):
    """Smallest gamma for which every sampled pair satisfies the inequality.

    Each pair with ``|O(x) - O(y)|^2 <= |x - y|^2`` constrains gamma from
    below by ``1 / (1 + q)`` with
    ``q = (|x - y|^2 - |O(x) - O(y)|^2) / |(x - O(x)) - (y - O(y))|^2``;
    this is the exact end point a bisection on gamma would converge to.
    Returns ``None`` when some pair is expanded by more than ``tol``.
    """
    dx = X - Y
    do = OX - OY
    nx = np.sum(dx * dx, axis=1)
    no = np.sum(do * do, axis=1)
    if np.any(no - nx > tol):
        return None
    if OX.shape[1] != X.shape[1]:
        return 1.0
    dr = dx - do
    nr = np.sum(dr * dr, axis=1)
    active = nr > 0
    if not np.any(active):
        return GAMMA_FLOOR
    q = np.maximum(nx[active] - no[active], 0.0) / nr[active]
    return float(min(1.0, max(np.max(1.0 / (1.0 + q)), GAMMA_FLOOR)))


def estimate_gamma(op, box=None, samples=DEFAULT_PAIRS, rng_seed=DEFAULT_SEED, dim=None,
                   tol=DEFAULT_TOL):
    """Numerically estimate an averagedness certificate on a sampling box.

    The Lipschitz constant is estimated by the largest difference quotient
    over sampled pairs.  A strict contraction estimate ``mu < 1`` is promoted
    to ``(1 + mu)/2``; otherwise the smallest gamma that satisfies the
    averagedness inequality on the sample is returned.

    Raises
    ------
    NotCertifiableError
        If some sampled pair is expanded by the map.
    """
    samples = check_positive_int(samples, "samples", minimum=2)
    if dim is None:
        dim = getattr(op, "dim_in", None)
    if box is None:
        if dim is None:
            raise ValueError("need a box or a dimension to sample")
        box = DEFAULT_BOX
    lo, hi = box
    if dim is None:
        dim = np.size(lo)
    X, Y = sample_pairs(dim, samples, (lo, hi), rng_seed)
    OX = _batch_eval(op, X)
    OY = _batch_eval(op, Y)
    if not (np.all(np.isfinite(OX)) and np.all(np.isfinite(OY))):
        raise NotCertifiableError("map produced non-finite values on the sample")
    nx = np.linalg.norm(X - Y, axis=1)
    no = np.linalg.norm(OX - OY, axis=1)
    ok = nx > 0
    quotients = no[ok] / nx[ok]
    mu = float(np.max(quotients))
    if mu < 1.0:
        gamma = (1.0 + mu) / 2.0
        note = "promoted from sampled Lipschitz estimate"
    else:
        gamma = smallest_gamma(X, Y, OX, OY, tol=tol)
        if gamma is None:
            k = int(np.argmax(np.where(ok, no / np.where(ok, nx, 1.0), 0.0)))
            raise NotCertifiableError(
                f"map expands distances on the sample (Lipschitz estimate {mu:.6g})",
                lipschitz=mu,
                witness=(X[k].copy(), Y[k].copy()),
            )
        note = "smallest gamma satisfying the inequality on the sample"
    viol = averaged_violations(X, Y, OX, OY, gamma) if OX.shape[1] == X.shape[1] or gamma == 1.0 else None
    max_violation = float(np.max(viol)) if viol is not None else None
    return GammaCertificate(
        gamma,
        "numeric_estimate",
        samples=samples,
        max_violation=max_violation,
        lipschitz=mu,
        note=note,
    )


def certify(fn, box=None, samples=DEFAULT_PAIRS, rng_seed=DEFAULT_SEED, dim=None, label="map",
            vectorized=False):
    """Wrap ``fn`` as an AveragedOperator carrying a numeric certificate."""
    probe = AveragedOperator(fn, GammaCertificate(1.0), label=label, dim_in=dim, vectorized=vectorized)
    cert = estimate_gamma(probe, box=box, samples=samples, rng_seed=rng_seed, dim=dim)
    return AveragedOperator(fn, cert, label=label, dim_in=dim, dim_out=dim, vectorized=vectorized)


def identity_operator(dim=None):
    return AveragedOperator(
        lambda x: np.array(x, dtype=float, copy=True),
        GammaCertificate(1.0, "closed_form_paper"),
        label="identity",
        dim_in=dim,
        dim_out=dim,
        vectorized=True,
    )


def linear_gamma(W, tol=1e-12):
    """Smallest gamma for which ``x -> W x`` (square ``W``) is gamma-averaged.

    Uses that ``W`` is gamma-averaged iff ``|W - (1 - gamma) I|_2 <= gamma``,
    a condition monotone in gamma, so bisection applies.  Returns ``None`` when
    ``W`` is not nonexpansive.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    n, m = W.shape
    if n != m:
        raise ValueError("linear_gamma needs a square matrix")
    eye = np.eye(n)

    def feasible(g):
        return np.linalg.norm(W - (1.0 - g) * eye, 2) <= g + tol

    if not feasible(1.0):
        return None
    if feasible(GAMMA_FLOOR):
        return GAMMA_FLOOR
    lo, hi = GAMMA_FLOOR, 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return hi
