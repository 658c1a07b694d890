"""Transformer-decoder blocks as fixed-point maps on token matrices.

A token matrix has one row per sequence position and one column per
embedding dimension.  A decoder block maps it through causal attention with
a residual connection, a residual feedforward layer and a row-wise layer
normalization; the block maps are composed and iterated to a fixed point.
All functions accept extra leading batch axes.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._validation import as_matrix, as_vector, check_positive_int
from .activations import ELEMENTWISE
from .equilibrium import LayerGameState, verify_nash
from .network import DEFAULT_MAX_ITER, DEFAULT_TOL, LayerSpec, km_iterate, relaxed_iteration
from .operators import AveragedOperator, NotCertifiableError, compose, estimate_gamma

logger = logging.getLogger(__name__)

SOFTMAX_MODES = ("paper_global", "rowwise")
DEFAULT_LLM_SAMPLES = 2000
DEFAULT_LLM_BOX = (-20.0, 20.0)


def masked_softmax(A, mode="paper_global"):
    """Causal softmax of a square score matrix (or a batch of them).

    ``paper_global`` divides each entry ``(i, j)`` with ``i >= j`` by the sum
    of exponentials over all lower-triangular positions, so the whole matrix
    sums to one.  ``rowwise`` is the usual causal softmax where every row
    sums to one over ``j <= i``.  Entries above the diagonal are zero.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ValueError("masked_softmax needs square matrices")
    if mode not in SOFTMAX_MODES:
        raise ValueError(f"unknown softmax mode {mode!r}; valid: {SOFTMAX_MODES}")
    n = A.shape[-1]
    mask = np.tril(np.ones((n, n), dtype=bool))
    masked = np.where(mask, A, -np.inf)
    if mode == "paper_global":
        # a common shift cancels in the ratio, so the values are unchanged
        shift = np.max(masked, axis=(-2, -1), keepdims=True)
        E = np.where(mask, np.exp(masked - shift), 0.0)
        return E / np.sum(E, axis=(-2, -1), keepdims=True)
    shift = np.max(masked, axis=-1, keepdims=True)
    E = np.where(mask, np.exp(masked - shift), 0.0)
    return E / np.sum(E, axis=-1, keepdims=True)


def ov_read(w_ov):
    """Matrix applied on the right of ``S x`` for the output-value product.

    The primed output-value matrix is read as the transpose; changing this
    one line changes the reading everywhere.
    """
    return w_ov.T


@dataclass
class AttentionHead:
    w_qk: np.ndarray
    w_ov: np.ndarray

    def __post_init__(self):
        self.w_qk = as_matrix(self.w_qk, "w_qk")
        self.w_ov = as_matrix(self.w_ov, "w_ov", shape=self.w_qk.shape)
        if self.w_qk.shape[0] != self.w_qk.shape[1]:
            raise ValueError("attention matrices must be square")

    @property
    def d(self):
        return self.w_qk.shape[0]

    def __call__(self, x, mode="paper_global"):
        """Head output ``softmax*(x w_qk x^T) x w_ov^T`` (without the residual)."""
        xt = np.swapaxes(x, -1, -2)
        S = masked_softmax(x @ self.w_qk @ xt, mode)
        return S @ x @ ov_read(self.w_ov)

    def to_dict(self):
        return {"w_qk": self.w_qk, "w_ov": self.w_ov}


def _tokens(x, d=None):
    x = np.asarray(x, dtype=float)
    if x.ndim < 2:
        raise ValueError("token matrices need shape (n_tokens, d)")
    if d is not None and x.shape[-1] != d:
        raise ValueError(f"token width {x.shape[-1]} does not match model width {d}")
    if not np.all(np.isfinite(x)):
        raise ValueError("token matrix must be finite")
    return x


def attention_layer(x, heads, mode="paper_global"):
    """``x + sum_h head_h(x)``; heads are summed in list order."""
    heads = list(heads)
    x = _tokens(x, heads[0].d if heads else None)
    out = x.copy()
    for h in heads:
        if h.d != x.shape[-1]:
            raise ValueError("head width does not match the token matrix")
        out = out + h(x, mode)
    return out


def layer_norm(x, rho, zeta, eps=1e-5):
    """``rho + zeta (x - mean) / sqrt(var + eps)`` along the last axis.

    ``var`` uses the ``size - 1`` denominator, so rows need at least two
    entries.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < 2:
        raise ValueError("layer_norm needs at least two entries per row")
    if not eps > 0:
        raise ValueError("eps must be positive")
    rho = np.broadcast_to(np.asarray(rho, dtype=float), x.shape[-1:])
    zeta = np.broadcast_to(np.asarray(zeta, dtype=float), x.shape[-1:])
    c = x - np.mean(x, axis=-1, keepdims=True)
    var = np.sum(c * c, axis=-1, keepdims=True) / (x.shape[-1] - 1)
    return rho + zeta * c / np.sqrt(var + eps)


def feedforward(x, ff):
    """Residual feedforward ``x + r(x W^T + b)`` applied to every token row."""
    if ff is None:
        return np.array(x, dtype=float, copy=True)
    return x + np.asarray(ff.activation.fn(x @ ff.W.T + ff.b), dtype=float).reshape(x.shape)


@dataclass
class DecoderBlock:
    """Attention, residual feedforward and layer normalization on ``(n_tokens, d)`` inputs."""

    heads: Sequence
    ff: Optional[LayerSpec]
    rho: np.ndarray
    zeta: np.ndarray
    eps: float = 1e-5
    n_tokens: int = 1
    softmax_mode: str = "paper_global"

    def __post_init__(self):
        self.heads = [h if isinstance(h, AttentionHead) else AttentionHead(**h) for h in self.heads]
        self.rho = as_vector(self.rho, "rho")
        self.d = self.rho.size
        self.zeta = as_vector(self.zeta, "zeta", dim=self.d)
        self.n_tokens = check_positive_int(self.n_tokens, "n_tokens")
        if self.d < 2:
            raise ValueError("layer normalization needs width d >= 2")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.softmax_mode not in SOFTMAX_MODES:
            raise ValueError(f"unknown softmax mode {self.softmax_mode!r}; valid: {SOFTMAX_MODES}")
        for h in self.heads:
            if h.d != self.d:
                raise ValueError("head width does not match rho/zeta")
        if self.ff is not None:
            if self.ff.W.shape != (self.d, self.d):
                raise ValueError("feedforward weight must be d x d")
            if self.ff.activation.arity != ELEMENTWISE:
                raise ValueError("feedforward activation must act elementwise")

    @property
    def dim(self):
        return self.n_tokens * self.d

    def tokens(self, x):
        """Block map on token matrices (batch axes allowed)."""
        y = attention_layer(x, self.heads, self.softmax_mode) if self.heads else _tokens(x, self.d)
        return layer_norm(feedforward(y, self.ff), self.rho, self.zeta, self.eps)

    def __call__(self, v):
        """Block map on flattened token matrices; rows of a 2-D input are a batch."""
        v = np.asarray(v, dtype=float)
        lead = v.shape[:-1]
        out = self.tokens(v.reshape(lead + (self.n_tokens, self.d)))
        return out.reshape(lead + (self.dim,))

    def to_config(self):
        out = {
            "d": self.d,
            "n_tokens": self.n_tokens,
            "heads": [h.to_dict() for h in self.heads],
            "norm": {"rho": self.rho, "zeta": self.zeta, "eps": self.eps},
            "softmax_mode": self.softmax_mode,
        }
        if self.ff is not None:
            act = self.ff.activation
            out["ff"] = {"W": self.ff.W, "b": self.ff.b, "activation": act.kind, "params": dict(act.params)}
        return out

    to_dict = to_config

    @classmethod
    def from_config(cls, cfg):
        """Build from ``{d, n_tokens, heads, ff, norm, softmax_mode}``."""
        d = int(cfg["d"])
        ff = cfg.get("ff")
        spec = None
        if ff is not None:
            from .network import layer

            spec = layer(ff["W"], ff.get("b"), ff.get("activation", "identity"), **ff.get("params", {}))
        norm = cfg.get("norm", {})
        block = cls(
            heads=[AttentionHead(h["w_qk"], h["w_ov"]) for h in cfg.get("heads", [])],
            ff=spec,
            rho=norm.get("rho", np.zeros(d)),
            zeta=norm.get("zeta", np.ones(d)),
            eps=norm.get("eps", 1e-5),
            n_tokens=int(cfg["n_tokens"]),
            softmax_mode=cfg.get("softmax_mode", "paper_global"),
        )
        if block.d != d:
            raise ValueError("norm parameters do not match d")
        return block


def random_block(d, n_tokens, scale, seed=0, n_heads=1, activation="tanh", eps=1e-5,
                 softmax_mode="paper_global"):
    """Block with standard-normal weights times ``scale``; ``zeta = scale`` and ``rho`` is random too."""
    rng = np.random.default_rng(seed)
    heads = [AttentionHead(scale * rng.standard_normal((d, d)), scale * rng.standard_normal((d, d)))
             for _ in range(n_heads)]
    from .network import layer

    ff = layer(scale * rng.standard_normal((d, d)), scale * rng.standard_normal(d), activation)
    rho = scale * rng.standard_normal(d)
    zeta = np.full(d, float(scale))
    return DecoderBlock(heads, ff, rho, zeta, eps=eps, n_tokens=n_tokens, softmax_mode=softmax_mode)


def embed(tokens, E):
    """Fixed linear embedding: each row ``u`` becomes ``E u``."""
    return np.asarray(tokens, dtype=float) @ np.asarray(E, dtype=float).T


def unembed(x, U):
    """Fixed linear unembedding, row-wise ``U x``."""
    return np.asarray(x, dtype=float) @ np.asarray(U, dtype=float).T


def decoder(blocks):
    """Composite map ``D``: the first block is applied first."""
    blocks = list(blocks)

    def D(v):
        for blk in blocks:
            v = blk(v)
        return v

    return D


def jacobian_probe(block, x0, direction=None, n_points=11, span=1.0, h=1e-6, seed=0):
    """Finite-difference Jacobians of the attention map along a segment.

    Returns the largest ``|J(s_k+1) - J(s_k)|_F / (s_k+1 - s_k)``, a crude
    Lipschitz-of-Jacobian figure used as a continuity diagnostic.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if direction is None:
        direction = np.random.default_rng(seed).standard_normal(x0.size)
    direction = direction / np.linalg.norm(direction)
    shape = (block.n_tokens, block.d)

    def att(v):
        return attention_layer(v.reshape(shape), block.heads, block.softmax_mode).reshape(-1)

    def jac(v):
        J = np.empty((v.size, v.size))
        for k in range(v.size):
            e = np.zeros(v.size)
            e[k] = h
            J[:, k] = (att(v + e) - att(v - e)) / (2 * h)
        return J

    ss = np.linspace(0.0, span, n_points)
    Js = [jac(x0 + s * direction) for s in ss]
    ds = ss[1] - ss[0]
    return max(float(np.linalg.norm(b - a) / ds) for a, b in zip(Js[:-1], Js[1:]))


@dataclass
class DecoderReport:
    certified: bool
    block_gammas: list
    gamma: Optional[float]
    lipschitz_estimates: list
    trace: object
    nash: Optional[object] = None
    warning: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def converged(self):
        return self.trace.converged

    def to_dict(self):
        out = {
            "certified": self.certified,
            "block_gammas": self.block_gammas,
            "gamma": self.gamma,
            "lipschitz_estimates": self.lipschitz_estimates,
            "warning": self.warning,
            "iteration": self.trace.to_dict(),
            "nash": None if self.nash is None else self.nash.to_dict(),
        }
        out.update(self.extra)
        return out


def decoder_fixpoint(blocks, x0, schedule=None, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                     box=DEFAULT_LLM_BOX, samples=DEFAULT_LLM_SAMPLES, seed=0):
    """Certify each block numerically, compose, and iterate ``D`` to a fixed point.

    When every block certifies, the composite carries ``gamma`` from the
    composition rule and a checked KM iteration runs.  Otherwise the report
    records the failure and the Lipschitz estimates, and the iteration runs
    unchecked with the given schedule (default 1/2) after a warning.

    Returns
    -------
    DecoderReport
    """
    blocks = list(blocks)
    if not blocks:
        raise ValueError("need at least one block")
    dim = blocks[0].dim
    for blk in blocks:
        if blk.dim != dim:
            raise ValueError("all blocks must act on the same token shape")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != dim:
        raise ValueError(f"x0 has {x0.size} entries, blocks expect {dim}")
    ops, gammas, lips, failure = [], [], [], None
    for k, blk in enumerate(blocks):
        probe = AveragedOperator(blk, None, label=f"block{k + 1}", dim_in=dim, dim_out=dim, vectorized=True)
        try:
            cert = estimate_gamma(probe, box=box, samples=samples, rng_seed=[seed, k], dim=dim)
        except NotCertifiableError as err:
            failure = failure or f"block {k + 1}: {err}"
            gammas.append(None)
            lips.append(err.lipschitz)
            continue
        gammas.append(cert.gamma)
        lips.append(cert.lipschitz)
        ops.append(AveragedOperator(blk, cert, label=f"block{k + 1}", dim_in=dim, dim_out=dim, vectorized=True))
    D = decoder(blocks)
    if failure is None:
        composite = compose(list(reversed(ops)), label="decoder")
        trace = km_iterate(composite, tol=tol, max_iter=max_iter, schedule=schedule, x0=x0)
        certified, gamma, warning = True, composite.gamma, ""
    else:
        warning = f"decoder is not certifiable on the sampled box ({failure}); iterating unchecked"
        logger.warning(warning)
        lam = 0.5 if schedule is None else schedule
        step = lam if callable(lam) else (lambda t: float(lam))
        trace = relaxed_iteration(D, x0, step, tol=tol, max_iter=max_iter)
        certified, gamma = False, None
    nash = None
    if trace.converged:
        states, v = [], trace.x_final
        for blk in blocks:
            v = blk(v)
            states.append(v)
        nash = verify_nash(LayerGameState(states, blocks), tol=tol)
    return DecoderReport(certified, gammas, gamma, lips, trace, nash, warning)
