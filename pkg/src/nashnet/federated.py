"""In-process simulation of federated layerwise training.

Servers broadcast parameters, eligible clients train for ``tau`` epochs on
data only they can read, and servers aggregate what comes back.  The server
side only ever handles :class:`ClientUpdate` objects, which carry parameters
and residual summaries but no samples.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._validation import check_weights
from .equilibrium import LayerGameState, verify_nash
from .network import LayerSpec
from .operators import weighted_sum
from .serialization import dumps_line
from .training import DEFAULT_GAMMA, _copy_theta, train, vi_operator, vi_residual

logger = logging.getLogger(__name__)

RULES = ("parameter_mean", "parameter_weighted", "operator_weighted")


class _PrivateData:
    """Holds a client's training problem; opening it needs the owner's key."""

    __slots__ = ("_owner_key", "_problem")

    def __init__(self, key, problem):
        object.__setattr__(self, "_owner_key", key)
        object.__setattr__(self, "_problem", problem)

    def open(self, key):
        if key is not self._owner_key:
            raise PermissionError("client data is only readable by its owner")
        return self._problem

    def __setattr__(self, name, value):
        raise AttributeError("private data is read-only")

    def __repr__(self):
        return "<private client data>"

    def __reduce__(self):
        raise TypeError("private client data cannot be serialized")


@dataclass(frozen=True)
class ClientUpdate:
    """What a client sends back: parameters and scalar summaries only."""

    client_id: str
    theta: tuple
    n_samples: int
    residual_before: tuple
    residual_after: tuple


class Client:
    """A data holder that trains locally and reports parameters.

    Parameters
    ----------
    client_id : str
    problem : TrainingProblem or None
        Local data; ``None`` models a client with an empty dataset, which is
        skipped with a log entry.
    tau : int
        Local epochs per round.
    """

    def __init__(self, client_id, problem, tau=1, gamma=DEFAULT_GAMMA):
        if int(tau) < 1:
            raise ValueError("tau must be at least 1")
        self.client_id = str(client_id)
        self.tau = int(tau)
        self.gamma = float(gamma)
        self.__key = object()
        self.__data = _PrivateData(self.__key, problem)
        self.n_samples = 0 if problem is None else int(problem.T)

    def _problem(self):
        return self.__data.open(self.__key)

    @property
    def has_data(self):
        return self.n_samples > 0

    def local_train(self, theta, tau=None, gamma=None):
        """Train ``tau`` epochs from the broadcast parameters; ``None`` if no data."""
        if not self.has_data:
            logger.info("client %s has no local data; skipped", self.client_id)
            return None
        problem = self._problem()
        tau = self.tau if tau is None else int(tau)
        gamma = self.gamma if gamma is None else float(gamma)
        before = tuple(vi_residual(problem, theta, l) for l in range(problem.depth))
        state, _ = train(problem, gamma=gamma, tol=0.0, max_steps=tau, theta=theta)
        after = tuple(state.layer_residuals[-1])
        frozen = tuple((W.copy(), b.copy()) for W, b in state.theta)
        return ClientUpdate(self.client_id, frozen, self.n_samples, before, after)

    def zero_theta(self):
        """Zero parameters shaped for the local architecture (no data leaves the client)."""
        if not self.has_data:
            raise ValueError(f"client {self.client_id} has no data to infer layer shapes")
        return self._problem().zero_theta()

    def vi_vectors(self, theta):
        """Per-layer VI operator values at ``theta`` on local data (uniform local weights)."""
        if not self.has_data:
            return None
        problem = self._problem()
        return [vi_operator(problem, theta, l) for l in range(problem.depth)]

    def local_nash(self, theta, activations, tol=1e-8):
        """Check locally that every sample's target states are best responses under ``theta``.

        Returns ``(passed, max_residual)``; the states themselves stay on the client.
        """
        if not self.has_data:
            return True, 0.0
        problem = self._problem()
        layers = [LayerSpec(W, b, act) for (W, b), act in zip(theta, activations)]
        targets = problem.targets()
        worst = 0.0
        for t in range(problem.T):
            state = LayerGameState([targets[l][t] for l in range(problem.depth)], layers)
            rep = verify_nash(state, tol=tol, x0=problem.X[t], deviations=0)
            worst = max(worst, max(rep.per_layer_residual))
        return worst <= tol, worst

    def local_output_error(self, theta):
        if not self.has_data:
            return 0.0
        problem = self._problem()
        return float(np.max(np.abs(problem.predict(theta) - problem.y_L)))


def client_local_train(client, model_from_server, tau=None, gamma=None):
    """Run a client's local training from the server's parameters."""
    return client.local_train(_copy_theta(list(model_from_server)), tau=tau, gamma=gamma)


@dataclass
class AggregationRule:
    kind: str = "parameter_mean"
    weights: Optional[Sequence] = None

    def __post_init__(self):
        if self.kind not in RULES:
            raise ValueError(f"unknown aggregation rule {self.kind!r}; valid: {RULES}")
        if self.weights is not None:
            self.weights = check_weights(self.weights, atol=1e-12)


def _weighted_entries(arrays, weights):
    """Entrywise ``sum_c w_c a_c`` with exactly rounded sums."""
    stack = np.stack([np.asarray(a, dtype=float) for a in arrays])
    flat = stack.reshape(len(arrays), -1)
    out = np.array([math.fsum(w * v for w, v in zip(weights, col)) for col in flat.T])
    return out.reshape(stack.shape[1:])


def _mean_entries(arrays):
    stack = np.stack([np.asarray(a, dtype=float) for a in arrays])
    flat = stack.reshape(len(arrays), -1)
    out = np.array([math.fsum(col) / len(arrays) for col in flat.T])
    return out.reshape(stack.shape[1:])


def aggregate(rule, contributions):
    """Combine client contributions.

    ``parameter_mean`` and ``parameter_weighted`` take parameter lists
    ``[(W_1, b_1), ...]`` (or bare arrays) and return the same structure;
    ``operator_weighted`` takes averaged operators and returns their convex
    combination with ``gamma = sum_c w_c gamma_c``.
    """
    contributions = list(contributions)
    if not contributions:
        raise ValueError("no contributions to aggregate")
    if isinstance(rule, str):
        rule = AggregationRule(rule)
    k = len(contributions)
    if rule.kind == "operator_weighted":
        w = rule.weights if rule.weights is not None else np.full(k, 1.0 / k)
        return weighted_sum(contributions, w)
    if k == 1:
        return _copy_structure(contributions[0])
    if rule.kind == "parameter_weighted":
        w = rule.weights if rule.weights is not None else np.full(k, 1.0 / k)
        w = check_weights(w, n=k)
        combine = lambda arrays: _weighted_entries(arrays, w)  # noqa: E731
    else:
        combine = _mean_entries
    first = contributions[0]
    if isinstance(first, np.ndarray) or np.isscalar(first):
        return combine(contributions)
    return [
        (combine([c[l][0] for c in contributions]), combine([c[l][1] for c in contributions]))
        for l in range(len(first))
    ]


def _copy_structure(c):
    if isinstance(c, np.ndarray) or np.isscalar(c):
        return np.array(c, dtype=float, copy=True)
    return [(np.array(W, dtype=float, copy=True), np.array(b, dtype=float, copy=True)) for W, b in c]


def _flatten(theta):
    return np.concatenate([np.concatenate([np.ravel(W), np.ravel(b)]) for W, b in theta])


@dataclass
class ServerModel:
    """A server's architecture and current parameters."""

    server_id: str
    activations: list
    theta: list
    client_ids: list
    rule: AggregationRule = field(default_factory=AggregationRule)

    def __post_init__(self):
        self.server_id = str(self.server_id)
        self.client_ids = [str(c) for c in self.client_ids]
        if isinstance(self.rule, str):
            self.rule = AggregationRule(self.rule)
        if self.rule.kind == "operator_weighted":
            raise ValueError("servers aggregate parameters; operator averaging applies to activations only")


@dataclass
class FederatedTopology:
    """Servers, clients and the round protocol.

    ``selection`` is ``"all"`` or ``"random_subset"`` (each round a seeded
    subset of size ``ceil(subset_fraction * n)``); ``dropout`` is the
    probability that a selected client fails to report.
    """

    servers: list
    clients: dict
    tau: int = 1
    gamma: float = DEFAULT_GAMMA
    seed: int = 0
    selection: str = "all"
    subset_fraction: float = 1.0
    dropout: float = 0.0

    def __post_init__(self):
        if self.selection not in ("all", "random_subset"):
            raise ValueError("selection must be 'all' or 'random_subset'")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must lie in [0, 1)")
        if not (0.0 < self.subset_fraction <= 1.0):
            raise ValueError("subset_fraction must lie in (0, 1]")
        if isinstance(self.clients, (list, tuple)):
            self.clients = {c.client_id: c for c in self.clients}
        for s in self.servers:
            missing = [c for c in s.client_ids if c not in self.clients]
            if missing:
                raise ValueError(f"server {s.server_id} references unknown clients {missing}")


def _eligible(topology, server, rnd, s_index):
    ids = list(server.client_ids)
    rng = np.random.default_rng([topology.seed, rnd, s_index])
    if topology.selection == "random_subset":
        k = max(1, math.ceil(topology.subset_fraction * len(ids)))
        pick = np.sort(rng.choice(len(ids), size=k, replace=False))
        ids = [ids[i] for i in pick]
    dropped = []
    if topology.dropout > 0:
        keep = rng.uniform(size=len(ids)) >= topology.dropout
        dropped = [c for c, k in zip(ids, keep) if not k]
        ids = [c for c, k in zip(ids, keep) if k]
    return ids, dropped


def _global_vi(clients, theta):
    """Union VI residual per layer, combining per-client vectors by sample count."""
    vecs = [(c.n_samples, c.vi_vectors(theta)) for c in clients if c.has_data]
    if not vecs:
        return []
    n_total = sum(n for n, _ in vecs)
    out = []
    for l in range(len(theta)):
        gW = _weighted_entries([v[l][0] for _, v in vecs], [n / n_total for n, _ in vecs])
        gb = _weighted_entries([v[l][1] for _, v in vecs], [n / n_total for n, _ in vecs])
        out.append(math.sqrt(float(np.sum(gW * gW) + np.sum(gb * gb))))
    return out


@dataclass
class FederatedResult:
    log: list
    servers: list

    def jsonl(self):
        return "".join(dumps_line(entry) + "\n" for entry in self.log)


def run_rounds(topology, rounds):
    """Broadcast, local training, collection and aggregation for ``rounds`` rounds.

    Servers run independently.  Clients within a round are visited in id
    order, so the log is bit-identical for a fixed topology and seed.
    """
    if int(rounds) < 0:
        raise ValueError("rounds must be nonnegative")
    log = []
    for rnd in range(int(rounds)):
        for s_index, server in enumerate(topology.servers):
            ids, dropped = _eligible(topology, server, rnd, s_index)
            for c in dropped:
                logger.info("round %d: client %s dropped out", rnd, c)
            updates = []
            for cid in sorted(ids):
                upd = client_local_train(topology.clients[cid], server.theta, tau=topology.tau, gamma=topology.gamma)
                if upd is not None:
                    updates.append(upd)
            old = _flatten(server.theta)
            if updates:
                rule = server.rule
                if rule.kind == "parameter_weighted" and rule.weights is None:
                    n = np.array([u.n_samples for u in updates], dtype=float)
                    rule = AggregationRule("parameter_weighted", n / n.sum())
                server.theta = aggregate(rule, [list(u.theta) for u in updates])
            delta = float(np.linalg.norm(_flatten(server.theta) - old))
            members = [topology.clients[c] for c in sorted(server.client_ids)]
            log.append({
                "round": rnd,
                "server": server.server_id,
                "participating_clients": [u.client_id for u in updates],
                "dropped_clients": dropped,
                "residuals": {u.client_id: list(u.residual_after) for u in updates},
                "global_vi_residual": _global_vi(members, server.theta),
                "aggregate_norm_delta": delta,
            })
    return FederatedResult(log, topology.servers)


def federated_nash_check(topology, tol=1e-8):
    """Each client checks the server model against its own layer states."""
    out = {}
    for server in topology.servers:
        per_client = {}
        for cid in sorted(server.client_ids):
            ok, worst = topology.clients[cid].local_nash(server.theta, server.activations, tol=tol)
            per_client[cid] = {"passed": bool(ok), "max_residual": worst}
        out[server.server_id] = per_client
    return out
