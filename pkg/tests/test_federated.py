import ast
import inspect
import pickle
import textwrap

import numpy as np
import pytest
from conftest import teacher_fixture
from hypothesis import given
from hypothesis import strategies as st

from nashnet import federated
from nashnet.activations import make_activation
from nashnet.cli import load_config
from nashnet.federated import (
    AggregationRule,
    Client,
    ClientUpdate,
    FederatedTopology,
    ServerModel,
    aggregate,
    client_local_train,
    federated_nash_check,
    run_rounds,
)
from nashnet.operators import AveragedOperator, GammaCertificate
from nashnet.serialization import dumps
from nashnet.training import TrainingProblem, train


def problem_for(teacher, X, acts=("sigmoid", "sigmoid")):
    return TrainingProblem.from_teacher(teacher, list(acts), X)


def topology(clients, acts, tau, gamma=0.5, rule="parameter_mean", **kw):
    zero = next(c for c in clients if c.has_data).zero_theta()
    server = ServerModel("s0", list(acts), zero, [c.client_id for c in clients], rule)
    return FederatedTopology([server], clients, tau=tau, gamma=gamma, **kw)


def two_shard_topology():
    cfg = load_config("fixture:federated_two_shard", "federated")
    teacher = [(np.array(L["W"]), np.array(L["b"])) for L in cfg["teacher"]]
    clients = [Client(c["id"], problem_for(teacher, np.array(c["X"]), cfg["activations"]), tau=cfg["tau"])
               for c in cfg["clients"]]
    return topology(clients, cfg["activations"], cfg["tau"]), cfg


class TestAggregate:
    def test_parameter_mean_scalar(self):
        assert aggregate("parameter_mean", [np.array(2.0), np.array(4.0)]) == 3.0

    def test_single_contribution_copied(self):
        theta = [(np.ones((2, 2)), np.zeros(2))]
        out = aggregate("parameter_mean", [theta])
        assert np.array_equal(out[0][0], theta[0][0]) and out[0][0] is not theta[0][0]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate("parameter_mean", [])

    def test_unknown_rule(self):
        with pytest.raises(ValueError):
            AggregationRule("median")

    def test_operator_weighted_gamma(self):
        ops = [AveragedOperator(np.tanh, GammaCertificate(0.5), dim_in=1, vectorized=True),
               AveragedOperator(np.tanh, GammaCertificate(0.75), dim_in=1, vectorized=True)]
        assert aggregate(AggregationRule("operator_weighted", [0.5, 0.5]), ops).gamma == 5 / 8

    def test_operator_weighted_on_catalog_activations(self):
        ops = [make_activation("sigmoid").operator(1), make_activation("tanh", lam=0.5).operator(1)]
        assert aggregate(AggregationRule("operator_weighted", [0.25, 0.75]), ops).gamma == 0.25 * 5 / 8 + 0.75 * 0.75

    def test_weighted_rule(self):
        out = aggregate(AggregationRule("parameter_weighted", [0.25, 0.75]), [np.array(0.0), np.array(4.0)])
        assert out == 3.0

    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=6), st.floats(-5, 5), st.floats(-1e3, 1e3))
    def test_mean_is_affine_equivariant(self, vals, a, c):
        base = aggregate("parameter_mean", [np.array(v) for v in vals])
        moved = aggregate("parameter_mean", [np.array(a * v + c) for v in vals])
        assert moved == pytest.approx(a * base + c, rel=1e-9, abs=1e-9)

    @given(st.permutations(range(4)))
    def test_mean_order_free(self, perm):
        vals = [np.array([0.1, 1e16]), np.array([0.2, 1.0]), np.array([0.3, -1e16]), np.array([0.4, 3.0])]
        a = aggregate("parameter_mean", vals)
        b = aggregate("parameter_mean", [vals[i] for i in perm])
        assert np.array_equal(a, b)


class TestClient:
    def test_already_fit_unchanged(self):
        teacher, X = teacher_fixture(T=4)
        c = Client("c", problem_for(teacher, X))
        upd = client_local_train(c, teacher, tau=1)
        assert all(np.array_equal(W, tW) and np.array_equal(b, tb) for (W, b), (tW, tb) in zip(upd.theta, teacher))

    def test_local_residual_decreases(self):
        teacher, X = teacher_fixture(T=4)
        c = Client("c", problem_for(teacher, X))
        upd = client_local_train(c, c.zero_theta(), tau=50)
        assert sum(upd.residual_after) < sum(upd.residual_before)

    def test_empty_client_skipped(self, caplog):
        c = Client("empty", None)
        with caplog.at_level("INFO"):
            assert c.local_train([]) is None
        assert "no local data" in caplog.text

    def test_two_shards_move_toward_union(self):
        topo, _ = two_shard_topology()
        server = topo.servers[0]
        members = [topo.clients[c] for c in server.client_ids]
        before = federated._global_vi(members, server.theta)
        for c in members:
            upd = client_local_train(c, server.theta, tau=10)
            after = federated._global_vi(members, list(upd.theta))
            assert sum(after) < sum(before)


class TestRounds:
    def test_single_client_equals_plain_training(self):
        teacher, X = teacher_fixture(T=8)
        prob = problem_for(teacher, X)
        tau, rounds = 5, 20
        topo = topology([Client("c0", prob, tau=tau)], ["sigmoid", "sigmoid"], tau)
        run_rounds(topo, rounds)
        state, _ = train(prob, tol=0.0, max_steps=tau * rounds)
        fed = [{"W": W, "b": b} for W, b in topo.servers[0].theta]
        plain = [{"W": W, "b": b} for W, b in state.theta]
        assert dumps(fed) == dumps(plain)

    def test_identical_data_symmetry(self):
        teacher, X = teacher_fixture(T=4)
        clients = [Client("a", problem_for(teacher, X)), Client("b", problem_for(teacher, X))]
        topo = topology(clients, ["sigmoid", "sigmoid"], 3)
        for _ in range(5):
            theta = topo.servers[0].theta
            solo = client_local_train(clients[0], theta, tau=3)
            run_rounds(topo, 1)
            assert dumps([list(p) for p in topo.servers[0].theta]) == dumps([list(p) for p in solo.theta])

    def test_two_shards_fit(self):
        topo, cfg = two_shard_topology()
        run_rounds(topo, cfg["rounds"])
        theta = topo.servers[0].theta
        errs = [topo.clients[c].local_output_error(theta) for c in ("a", "b")]
        assert max(errs) <= 1e-3

    def test_round_determinism(self):
        logs = []
        for _ in range(2):
            teacher, X = teacher_fixture(T=6)
            clients = [Client(f"c{k}", problem_for(teacher, X[2 * k:2 * k + 2])) for k in range(3)]
            topo = topology(clients, ["sigmoid", "sigmoid"], 2, selection="random_subset",
                            subset_fraction=0.67, dropout=0.3, seed=7)
            logs.append(run_rounds(topo, 10).jsonl())
        assert logs[0] == logs[1]

    def test_dropout_logged(self):
        teacher, X = teacher_fixture(T=6)
        clients = [Client(f"c{k}", problem_for(teacher, X[2 * k:2 * k + 2])) for k in range(3)]
        topo = topology(clients, ["sigmoid", "sigmoid"], 1, dropout=0.5, seed=1)
        log = run_rounds(topo, 10).log
        assert any(e["dropped_clients"] for e in log)
        for e in log:
            assert not set(e["dropped_clients"]) & set(e["participating_clients"])

    def test_nash_at_federated_fixed_point(self):
        teacher, X = teacher_fixture(T=4)
        clients = [Client("a", problem_for(teacher, X[:2])), Client("b", problem_for(teacher, X[2:]))]
        topo = topology(clients, ["sigmoid", "sigmoid"], 1)
        topo.servers[0].theta = [(W.copy(), b.copy()) for W, b in teacher]
        res = federated_nash_check(topo, tol=1e-8)
        assert all(v["passed"] for v in res["s0"].values())

    def test_operator_rule_rejected_for_servers(self):
        with pytest.raises(ValueError):
            ServerModel("s", ["sigmoid"], [], [], "operator_weighted")


SERVER_SIDE = [federated.run_rounds, federated.aggregate, federated.ServerModel, federated._global_vi,
               federated._eligible, federated.federated_nash_check, federated.FederatedTopology]
FORBIDDEN = {"_problem", "open", "_owner_key", "_PrivateData", "_Client__data", "_Client__key"}


class TestPrivacy:
    @pytest.mark.parametrize("obj", SERVER_SIDE, ids=lambda o: o.__name__)
    def test_server_code_never_touches_client_data(self, obj):
        tree = ast.parse(textwrap.dedent(inspect.getsource(obj)))
        names = {n.attr for n in ast.walk(tree) if isinstance(n, ast.Attribute)}
        names |= {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)}
        assert not names & FORBIDDEN

    def test_wrong_key_refused(self):
        teacher, X = teacher_fixture(T=2)
        c = Client("c", problem_for(teacher, X))
        with pytest.raises(PermissionError):
            c._Client__data.open(object())

    def test_private_data_opaque(self):
        teacher, X = teacher_fixture(T=2)
        c = Client("c", problem_for(teacher, X))
        data = c._Client__data
        assert "private" in repr(data)
        with pytest.raises(TypeError):
            pickle.dumps(data)
        with pytest.raises(AttributeError):
            data._problem = None

    def test_update_carries_no_samples(self):
        teacher, X = teacher_fixture(T=3)
        c = Client("c", problem_for(teacher, X))
        upd = c.local_train(c.zero_theta(), tau=2)
        fields = set(ClientUpdate.__dataclass_fields__)
        assert fields == {"client_id", "theta", "n_samples", "residual_before", "residual_after"}
        flat = np.concatenate([np.ravel(a) for p in upd.theta for a in p])
        for x in X:
            assert not any(np.array_equal(x, flat[i:i + x.size]) for i in range(flat.size - x.size + 1))

    def test_round_log_has_no_samples(self):
        topo, cfg = two_shard_topology()
        text = run_rounds(topo, 2).jsonl()
        for c in cfg["clients"]:
            for x in c["X"]:
                assert repr(x[0])[:12] not in text
