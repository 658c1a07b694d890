import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

CRITERIA = {
    1: "averagedness table reproduction",
    2: "prox-activation equivalence",
    3: "composition and weighted-sum calculus",
    4: "KM convergence and Fejer monotonicity",
    5: "Banach-Picard linear rate",
    6: "Nash-equilibrium characterization",
    7: "cyclic projections onto convex sets",
    8: "layerwise training",
    9: "federated training",
    10: "Gram-Schmidt network",
    11: "decoder blocks",
    12: "determinism",
}

_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    n = marker.args[0]
    _results.setdefault(n, []).append((item.name, rep.passed))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        parts = _results[n]
        ok = all(p for _, p in parts)
        failed = [name for name, p in parts if not p]
        line = f"criterion {n:>2} ({CRITERIA.get(n, '')}): {'PASS' if ok else 'FAIL'}"
        if failed:
            line += f"  [failing: {', '.join(failed)}]"
        terminalreporter.write_line(line)


def teacher_fixture(seed=0, s1=1.5, s2=0.5, T=8):
    """3 -> 2 -> 2 teacher with small biases and its inputs."""
    rng = np.random.default_rng(seed)
    teacher = [
        (s1 * rng.standard_normal((2, 3)), 0.1 * rng.standard_normal(2)),
        (s2 * rng.standard_normal((2, 2)), 0.1 * rng.standard_normal(2)),
    ]
    X = rng.standard_normal((T, 3))
    return teacher, X


@pytest.fixture(scope="session")
def sigmoid_problem():
    from nashnet.training import TrainingProblem

    teacher, X = teacher_fixture()
    return TrainingProblem.from_teacher(teacher, ["sigmoid", "sigmoid"], X)


@pytest.fixture(scope="session")
def trained_sigmoid(sigmoid_problem):
    from nashnet.training import train

    return train(sigmoid_problem)


NET_ACTIVATIONS = ("relu", "tanh", "sigmoid", "softsign", "arctan", "metallic_mean", "elu", "hard_tanh")


def random_certified_network(seed, max_depth=4, max_dim=8):
    """Seeded network with ``L <= max_depth`` layers and widths ``<= max_dim``.

    Weight norms are drawn in [0.3, 0.95] so a certificate always exists.
    """
    from nashnet.network import NetworkSpec, layer

    rng = np.random.default_rng(seed)
    L = int(rng.integers(1, max_depth + 1))
    d0 = int(rng.integers(1, max_dim + 1))
    dims = [d0] + [int(rng.integers(1, max_dim + 1)) for _ in range(L - 1)] + [d0]
    layers = []
    for l in range(L):
        W = rng.standard_normal((dims[l + 1], dims[l]))
        W *= rng.uniform(0.3, 0.95) / np.linalg.norm(W, 2)
        b = rng.standard_normal(dims[l + 1])
        layers.append(layer(W, b, NET_ACTIVATIONS[int(rng.integers(len(NET_ACTIVATIONS)))]))
    return NetworkSpec(5.0 * rng.standard_normal(d0), layers, label=f"random-{seed}")
