from contextlib import contextmanager

import numpy as np
import pytest

from projpost.dataflow import Dataset, gen_toy_regression, gen_two_moons
from projpost.netcore import ArchitectureSpec, build_network
from projpost.trainer import TrainConfig, train_map


def linear_net(I=2, O=1):
    """Bias-free single linear layer, f(theta, x) = W x."""
    return build_network(ArchitectureSpec(I, (), O, bias=False), 0)


@pytest.fixture(scope="session")
def tiny_mlp():
    """Untrained 24-7-2 relu net (P = 191) on 32 standard-normal inputs."""
    net, theta = build_network(ArchitectureSpec(24, (7,), 2, "relu"), 1)
    X = np.random.default_rng(0).standard_normal((32, 24))
    targets = np.random.default_rng(1).standard_normal((32, 2))
    return net, theta, Dataset(X, targets, "regression", "tiny")


@pytest.fixture(scope="session")
def toy_fit():
    """1-10-10-1 tanh net fitted to the two-cluster sine data."""
    ds = gen_toy_regression(20, 0.05, 0)
    net, theta0 = build_network(ArchitectureSpec(1, (10, 10), 1, "tanh"), 0)
    cfg = TrainConfig(epochs=2000, batch_size=16, learning_rate=1e-2)
    return net, train_map(net, theta0, ds, "mse", cfg).theta, ds


@pytest.fixture(scope="session")
def moons_fit():
    """2-16-16-2 relu classifier trained on 40 two-moons points."""
    ds = gen_two_moons(40, 0.1, 0)
    net, theta0 = build_network(ArchitectureSpec(2, (16, 16), 2, "relu"), 0)
    return net, train_map(net, theta0, ds, "cross_entropy", TrainConfig(epochs=500, batch_size=32)).theta, ds


GATE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[GATE_KEY] = {}


@pytest.fixture
def gate(request):
    """Context manager recording one part of a numbered acceptance criterion."""
    results = request.config.stash[GATE_KEY]

    @contextmanager
    def check(number: int, title: str):
        ok = False
        try:
            yield
            ok = True
        finally:
            results.setdefault(number, []).append((title, ok))
            print(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title}")

    return check


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[GATE_KEY]
    if not results:
        return
    terminalreporter.section("acceptance gate")
    for number in sorted(results):
        parts = results[number]
        status = "PASS" if all(ok for _, ok in parts) else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}: " + "; ".join(t for t, _ in parts))
