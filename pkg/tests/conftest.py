import numpy as np
import pytest

from callosum.neural.train import TrainConfig
from callosum.pipeline import PipelineConfig, train_callosum
from callosum.stgraph import ForecastTask, STGraph, generate_synthetic


def random_digraph(rng, n, p=0.35, symmetric=False):
    a = (rng.random((n, n)) < p).astype(np.int8)
    np.fill_diagonal(a, 0)
    if symmetric:
        a = np.maximum(a, a.T)
    return a


def random_graph(rng, n, t=60, f=1, p=0.35, symmetric=False):
    return STGraph(adjacency=random_digraph(rng, n, p, symmetric),
                   features=rng.normal(size=(t, n, f)),
                   node_ids=tuple(f"v{i}" for i in range(n)))


TINY = PipelineConfig(
    task=ForecastTask(horizon=2, window=16, lookback=6),
    base_hidden=6, ganglion_width=8,
    sub_train=TrainConfig(learning_rate=0.05, epochs=3, batch=64),
    global_train=TrainConfig(learning_rate=0.05, epochs=2, batch=64, stop_loss=0.01),
)


@pytest.fixture(scope="session")
def small_graph():
    graph, _ = generate_synthetic(16, 240, 3, 0.3)
    return graph


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def small_ensemble(small_graph):
    return train_callosum(small_graph, TINY, seed=11)


# criterion number -> (passed, detail); filled by the acceptance suite
ACCEPTANCE = {}


def report_criterion(number, name, passed, detail=""):
    ACCEPTANCE[number] = (name, bool(passed), detail)
    print(f"CRITERION {number:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(
            f"CRITERION {number:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}")
