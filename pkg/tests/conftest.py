import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dcats.forecast import ModelConfig, TrainConfig  # noqa: E402
from dcats.neighbors import road_graph_from_metadata  # noqa: E402
from dcats.orchestrator import QueryConfig, Workspace, pretrain_foundation  # noqa: E402
from dcats.tsdata import SyntheticSpec, generate_synthetic  # noqa: E402

SMALL = SyntheticSpec(n_clusters=3, series_per_cluster=5, n_steps=1440, seed=3)
FAST_MODEL = ModelConfig(kind="linear", input_len=24, horizon=12, period=12, seed=0)
FAST_PRETRAIN = TrainConfig(epochs=3, learning_rate=1e-3)
FAST_FINETUNE = TrainConfig(epochs=2, learning_rate=1e-4)


@pytest.fixture(scope="session")
def small_synth():
    return generate_synthetic(SMALL)


@pytest.fixture(scope="session")
def small_ws(small_synth):
    store, db, labels = small_synth
    return Workspace(store, db, road_graph_from_metadata(db), input_len=24, horizon=12, labels=labels)


@pytest.fixture(scope="session")
def small_foundation(small_ws):
    return pretrain_foundation(small_ws, FAST_MODEL, FAST_PRETRAIN)


def fast_query(target, **kw):
    base = dict(target_id=target, model=FAST_MODEL, pretrain=FAST_PRETRAIN, finetune=FAST_FINETUNE,
                k=5)
    base.update(kw)
    return QueryConfig(**base)


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
