"""Synthetic acceptance benchmark: scripted strategies against the all-data baseline."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .agent import ScriptedBackend
from .forecast import ModelConfig
from .neighbors import road_graph_from_metadata
from .orchestrator import QueryConfig, Workspace, pretrain_foundation, run_baselines, run_query
from .report import improvement_pct
from .tsdata import SyntheticSpec, generate_synthetic

logger = logging.getLogger(__name__)


@dataclass
class KindOutcome:
    """Per-target improvement (%) of each strategy over the all-data baseline, on validation MAE."""

    kind: str
    targets: list
    gains: dict = field(default_factory=dict)
    seconds: float = 0.0

    def median(self, strategy: str) -> float:
        return float(np.median(self.gains[strategy]))


def pick_targets(n_locations: int, n_targets: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    return sorted(int(t) for t in rng.choice(n_locations, size=min(n_targets, n_locations), replace=False))


def run_benchmark(kinds=("linear", "mlp", "sparsetsf"), n_targets: int = 20, seed: int = 0,
                  synth: SyntheticSpec = SyntheticSpec(), strategies=("oracle", "random"),
                  workspace: Workspace = None) -> dict:
    """Run every strategy on ``n_targets`` seeded targets per model kind.

    One workspace is shared across kinds so neighbor sets and discord scores
    are computed once.
    """
    if workspace is None:
        store, db, labels = generate_synthetic(synth)
        workspace = Workspace(store, db, road_graph_from_metadata(db), labels=labels)
    ws = workspace
    targets = pick_targets(ws.store.n_locations, n_targets, seed)
    targets = [int(ws.store.location_ids[t]) for t in targets]
    out = {}
    for kind in kinds:
        t0 = time.perf_counter()
        mc = ModelConfig(kind=kind, input_len=ws.input_len, horizon=ws.horizon, seed=seed)
        foundation = pretrain_foundation(ws, mc)
        res = KindOutcome(kind, targets, {s: [] for s in strategies})
        for target in targets:
            qc = QueryConfig(target_id=target, model=mc, seed=seed)
            base = run_baselines(ws, foundation, qc).alldata_val["mae"]
            for strategy in strategies:
                backend = ScriptedBackend(strategy, seed, ws.labels, qc.n_select)
                r = run_query(ws, foundation, replace(qc, backend=strategy), backend)
                res.gains[strategy].append(improvement_pct(base, r.best.mae))
        res.seconds = time.perf_counter() - t0
        logger.info("%s: %s in %.1fs", kind,
                    ", ".join(f"{s} median {res.median(s):.2f}%" for s in strategies), res.seconds)
        out[kind] = res
    return out
