"""Walk one query through the loop on a small synthetic workspace.

Shows the neighbor lists, the first prompt, each round's proposals and the
final comparison with the two baselines.  Runs in a few seconds.

    python demos/synthetic_query.py
"""

import logging

from dcats.agent import ScriptedBackend, build_initial_prompt, make_context
from dcats.forecast import ModelConfig
from dcats.neighbors import road_graph_from_metadata
from dcats.orchestrator import QueryConfig, Workspace, pretrain_foundation, run_baselines, run_query
from dcats.report import improvement_pct
from dcats.tsdata import SyntheticSpec, generate_synthetic

logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")

store, db, labels = generate_synthetic(SyntheticSpec(n_clusters=3, series_per_cluster=6, n_steps=2880, seed=4))
ws = Workspace(store, db, road_graph_from_metadata(db), labels=labels)
target = 4
print(f"{store.n_locations} series; target {target} is in cluster {labels[target]}")

ns = ws.neighbor_sets(target, k=5)
for kind in ("road", "pattern", "geodetic"):
    print(f"  {kind:9s}", [(e.location_id, round(e.value, 3)) for e in ns.by_kind(kind)])

prompt = build_initial_prompt(make_context(db, ns, 5))
print("\nfirst 600 characters of the opening prompt:\n" + prompt[:600] + " ...\n")

mc = ModelConfig(kind="linear", input_len=ws.input_len, horizon=ws.horizon)
foundation = pretrain_foundation(ws, mc)
qc = QueryConfig(target_id=target, model=mc, seed=1)
base = run_baselines(ws, foundation, qc)
result = run_query(ws, foundation, qc, ScriptedBackend("oracle", 1, labels), baseline_mae=base.alldata_val["mae"])

for r in result.records:
    mates = sum(labels[i] == labels[target] for i in r.proposal.neighbor_ids)
    print(f"round {r.round_index} #{r.proposal.index}: {list(r.proposal.neighbor_ids)} "
          f"({mates} same-cluster) val MAE {r.mae:.4f}")
print(f"\nbest-so-far per round: {[round(v, 4) for v in result.best_mae_per_round]}")
print(f"validation MAE: foundation {base.foundation_val['mae']:.4f}, all-data {base.alldata_val['mae']:.4f}, "
      f"selected {result.best.mae:.4f} ({improvement_pct(base.alldata_val['mae'], result.best.mae):.1f}% better)")
print(f"test MAE of the selected model: {result.test_metrics['mae']:.4f} "
      f"(all-data {base.alldata_test['mae']:.4f})")
