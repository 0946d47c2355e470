"""Command-line entry point: ``dcats <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 agent failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .agent import LLMBackend, ScriptedBackend, Transcript
from .config import BACKENDS, default_config_text, load_run_config
from .errors import AgentError, ConfigError, DataError, TrainingDivergedError
from .forecast import load_model, save_model
from .metadata import load_metadata, save_metadata
from .neighbors import load_road_graph, road_graph_from_metadata, save_neighbor_sets, save_road_graph
from .orchestrator import Workspace, pretrain_foundation, run_baselines, run_query
from .report import emit_report
from .tsdata import SyntheticSpec, generate_synthetic, load_store, save_store_binary, save_store_csv

logger = logging.getLogger("dcats")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_AGENT = 0, 2, 3, 4
_STRATEGY = {"oracle": "oracle", "greedy": "greedy-pattern", "random": "random"}

# workspace directory layout shared by `prepare` and `synth`
SERIES, META, BACKGROUND, GRAPH, LABELS = "series.bin", "metadata.csv", "background.txt", "graph.csv", "labels.csv"


def write_workspace(out, store, db, graph, labels=None) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_store_binary(store, out / SERIES)
    save_metadata(db, out / META, out / BACKGROUND)
    save_road_graph(graph, out / GRAPH)
    if labels is not None:
        with open(out / LABELS, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["location_id", "cluster"])
            for lid in sorted(labels):
                w.writerow([lid, labels[lid]])
    manifest = {"n_locations": store.n_locations, "n_steps": store.n_steps,
                "interval_minutes": store.interval_minutes, "steps_per_day": store.steps_per_day,
                "has_labels": labels is not None}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return out


def open_workspace(path, ratio=(6, 2, 2), input_len: int = 96, horizon: int = 12) -> Workspace:
    path = Path(path)
    if not (path / SERIES).exists():
        raise DataError(f"{path} is not a prepared workspace (run `dcats prepare` or `dcats synth` first)")
    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    store = load_store(path / SERIES, manifest["interval_minutes"], manifest["steps_per_day"])
    db = load_metadata(path / META, path / BACKGROUND)
    graph = load_road_graph(path / GRAPH)
    labels = None
    if (path / LABELS).exists():
        with open(path / LABELS, newline="", encoding="utf-8") as fh:
            labels = {int(r["location_id"]): int(r["cluster"]) for r in csv.DictReader(fh)}
    return Workspace(store, db, graph, tuple(ratio), input_len, horizon, labels)


def _workspace_for(args, cfg) -> Workspace:
    mc = cfg.query.model
    return open_workspace(args.workspace, cfg.ratio, mc.input_len, mc.horizon)


def cmd_prepare(args) -> int:
    store = load_store(args.data)
    db = load_metadata(args.meta, args.background)
    db.check_covers(store)
    graph = load_road_graph(args.graph) if args.graph else road_graph_from_metadata(db)
    write_workspace(args.out, store, db, graph)
    print(f"prepared {store.n_locations} locations x {store.n_steps} steps -> {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SyntheticSpec(n_clusters=args.clusters, series_per_cluster=args.per_cluster,
                         n_steps=args.steps, seed=args.seed)
    store, db, labels = generate_synthetic(spec)
    out = write_workspace(args.out, store, db, road_graph_from_metadata(db), labels)
    if args.csv:
        save_store_csv(store, out / "series.csv")
    print(f"synthetic workspace: {store.n_locations} series, {store.n_steps} steps -> {out}")
    return EXIT_OK


def cmd_neighbors(args) -> int:
    cfg = load_run_config(args.config)
    ws = _workspace_for(args, cfg)
    q = cfg.query
    sets = []
    for target in args.target:
        if target not in ws.store:
            raise DataError(f"unknown target location_id {target}")
        sets.append(ws.neighbor_sets(target, args.k or q.k, q.pattern_window, q.pattern_suffix, q.workers))
    save_neighbor_sets(sets, args.out)
    print(f"neighbor sets for {len(sets)} target(s) -> {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config)
    mc = replace(cfg.query.model, kind=args.model)
    ws = open_workspace(args.workspace, cfg.ratio, mc.input_len, mc.horizon)
    model = pretrain_foundation(ws, mc, cfg.query.pretrain, stride=cfg.query.stride)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_model(model, args.out)
    print(f"{args.model} foundation -> {args.out}")
    return EXIT_OK


def _read_targets(path) -> list:
    try:
        lines = Path(path).read_text(encoding="utf-8").split()
        return [int(tok) for tok in lines]
    except FileNotFoundError:
        raise DataError(f"targets file not found: {path}") from None
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def _make_backend(name: str, cfg, ws: Workspace):
    if name == "llm":
        llm = dict(cfg.llm)
        if not llm["endpoint"] or not llm["model"]:
            raise ConfigError("the llm backend needs llm.endpoint and llm.model in the run config")
        return LLMBackend(llm.pop("endpoint"), llm.pop("model"), **llm)
    if name == "oracle" and ws.labels is None:
        raise ConfigError("the oracle backend needs cluster labels (synthetic workspaces only)")
    return ScriptedBackend(_STRATEGY[name], cfg.query.seed, ws.labels, cfg.query.n_select)


def cmd_run(args) -> int:
    cfg = load_run_config(args.config)
    q = cfg.query
    overrides = {}
    if args.backend:
        overrides["backend"] = args.backend
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.max_rounds is not None:
        overrides["max_rounds"] = args.max_rounds
    if args.model:
        overrides["model"] = replace(q.model, kind=args.model)
    q = replace(q, **overrides)
    q.validate()
    if q.backend not in BACKENDS:
        raise ConfigError(f"unknown backend {q.backend!r}; choose from {BACKENDS}")
    cfg = replace(cfg, query=q)

    targets = list(args.target or []) + (_read_targets(args.targets) if args.targets else [])
    if not targets:
        raise ConfigError("give at least one --target or a --targets file")
    ws = _workspace_for(args, cfg)
    for t in targets:
        if t not in ws.store:
            raise DataError(f"unknown target location_id {t}")
    backend = _make_backend(q.backend, cfg, ws)

    if args.foundation:
        foundation = load_model(args.foundation)
        if foundation.config.kind != q.model.kind:
            raise ConfigError(f"foundation is a {foundation.config.kind} model, config asks for {q.model.kind}")
    else:
        foundation = pretrain_foundation(ws, q.model, q.pretrain, cache_dir=Path(args.workspace) / "cache",
                                         stride=q.stride)

    out = Path(args.out)
    (out / "queries").mkdir(parents=True, exist_ok=True)
    (out / "transcripts").mkdir(parents=True, exist_ok=True)
    for target in targets:
        qc = replace(q, target_id=int(target))
        stem = f"{q.model.kind}-{q.backend}-{target}"
        baselines = None if args.no_baselines else run_baselines(ws, foundation, qc)
        tpath = out / "transcripts" / f"{stem}.jsonl"
        tpath.unlink(missing_ok=True)
        result = run_query(ws, foundation, qc, backend, Transcript(tpath),
                           baseline_mae=None if baselines is None else baselines.alldata_val["mae"],
                           partial_path=out / "queries" / f"{stem}.partial.json")
        result.baselines = baselines
        trace = result.to_dict()
        trace["config"] = {"query": asdict(replace(qc, target_id=int(target))), "ratio": list(cfg.ratio)}
        (out / "queries" / f"{stem}.json").write_text(json.dumps(trace, sort_keys=True, indent=1) + "\n",
                                                      encoding="utf-8")
        print(f"target {target}: best validation MAE {result.best.mae:.4f} after "
              f"{result.rounds_executed} round(s); test MAE {result.test_metrics['mae']:.4f}")
    emit_report(_load_traces(out / "queries"), out / "report")
    print(f"traces and report -> {out}")
    return EXIT_OK


def _load_traces(directory) -> list:
    files = sorted(p for p in Path(directory).rglob("*.json")
                   if not p.name.endswith(".partial.json") and p.name != "manifest.json")
    traces = []
    for p in files:
        doc = json.loads(p.read_text(encoding="utf-8"))
        if isinstance(doc, dict) and "model_kind" in doc and "records" in doc:
            traces.append(doc)
    return traces


def cmd_report(args) -> int:
    traces = _load_traces(args.runs)
    if not traces:
        raise DataError(f"no query traces found under {args.runs}")
    paths = emit_report(traces, args.out)
    print((Path(paths["table_md"])).read_text(encoding="utf-8"))
    return EXIT_OK


def cmd_config(args) -> int:
    sys.stdout.write(default_config_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dcats", description="Data-centric neighbor selection for forecasting.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="validate dataset/metadata/graph and write a workspace")
    p.add_argument("--data", required=True, help="series CSV (location_id,v_0,...) or .bin sidecar")
    p.add_argument("--meta", required=True, help="metadata CSV")
    p.add_argument("--graph", help="road graph CSV (from_id,to_id,length_km); default: chain freeways")
    p.add_argument("--background", help="background text for prompts")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate a clustered synthetic workspace")
    p.add_argument("--clusters", type=int, default=3)
    p.add_argument("--per-cluster", type=int, default=20)
    p.add_argument("--steps", type=int, default=4800)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", action="store_true", help="also write series.csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("neighbors", help="write road / pattern / geodetic neighbor lists")
    p.add_argument("--workspace", default=".")
    p.add_argument("--target", type=int, nargs="+", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_neighbors)

    p = sub.add_parser("pretrain", help="train a foundation model on all locations")
    p.add_argument("--workspace", default=".")
    p.add_argument("--model", choices=("linear", "mlp", "sparsetsf"), required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="run one query per target and write traces plus a report")
    p.add_argument("--workspace", default=".")
    p.add_argument("--target", type=int, nargs="+")
    p.add_argument("--targets", help="file of target ids, whitespace separated")
    p.add_argument("--backend", choices=BACKENDS)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-rounds", type=int)
    p.add_argument("--model", choices=("linear", "mlp", "sparsetsf"))
    p.add_argument("--foundation", help="checkpoint from `dcats pretrain` (default: pretrain and cache)")
    p.add_argument("--config")
    p.add_argument("--no-baselines", action="store_true")
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="aggregate query traces into tables")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("config", help="print every run-config key with its default")
    p.set_defaults(func=cmd_config)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, TrainingDivergedError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except AgentError as exc:
        print(f"agent failure: {exc}", file=sys.stderr)
        return EXIT_AGENT


if __name__ == "__main__":
    sys.exit(main())
