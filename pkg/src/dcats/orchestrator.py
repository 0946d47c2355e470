"""The propose / evaluate / refine loop for one target location, plus baselines."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .agent import (AgentRequest, ExperimentRecord, Proposal, Transcript, build_initial_prompt,
                    build_refinement_prompt, corrective_suffix, make_context, parse_proposals)
from .anomaly import discord_scores, prune_anomalous, DiscordScores
from .errors import AgentError, ConfigError, ParseError
from .forecast import (EmptySubDatasetError, FINETUNE_DEFAULTS, PRETRAIN_DEFAULTS, ModelConfig,
                       TrainConfig, evaluate, fine_tune, init_model, model_to_bytes, load_model,
                       save_model, train)
from .neighbors import build_neighbor_sets
from .tsdata import fit_scaler, make_windows, split

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QueryConfig:
    target_id: int = 0
    n_proposals: int = 5
    max_rounds: int = 5
    prune_fraction: float = 0.10
    model: ModelConfig = ModelConfig()
    pretrain: TrainConfig = PRETRAIN_DEFAULTS
    finetune: TrainConfig = FINETUNE_DEFAULTS
    backend: str = "oracle"
    seed: int = 0
    k: int = 10
    pattern_window: Optional[int] = None
    pattern_suffix: Optional[int] = None
    discord_window: int = 24
    stride: int = 1
    n_select: int = 5
    workers: int = 1

    def validate(self) -> None:
        if self.max_rounds < 1:
            raise ConfigError("max_rounds must be >= 1")
        if not 0.0 <= self.prune_fraction < 1.0:
            raise ConfigError("prune_fraction must lie in [0, 1)")
        if self.n_proposals < 1 or self.k < 1:
            raise ConfigError("n_proposals and k must be >= 1")


_U64 = 1 << 64  # seed entropy must be non-negative


def query_seed(master_seed: int, target_id: int) -> int:
    """Per-query seed from the master seed and the target id."""
    return int(np.random.SeedSequence([int(master_seed) % _U64, int(target_id) % _U64]).generate_state(1)[0])


def proposal_seed(query_seed_value: int, neighbor_ids) -> int:
    """Fine-tune seed for a proposal: a function of the query seed and the neighbor set only."""
    ids = sorted(int(i) % _U64 for i in set(neighbor_ids))
    return int(np.random.SeedSequence([int(query_seed_value) % _U64, len(ids)] + ids).generate_state(1)[0])


class Workspace:
    """Immutable data shared by all queries, with lazily cached derived products."""

    def __init__(self, store, db, graph=None, ratio=(6, 2, 2), input_len: int = 96,
                 horizon: int = 12, labels=None):
        db.check_covers(store)
        self.store = store
        self.split = split(store, ratio, min_len=input_len + horizon)
        self.db = db.with_volumes_from(store, self.split.train_range)
        self.graph = graph
        self.scaler = fit_scaler(store, self.split.train_range)
        self.labels = labels
        self.input_len = input_len
        self.horizon = horizon
        self._discords = {}
        self._neighbors = {}
        self._alldata = {}
        self.similarity_cache = {}

    def discords(self, location_ids, m: int = 24) -> DiscordScores:
        missing = [i for i in location_ids if (int(i), m) not in self._discords]
        if missing:
            fresh = discord_scores(self.store, missing, self.split.train_range, m)
            for lid, s in fresh.scores.items():
                self._discords[(lid, m)] = s
        return DiscordScores({int(i): self._discords[(int(i), m)] for i in location_ids},
                             self.split.train_range, self.store.steps_per_day)

    def neighbor_sets(self, target, k: int = 10, m=None, suffix=None, workers: int = 1):
        key = (int(target), k, m, suffix)
        if key not in self._neighbors:
            self._neighbors[key] = build_neighbor_sets(
                self.store, self.db, self.graph, target, k, m=m, train_range=self.split.train_range,
                suffix=suffix, cache=self.similarity_cache, workers=workers)
        return self._neighbors[key]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.store.values).tobytes())
        h.update(np.asarray(self.store.location_ids, dtype=np.int64).tobytes())
        h.update(repr(self.split).encode())
        return h.hexdigest()

    def train_windows(self, location_ids, stride: int = 1):
        return make_windows(self.store, self.split.train_range, location_ids,
                            self.input_len, self.horizon, stride)

    def val_windows(self, location_ids):
        return make_windows(self.store, self.split.val_range, location_ids,
                            self.input_len, self.horizon)


def pretrain_foundation(ws: Workspace, model_config: ModelConfig, tc: TrainConfig = PRETRAIN_DEFAULTS,
                        cache_dir=None, stride: int = 1):
    """Train (or load from cache) the foundation model on every location's training range."""
    if (model_config.input_len, model_config.horizon) != (ws.input_len, ws.horizon):
        raise ConfigError("model input_len/horizon must match the workspace windowing")
    key = hashlib.sha256(json.dumps([asdict(model_config), asdict(tc), stride, ws.fingerprint()],
                                    sort_keys=True).encode()).hexdigest()[:16]
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"foundation-{model_config.kind}-{key}.ckpt"
        if path.exists():
            logger.info("loaded cached foundation %s", path)
            return load_model(path)
    ids = list(ws.store.location_ids)
    model, hist = train(init_model(model_config), ws.train_windows(ids, stride), ws.store, ws.scaler,
                        tc, ws.val_windows(ids))
    logger.info("pretrained %s foundation: %d epochs, best epoch %d",
                model_config.kind, len(hist.train_loss), hist.best_epoch + 1)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_model(model, path)
    return model


@dataclass
class AccessAudit:
    """Counts metric evaluations per split range, in order of occurrence."""

    events: list = field(default_factory=list)

    def record(self, label: str, round_index: int) -> None:
        self.events.append((label, round_index))

    def count(self, label: str) -> int:
        return sum(1 for lab, _ in self.events if lab == label)


def _finetune_config(qc: QueryConfig, seed: int) -> TrainConfig:
    return replace(qc.finetune, seed=int(seed))


def evaluate_proposal(proposal: Proposal, foundation, ws: Workspace, qc: QueryConfig, round_index: int = 1,
                      seed: int = 0, audit: Optional[AccessAudit] = None, return_model: bool = False):
    """Fine-tune on target + proposed neighbors and score the target's validation range."""
    t0 = time.perf_counter()
    sub = [qc.target_id] + [i for i in proposal.neighbor_ids if i != qc.target_id]
    windows = prune_anomalous(ws.train_windows(sub, qc.stride), ws.discords(sub, qc.discord_window),
                              qc.prune_fraction)
    tc = _finetune_config(qc, seed)
    model = None
    try:
        model = fine_tune(foundation, windows, ws.store, ws.scaler, tc, ws.val_windows([qc.target_id]))
    except EmptySubDatasetError as exc:
        rec = ExperimentRecord(proposal, math.inf, math.inf, math.inf, round_index,
                               time.perf_counter() - t0, str(exc))
        return (rec, None) if return_model else rec
    if audit is not None:
        audit.record("val", round_index)
    m = evaluate(model, ws.store, ws.scaler, qc.target_id, ws.split.val_range)
    rec = ExperimentRecord(proposal, m.mae, m.rmse, m.mape, round_index, time.perf_counter() - t0)
    return (rec, model) if return_model else rec


def select_best(records) -> ExperimentRecord:
    ok = [r for r in records if not r.failed]
    if not ok:
        raise ValueError("no successful experiment record to select from")
    return min(ok, key=lambda r: (r.mae, r.round_index, r.proposal.index))


@dataclass
class Baselines:
    foundation_val: dict
    foundation_test: dict
    alldata_val: dict
    alldata_test: dict


@dataclass
class QueryResult:
    target_id: int
    model_kind: str
    backend: str
    seed: int
    records: list
    best: ExperimentRecord
    best_mae_per_round: list
    rounds_executed: int
    test_metrics: dict
    val_metrics: dict
    baselines: Optional[Baselines] = None
    transcript_path: Optional[str] = None
    audit: AccessAudit = field(default_factory=AccessAudit)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        """Deterministic trace (wall-clock timings excluded)."""
        def rec(r):
            return {"round": r.round_index, "index": r.proposal.index,
                    "explanation": r.proposal.explanation, "neighbors": list(r.proposal.neighbor_ids),
                    "mae": _num(r.mae), "rmse": _num(r.rmse), "mape": _num(r.mape),
                    "failure": r.failure}
        return {
            "target_id": self.target_id, "model_kind": self.model_kind, "backend": self.backend,
            "seed": self.seed, "rounds_executed": self.rounds_executed,
            "best_mae_per_round": [_num(v) for v in self.best_mae_per_round],
            "best": rec(self.best), "records": [rec(r) for r in self.records],
            "val_metrics": _clean(self.val_metrics), "test_metrics": _clean(self.test_metrics),
            "baselines": None if self.baselines is None else _clean(asdict(self.baselines)),
            "notes": list(self.notes),
        }


def _num(v):
    return float(v) if v is not None and math.isfinite(v) else None


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float):
        return _num(obj)
    return obj


def _ask(backend, request, ctx, transcript):
    text = backend.complete(request, transcript)
    try:
        return parse_proposals(text, ctx.valid_ids, ctx.n_proposals, ctx.target_id)
    except ParseError as err:
        logger.warning("round %d: %s; re-prompting once with a format correction",
                       request.round_index, err)
        retry = replace(request, prompt=request.prompt + corrective_suffix(err, ctx.target_id))
        text = backend.complete(retry, transcript)
        return parse_proposals(text, ctx.valid_ids, ctx.n_proposals, ctx.target_id)


def run_query(ws: Workspace, foundation, qc: QueryConfig, backend, transcript: Optional[Transcript] = None,
              baseline_mae=None, partial_path=None) -> QueryResult:
    """Propose, fine-tune and refine until a round brings no strict improvement."""
    qc.validate()
    seed = query_seed(qc.seed, qc.target_id)
    notes = []
    if qc.prune_fraction > 0:
        notes.append("anomaly pruning applied to every sub-dataset series, target included")
    ns = ws.neighbor_sets(qc.target_id, qc.k, qc.pattern_window, qc.pattern_suffix, qc.workers)
    ctx = make_context(ws.db, ns, qc.n_proposals, baseline_mae)
    audit = AccessAudit()
    history, per_round = [], []
    best, best_model = None, None
    seen = {}

    for round_index in range(1, qc.max_rounds + 1):
        if round_index == 1:
            prompt = build_initial_prompt(ctx)
        else:
            prompt = build_refinement_prompt(ctx, history, best)
        request = AgentRequest(prompt, ctx, list(history), round_index)
        try:
            proposals = _ask(backend, request, ctx, transcript)
        except AgentError:
            if partial_path is not None and history:
                _write_partial(partial_path, qc, history, round_index)
            raise

        def run(p):
            key = frozenset(p.neighbor_ids)
            if key in seen:
                # same sub-dataset, same seed: reuse the earlier fine-tune verbatim
                old, model = seen[key]
                return replace(old, proposal=p, round_index=round_index, seconds=0.0), model
            return evaluate_proposal(p, foundation, ws, qc, round_index,
                                     seed=proposal_seed(seed, p.neighbor_ids), return_model=True)

        if qc.workers > 1:
            with ThreadPoolExecutor(max_workers=qc.workers) as ex:
                outcomes = list(ex.map(run, proposals))
        else:
            outcomes = [run(p) for p in proposals]
        for rec, model in outcomes:
            seen.setdefault(frozenset(rec.proposal.neighbor_ids), (rec, model))
        for rec, _ in outcomes:
            if not rec.failed:
                audit.record("val", round_index)

        incumbent = math.inf if best is None else best.mae
        improved = False
        for rec, model in outcomes:
            history.append(rec)
            if rec.mae < incumbent:
                improved = True
            if not rec.failed and (best is None or select_best([best, rec]) is rec):
                best, best_model = rec, model
        per_round.append(best.mae if best is not None else math.inf)
        logger.info("target %d round %d: %d proposals, best MAE %s", qc.target_id, round_index,
                    len(proposals), f"{per_round[-1]:.4f}")
        if not improved:
            break

    if best is None:
        raise AgentError(f"every proposal failed for target {qc.target_id}")
    audit.record("val", len(per_round))
    val = evaluate(best_model, ws.store, ws.scaler, qc.target_id, ws.split.val_range)
    audit.record("test", len(per_round))
    test = evaluate(best_model, ws.store, ws.scaler, qc.target_id, ws.split.test_range)
    return QueryResult(qc.target_id, qc.model.kind, qc.backend, seed, history, best, per_round,
                       len(per_round), test.to_dict(), val.to_dict(),
                       transcript_path=str(transcript.path) if transcript and transcript.path else None,
                       audit=audit, notes=notes)


def _write_partial(path, qc, history, round_index):
    payload = {"target_id": qc.target_id, "aborted_in_round": round_index,
               "records": [{"round": r.round_index, "neighbors": list(r.proposal.neighbor_ids),
                            "mae": _num(r.mae)} for r in history]}
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def alldata_model(ws: Workspace, foundation, qc: QueryConfig):
    """Foundation fine-tuned on every location's pruned training windows.

    The model does not depend on the target, so it is trained once per
    (foundation, fine-tune config) and reused across queries.  Early stopping
    watches the validation windows of all locations.
    """
    key = (model_to_bytes(foundation), json.dumps(asdict(qc.finetune), sort_keys=True),
           qc.seed, qc.stride, qc.discord_window, qc.prune_fraction)
    if key not in ws._alldata:
        ids = list(ws.store.location_ids)
        windows = prune_anomalous(ws.train_windows(ids, qc.stride), ws.discords(ids, qc.discord_window),
                                  qc.prune_fraction)
        tc = _finetune_config(qc, qc.seed)
        ws._alldata[key] = fine_tune(foundation, windows, ws.store, ws.scaler, tc, ws.val_windows(ids))
    return ws._alldata[key]


def run_baselines(ws: Workspace, foundation, qc: QueryConfig) -> Baselines:
    """Foundation-only and all-data fine-tune baselines on the target's val and test ranges."""
    target = qc.target_id
    fv = evaluate(foundation, ws.store, ws.scaler, target, ws.split.val_range)
    ft = evaluate(foundation, ws.store, ws.scaler, target, ws.split.test_range)
    tuned = alldata_model(ws, foundation, qc)
    av = evaluate(tuned, ws.store, ws.scaler, target, ws.split.val_range)
    at = evaluate(tuned, ws.store, ws.scaler, target, ws.split.test_range)
    return Baselines(fv.to_dict(), ft.to_dict(), av.to_dict(), at.to_dict())
