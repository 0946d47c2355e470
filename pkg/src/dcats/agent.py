"""Prompt construction, proposal parsing and agent backends."""

from __future__ import annotations

import configparser
import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from string import Template
from typing import Optional

import httpx
import numpy as np

from .errors import (AgentError, AuthenticationError, MalformedResponseError, ParseError,
                     RetryLimitError)
from .metadata import read_template, render_location, render_neighbor_entry
from .neighbors import KINDS

logger = logging.getLogger(__name__)

API_KEY_ENV = "DCATS_LLM_API_KEY"
SECTION_MARKERS_INITIAL = ("# Background", "# Task", "## Guidelines:", "## Neighbor Sets:",
                           "# Output Format")
SECTION_MARKERS_REFINEMENT = ("# Objective", "# Background",
                              "# Previous Experiment Results (Ranked from Best to Worst)",
                              "# Task", "# Additional Considerations", "# Output Format")
KIND_LABELS = {"road": "road network", "pattern": "temporal pattern similarity",
               "geodetic": "geodetic proximity"}


@dataclass(frozen=True)
class Proposal:
    index: int
    explanation: str
    neighbor_ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "neighbor_ids", tuple(int(i) for i in self.neighbor_ids))


@dataclass(frozen=True)
class ExperimentRecord:
    proposal: Proposal
    mae: float
    rmse: float
    mape: float
    round_index: int
    seconds: float = 0.0
    failure: str = ""

    @property
    def failed(self) -> bool:
        return not math.isfinite(self.mae)


@dataclass
class PromptContext:
    target_id: int
    target_details: str
    neighbor_sets: object
    rendered_sets: dict
    background_text: str
    n_proposals: int = 5
    baseline_mae: Optional[float] = None

    @property
    def valid_ids(self) -> list:
        return self.neighbor_sets.all_ids()


def make_context(db, neighbor_sets, n_proposals: int = 5, baseline_mae=None,
                 template_path=None) -> PromptContext:
    if n_proposals < 1:
        raise ValueError("n_proposals must be >= 1")
    rendered = {
        kind: [render_neighbor_entry(db, e.location_id, e.annotation_kind, e.value, template_path)
               for e in neighbor_sets.by_kind(kind)]
        for kind in KINDS
    }
    return PromptContext(neighbor_sets.target, render_location(db, neighbor_sets.target, template_path),
                         neighbor_sets, rendered, db.background_text, n_proposals, baseline_mae)


def _load_ini(name: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(read_template(name))
    return {s: dict(parser[s]) for s in parser.sections()}


def _fill(name: str, **fields) -> str:
    return Template(read_template(name)).substitute(fields).rstrip("\n")


def _neighbor_section(ctx: PromptContext) -> str:
    info = _load_ini("neighbor_sets.ini")
    blocks = []
    for kind in KINDS:
        entries = ctx.rendered_sets[kind]
        if not entries:
            continue
        lines = [f"- {info[kind]['heading']}", info[kind]["description"]]
        lines += [f"  {rank}. {text}" for rank, text in enumerate(entries, start=1)]
        blocks.append("\n".join(lines))
    return "\n".join(blocks)


def build_initial_prompt(ctx: PromptContext) -> str:
    if ctx.neighbor_sets.is_empty():
        raise ValueError(f"no neighbors to propose from for location {ctx.target_id}")
    return _fill("initial_prompt.txt",
                 background=ctx.background_text,
                 target_id=ctx.target_id,
                 target_details=ctx.target_details,
                 n_proposals=ctx.n_proposals,
                 guidelines=read_template("guidelines.txt").rstrip("\n"),
                 neighbor_sets=_neighbor_section(ctx),
                 output_format=read_template("output_format.txt").rstrip("\n"))


def format_mae(value: float) -> str:
    return f"{value:.4f}" if math.isfinite(value) else "failed (no training data)"


def rank_records(history) -> list:
    """Ascending MAE; ties by earlier round then lower proposal index."""
    return sorted(history, key=lambda r: (r.mae, r.round_index, r.proposal.index))


def _candidate_summary(ctx: PromptContext) -> str:
    lines = []
    for kind in KINDS:
        entries = ctx.neighbor_sets.by_kind(kind)
        if not entries:
            continue
        if kind == "pattern":
            items = [f"{e.location_id} (similarity={e.value:.4f})" for e in entries]
        else:
            items = [f"{e.location_id} (distance={e.value:.2f}km)" for e in entries]
        lines.append(f"- {KIND_LABELS[kind].capitalize()}: " + ", ".join(items))
    return "\n".join(lines)


def build_refinement_prompt(ctx: PromptContext, history, best=None) -> str:
    if not history:
        raise ValueError("refinement needs at least one experiment record")
    ranked = rank_records(history)
    best = ranked[0] if best is None else best
    blocks = []
    for rank, rec in enumerate(ranked, start=1):
        p = Proposal(rank, rec.proposal.explanation, rec.proposal.neighbor_ids)
        blocks.append(render_proposal(p) + f"\nPerformance (Mean Absolute Error): {format_mae(rec.mae)}")
    baseline = ("" if ctx.baseline_mae is None
                else f"- Baseline performance (Mean Absolute Error): {ctx.baseline_mae:.4f}\n")
    return _fill("refinement_prompt.txt",
                 target_id=ctx.target_id,
                 target_details=ctx.target_details,
                 baseline_line=baseline,
                 best_mae=format_mae(best.mae),
                 candidates=_candidate_summary(ctx),
                 results="\n\n".join(blocks),
                 n_proposals=ctx.n_proposals,
                 output_format=read_template("output_format.txt").rstrip("\n"))


# --------------------------------------------------------------------------
# proposal text

def render_proposal(p: Proposal) -> str:
    ids = ", ".join(str(i) for i in p.neighbor_ids)
    return f"Proposal {p.index}\nExplanation: {p.explanation}\nNeighbors: [{ids}]"


def render_proposals(proposals) -> str:
    return "\n\n".join(render_proposal(p) for p in proposals)


_HEADER = re.compile(r"^[ \t#>*_`-]*proposal[ \t]*#?[ \t]*(\d+)\b[ \t:*_`.)-]*(?:[:-][^\n]*)?$",
                     re.IGNORECASE | re.MULTILINE)
_EXPL = re.compile(r"^[\s*_-]*explanation[\s*_]*:[\s*_]*(.*?)(?=^[\s*_-]*neighbors[\s*_]*:|\Z)",
                   re.IGNORECASE | re.MULTILINE | re.DOTALL)
_NEIGH = re.compile(r"^[\s*_-]*neighbors[\s*_]*:[\s*_]*\[([^\]]*)\]", re.IGNORECASE | re.MULTILINE)
_ID_TOKEN = re.compile(r"^(?:location_id\s*=\s*)?`?(-?\d+)`?$")


@dataclass(frozen=True)
class Rejection:
    block: int
    reason: str
    detail: str = ""


def parse_proposals_report(text, valid_ids, n_expected: int, target_id=None):
    """Return (valid proposals, rejections) extracted from free text."""
    if not isinstance(text, str):
        text = bytes(text).decode("utf-8", errors="replace") if text is not None else ""
    valid = {int(i) for i in valid_ids}
    heads = list(_HEADER.finditer(text))
    proposals, rejections = [], []
    for b, head in enumerate(heads):
        end = heads[b + 1].start() if b + 1 < len(heads) else len(text)
        body = text[head.end():end]
        index = int(head.group(1)) if len(head.group(1)) < 10 else 0
        ex = _EXPL.search(body)
        nb = _NEIGH.search(body)
        if ex is None or nb is None:
            rejections.append(Rejection(b, "malformed", "missing Explanation or Neighbors line"))
            continue
        explanation = " ".join(ex.group(1).split())
        tokens = [t.strip() for t in nb.group(1).split(",") if t.strip()]
        ids, bad = [], []
        for t in tokens:
            mt = _ID_TOKEN.match(t)
            (ids.append(int(mt.group(1))) if mt else bad.append(t))
        if bad:
            rejections.append(Rejection(b, "malformed", f"non-integer entries {bad[:3]}"))
        elif not ids:
            rejections.append(Rejection(b, "empty", "no neighbors listed"))
        elif len(set(ids)) != len(ids):
            rejections.append(Rejection(b, "duplicate", "a location_id appears more than once"))
        elif target_id is not None and int(target_id) in ids:
            rejections.append(Rejection(b, "target", "the target location itself was proposed"))
        elif not set(ids) <= valid:
            outside = sorted(set(ids) - valid)
            rejections.append(Rejection(b, "out-of-pool", f"ids not in the neighbor sets: {outside[:5]}"))
        elif len(proposals) < n_expected:
            proposals.append(Proposal(index, explanation, ids))
    if not heads:
        rejections.append(Rejection(-1, "malformed", "no 'Proposal N' header found"))
    return proposals, rejections


def parse_proposals(text, valid_ids, n_expected: int, target_id=None) -> list:
    proposals, rejections = parse_proposals_report(text, valid_ids, n_expected, target_id)
    if not proposals:
        reasons = ", ".join(sorted({r.reason for r in rejections})) or "no proposals"
        raise ParseError(f"no valid proposal in agent response ({reasons})", rejections)
    return proposals


def corrective_suffix(err: ParseError, target_id) -> str:
    reasons = ", ".join(sorted({r.reason for r in err.rejections})) or "unrecognized format"
    return "\n" + _fill("corrective_suffix.txt", reasons=reasons, target_id=target_id)


# --------------------------------------------------------------------------
# backends

class Transcript:
    """Append-only exchange log, optionally mirrored to a JSON-lines file."""

    def __init__(self, path=None, clock=None):
        self.path = Path(path) if path is not None else None
        self.entries = []
        self._lock = threading.Lock()
        self._clock = clock or (lambda: datetime.now(timezone.utc).isoformat())

    def append(self, round_index, prompt, response, attempt_count) -> None:
        entry = {"timestamp": self._clock(), "round": round_index, "prompt": prompt,
                 "response": response, "attempt_count": attempt_count}
        with self._lock:
            self.entries.append(entry)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def __len__(self):
        return len(self.entries)


@dataclass
class AgentRequest:
    prompt: str
    context: Optional[PromptContext] = None
    history: list = field(default_factory=list)
    round_index: int = 1


class AgentBackend:
    name = "backend"

    def _respond(self, request: AgentRequest):
        """Return (text, attempt_count)."""
        raise NotImplementedError

    def complete(self, request, transcript: Optional[Transcript] = None) -> str:
        if isinstance(request, str):
            request = AgentRequest(request)
        text, attempts = self._respond(request)
        if transcript is not None:
            transcript.append(request.round_index, request.prompt, text, attempts)
        return text


def complete(backend: AgentBackend, prompt, transcript=None) -> str:
    return backend.complete(prompt, transcript)


class MockBackend(AgentBackend):
    """Returns canned responses in order, repeating the last one."""

    name = "mock"

    def __init__(self, responses):
        self.responses = [responses] if isinstance(responses, str) else list(responses)
        self.calls = 0

    def _respond(self, request):
        text = self.responses[min(self.calls, len(self.responses) - 1)]
        self.calls += 1
        return text, 1


class RepeatBackend(AgentBackend):
    """Answers every request with the inner backend's first response."""

    name = "repeat"

    def __init__(self, inner: AgentBackend):
        self.inner = inner
        self._first = None

    def _respond(self, request):
        if self._first is None:
            self._first = self.inner.complete(request)
        return self._first, 1


def _json_path(doc, path: str):
    cur = doc
    for part in path.split("."):
        if isinstance(cur, list):
            cur = cur[int(part)]
        else:
            cur = cur[part]
    return cur


class LLMBackend(AgentBackend):
    """Chat-completion client: POST {model, messages, temperature} to ``endpoint``."""

    name = "llm"
    transient_status = frozenset({408, 409, 425, 429, 500, 502, 503, 504})

    def __init__(self, endpoint: str, model: str, api_key=None,
                 response_path: str = "choices.0.message.content", temperature: float = 0.0,
                 max_retries: int = 4, backoff: float = 1.0, timeout: float = 120.0,
                 system_prompt=None, transport=None, sleep=time.sleep):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.response_path = response_path
        self.temperature = temperature
        self.max_retries = max_retries
        self.backoff = backoff
        self.system_prompt = (read_template("system_prompt.txt").strip()
                              if system_prompt is None else system_prompt)
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self._sleep = sleep

    def payload(self, prompt: str) -> dict:
        return {"model": self.model,
                "messages": [{"role": "system", "content": self.system_prompt},
                             {"role": "user", "content": prompt}],
                "temperature": self.temperature}

    def _respond(self, request):
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = self.payload(request.prompt)
        last = None
        for attempt in range(1, self.max_retries + 2):
            try:
                resp = self._client.post(self.endpoint, json=body, headers=headers)
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code in (401, 403):
                    raise AuthenticationError(f"endpoint rejected credentials (HTTP {resp.status_code})")
                if resp.status_code in self.transient_status:
                    last = f"HTTP {resp.status_code}"
                elif resp.status_code >= 400:
                    raise AgentError(f"endpoint returned HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    return self._extract(resp), attempt
            if attempt <= self.max_retries:
                delay = self.backoff * 2 ** (attempt - 1)
                logger.warning("LLM request failed (%s); retry %d/%d in %.1fs",
                               last, attempt, self.max_retries, delay)
                self._sleep(delay)
        raise RetryLimitError(f"gave up after {self.max_retries + 1} attempts; last error: {last}")

    def _extract(self, resp) -> str:
        try:
            text = _json_path(resp.json(), self.response_path)
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(
                f"no assistant text at '{self.response_path}': {exc!r}") from None
        if not isinstance(text, str) or not text.strip():
            raise MalformedResponseError("assistant text is empty or not a string")
        return text

    def close(self):
        self._client.close()


# --------------------------------------------------------------------------
# scripted agents

STRATEGIES = ("oracle", "greedy-pattern", "random")


def _sources(ctx: PromptContext, ids) -> str:
    counts = {k: 0 for k in KINDS}
    for i in ids:
        for kind in KINDS:
            if any(e.location_id == i for e in ctx.neighbor_sets.by_kind(kind)):
                counts[kind] += 1
                break
    parts = [f"{n} from {KIND_LABELS[k]}" for k, n in counts.items() if n]
    return ", ".join(parts)


def _explain(strategy: str, ctx: PromptContext, ids, refined: bool) -> str:
    lead = {
        "oracle": "Selects neighbors whose traffic behaves like the target location",
        "greedy-pattern": "Selects the neighbors with the highest temporal pattern similarity",
        "random": "Samples neighbors uniformly from the candidate sets",
    }[strategy]
    tail = " refining the best proposal so far by swapping one location" if refined else ""
    return f"{lead}{tail}; uses {len(ids)} neighbors ({_sources(ctx, ids)})."


def _strategy_pool(strategy, ctx, labels) -> list:
    pool = ctx.valid_ids
    if strategy == "oracle":
        if labels is None:
            raise ValueError("oracle strategy needs cluster labels")
        mates = [i for i in pool if labels[i] == labels[ctx.target_id]]
        if mates:
            pattern_order = [e.location_id for e in ctx.neighbor_sets.pattern]
            return sorted(mates, key=lambda i: (i not in pattern_order,
                                                pattern_order.index(i) if i in pattern_order else 0))
        strategy = "greedy-pattern"
    if strategy == "greedy-pattern":
        return [e.location_id for e in ctx.neighbor_sets.pattern] or pool
    return pool


def scripted_propose(strategy: str, ctx: PromptContext, history, seed: int, labels=None,
                     n_select: int = 5) -> str:
    """Deterministic stand-in for the LLM that answers in the proposal format."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    round_index = 1 + max((r.round_index for r in history), default=0)
    rng = np.random.default_rng([int(seed), round_index, STRATEGIES.index(strategy)])
    pool = _strategy_pool(strategy, ctx, labels)
    n = ctx.n_proposals
    proposals = []
    if history:
        best = rank_records(history)[0].proposal.neighbor_ids
        for j in range(n):
            ids = list(best)
            spare = [i for i in pool if i not in ids]
            pos = int(rng.integers(len(ids)))
            if spare:
                ids[pos] = int(spare[int(rng.integers(len(spare)))])
            elif len(ids) > 1:
                del ids[pos]
            proposals.append(Proposal(j + 1, _explain(strategy, ctx, ids, True), ids))
    else:
        size = min(n_select, len(pool))
        for j in range(n):
            if strategy == "greedy-pattern":
                k = min(max(1, size + (j + 1) // 2 * (1 if j % 2 else -1)), len(pool))
                ids = pool[:k]
            elif strategy == "oracle":
                # every presented cluster-mate, then leave-j-out variants
                drop = set(rng.choice(len(pool), size=min(j, len(pool) - 1), replace=False).tolist())
                ids = [int(v) for i, v in enumerate(pool) if i not in drop]
            else:
                ids = [int(pool[i]) for i in rng.choice(len(pool), size=size, replace=False)]
            proposals.append(Proposal(j + 1, _explain(strategy, ctx, ids, False), ids))
    return render_proposals(proposals)


class ScriptedBackend(AgentBackend):
    name = "scripted"

    def __init__(self, strategy: str, seed: int = 0, labels=None, n_select: int = 5):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
        self.strategy = strategy
        self.seed = seed
        self.labels = labels
        self.n_select = n_select

    def _respond(self, request):
        if request.context is None:
            raise AgentError("scripted backends need the structured prompt context")
        text = scripted_propose(self.strategy, request.context, request.history, self.seed,
                                self.labels, self.n_select)
        return text, 1
