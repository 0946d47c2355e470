"""Run configuration: a flat ``key = value`` file.

Keys without a dot set query fields; ``model.*``, ``pretrain.*`` and
``finetune.*`` set the model and the two training configs; ``llm.*`` sets
the chat-completion client; ``data.*`` sets the split and windowing.
Blank lines and lines starting with ``#`` or ``;`` are ignored.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .forecast import ModelConfig, TrainConfig
from .orchestrator import QueryConfig

_SECTION = "run"

QUERY_KEYS = ("n_proposals", "max_rounds", "prune_fraction", "backend", "seed", "k", "pattern_window",
              "pattern_suffix", "discord_window", "stride", "n_select", "workers")
OPTIONAL_INT = ("pattern_window", "pattern_suffix")
BACKENDS = ("llm", "oracle", "greedy", "random")

LLM_DEFAULTS = {"endpoint": "", "model": "", "response_path": "choices.0.message.content",
                "temperature": 0.0, "max_retries": 4, "backoff": 1.0, "timeout": 120.0}

KEY_DOCS = {
    "n_proposals": "proposals requested per round",
    "max_rounds": "safety cap on agent rounds",
    "prune_fraction": "fraction of training days pruned per location as anomalous",
    "backend": "llm, oracle, greedy or random",
    "seed": "master seed; per-query seeds derive from it and the target id",
    "k": "entries per neighbor list",
    "pattern_window": "window length for pattern similarity (none = one day)",
    "pattern_suffix": "restrict pattern similarity to the last N training steps (none = all)",
    "discord_window": "matrix-profile subsequence length for anomaly scores",
    "stride": "training window stride",
    "n_select": "ids per proposal for the scripted random and greedy strategies",
    "workers": "threads for concurrent proposal fine-tunes",
    "model.kind": "linear, mlp or sparsetsf",
    "model.input_len": "input window length in steps",
    "model.horizon": "forecast horizon in steps",
    "model.hidden": "mlp hidden width",
    "model.period": "sparsetsf strand period (must divide input_len and horizon)",
    "model.seed": "parameter initialisation seed",
    "data.ratio": "train:val:test split ratio, e.g. 6,2,2",
    "llm.endpoint": "chat-completion URL",
    "llm.model": "model name sent in the request",
    "llm.response_path": "dotted path of the reply text in the response JSON",
    "llm.temperature": "sampling temperature",
    "llm.max_retries": "retries on transient failures",
    "llm.backoff": "base of the exponential backoff, seconds",
    "llm.timeout": "request timeout, seconds",
}
for _prefix in ("pretrain", "finetune"):
    for _f, _doc in (("epochs", "epochs"), ("batch_size", "mini-batch size"),
                     ("learning_rate", "learning rate"), ("optimizer", "adam or sgd"),
                     ("loss", "mse or mae"), ("patience", "early-stop patience in epochs"),
                     ("seed", "shuffling seed")):
        KEY_DOCS[f"{_prefix}.{_f}"] = f"{_prefix} {_doc}"


@dataclass
class RunConfig:
    query: QueryConfig = field(default_factory=QueryConfig)
    llm: dict = field(default_factory=lambda: dict(LLM_DEFAULTS))
    ratio: tuple = (6, 2, 2)


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if key.split(".")[-1] in OPTIONAL_INT and default is None:
            return None if raw.lower() in ("", "none") else int(raw)
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(f"[{_SECTION}]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None

    cfg = RunConfig()
    q, groups = {}, {"model": {}, "pretrain": {}, "finetune": {}}
    for key, raw in cp[_SECTION].items():
        if key not in KEY_DOCS:
            raise ConfigError(f"{source}: unknown config key {key!r}")
        head, _, tail = key.partition(".")
        if not tail:
            q[key] = _coerce(key, raw, getattr(cfg.query, key))
        elif head == "llm":
            cfg.llm[tail] = _coerce(key, raw, LLM_DEFAULTS[tail])
        elif head == "data":
            try:
                cfg.ratio = tuple(int(v) for v in raw.split(","))
            except ValueError:
                raise ConfigError(f"{source}: data.ratio must be comma-separated integers") from None
        else:
            base = cfg.query.model if head == "model" else getattr(cfg.query, head)
            groups[head][tail] = _coerce(key, raw, getattr(base, tail))

    query = replace(cfg.query, **q,
                    model=replace(cfg.query.model, **groups["model"]),
                    pretrain=replace(cfg.query.pretrain, **groups["pretrain"]),
                    finetune=replace(cfg.query.finetune, **groups["finetune"]))
    query.validate()
    if query.backend not in BACKENDS:
        raise ConfigError(f"{source}: unknown backend {query.backend!r}; choose from {BACKENDS}")
    cfg.query = query
    return cfg


def load_run_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_run_config(p.read_text(encoding="utf-8"), str(p))


def default_config_text() -> str:
    """Every key with its default value and a one-line description."""
    cfg = RunConfig()
    values = {k: getattr(cfg.query, k) for k in QUERY_KEYS}
    for group in ("model", "pretrain", "finetune"):
        obj = cfg.query.model if group == "model" else getattr(cfg.query, group)
        cls = ModelConfig if group == "model" else TrainConfig
        for f in fields(cls):
            values[f"{group}.{f.name}"] = getattr(obj, f.name)
    values["data.ratio"] = ",".join(str(v) for v in cfg.ratio)
    for k, v in LLM_DEFAULTS.items():
        values[f"llm.{k}"] = v
    lines = []
    for key, doc in KEY_DOCS.items():
        v = values[key]
        lines.append(f"# {doc}")
        lines.append(f"{key} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"
