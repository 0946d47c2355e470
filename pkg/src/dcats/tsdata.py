"""Time series storage, splitting, windowing, scaling and synthetic data.

The dataset is a matrix of univariate series (one row per location). Files
are CSV (``location_id,v_0,...,v_{T-1}``) with an optional little-endian
binary sidecar for fast reload.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigError, DataError
from .metadata import LocationMeta, MetadataDB, default_background

SIDECAR_MAGIC = b"DCATSTS1"
SCALER_EPS = 1e-8
RESID_RADIUS = 0.97
RESID_INNOV = 2.0
GEO_SPREAD_DEG = 0.03


@dataclass(frozen=True)
class TimeSeriesStore:
    values: np.ndarray
    location_ids: tuple
    interval_minutes: int = 15
    steps_per_day: int = 96
    _row: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DataError(f"values must be 2-D, got shape {values.shape}")
        ids = tuple(int(i) for i in self.location_ids)
        if len(ids) != values.shape[0]:
            raise DataError("location_ids must align with rows")
        row = {}
        for r, lid in enumerate(ids):
            if lid in row:
                raise DataError(f"duplicate location_id {lid} at row {r}")
            row[lid] = r
        if np.isnan(values).any():
            raise DataError("values contain NaN; impute before building a store")
        if self.interval_minutes < 1 or self.steps_per_day < 1:
            raise DataError("interval_minutes and steps_per_day must be positive")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "location_ids", ids)
        object.__setattr__(self, "_row", row)

    @property
    def n_locations(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    def row(self, location_id: int) -> int:
        try:
            return self._row[int(location_id)]
        except KeyError:
            raise KeyError(f"unknown location_id {location_id}") from None

    def series(self, location_id: int) -> np.ndarray:
        return self.values[self.row(location_id)]

    def __contains__(self, location_id) -> bool:
        return int(location_id) in self._row


def impute_locf(row: np.ndarray) -> np.ndarray:
    """Carry the last observation forward; a leading gap takes the first valid value."""
    row = np.array(row, dtype=np.float64)
    mask = np.isnan(row)
    if not mask.any():
        return row
    if mask.all():
        raise DataError("series has no valid observation")
    idx = np.where(~mask, np.arange(row.size), 0)
    np.maximum.accumulate(idx, out=idx)
    out = row[idx]
    first = np.flatnonzero(~mask)[0]
    out[:first] = row[first]
    return out


def _parse_float(tok: str) -> float:
    tok = tok.strip()
    if tok == "" or tok.lower() in ("nan", "na", "null"):
        return math.nan
    return float(tok)


def load_store(path, interval_minutes: int = 15, steps_per_day: int = 96) -> TimeSeriesStore:
    """Load a dataset file (CSV or binary sidecar, chosen by suffix)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    if path.suffix == ".bin":
        return load_store_binary(path, interval_minutes, steps_per_day)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: empty file")
        if header[0].strip() != "location_id" or len(header) < 2:
            raise DataError(f"{path}: malformed header, expected 'location_id,v_0,...'")
        for k, name in enumerate(header[1:]):
            if name.strip() != f"v_{k}":
                raise DataError(f"{path}: malformed header at column {k + 1} ({name!r})")
        n_steps = len(header) - 1
        ids, rows, seen = [], [], {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != n_steps + 1:
                raise DataError(
                    f"{path}: ragged row at line {lineno} ({len(rec) - 1} values, expected {n_steps})")
            try:
                lid = int(rec[0])
                vals = [_parse_float(t) for t in rec[1:]]
            except ValueError as exc:
                raise DataError(f"{path}: unparsable value at line {lineno}: {exc}") from None
            if lid in seen:
                raise DataError(
                    f"{path}: duplicate location_id {lid} at line {lineno} (first at line {seen[lid]})")
            seen[lid] = lineno
            ids.append(lid)
            try:
                rows.append(impute_locf(np.asarray(vals)))
            except DataError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    return TimeSeriesStore(np.vstack(rows), tuple(ids), interval_minutes, steps_per_day)


def save_store_csv(store: TimeSeriesStore, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["location_id"] + [f"v_{k}" for k in range(store.n_steps)])
        for lid, row in zip(store.location_ids, store.values):
            w.writerow([lid] + [repr(float(v)) for v in row])


def save_store_binary(store: TimeSeriesStore, path) -> None:
    """Header: magic, n_locations and n_steps (uint64), then int64 ids and float64 values."""
    with open(path, "wb") as fh:
        fh.write(SIDECAR_MAGIC)
        fh.write(struct.pack("<QQ", store.n_locations, store.n_steps))
        fh.write(np.asarray(store.location_ids, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(store.values, dtype="<f8").tobytes())


def load_store_binary(path, interval_minutes: int = 15, steps_per_day: int = 96) -> TimeSeriesStore:
    raw = Path(path).read_bytes()
    head = len(SIDECAR_MAGIC) + 16
    if len(raw) < head or raw[:len(SIDECAR_MAGIC)] != SIDECAR_MAGIC:
        raise DataError(f"{path}: not a dataset sidecar file")
    n_loc, n_steps = struct.unpack("<QQ", raw[len(SIDECAR_MAGIC):head])
    expected = head + 8 * n_loc + 8 * n_loc * n_steps
    if len(raw) != expected:
        raise DataError(f"{path}: truncated sidecar ({len(raw)} bytes, expected {expected})")
    ids = np.frombuffer(raw, dtype="<i8", count=n_loc, offset=head)
    vals = np.frombuffer(raw, dtype="<f8", count=n_loc * n_steps, offset=head + 8 * n_loc)
    return TimeSeriesStore(vals.reshape(n_loc, n_steps), tuple(ids.tolist()),
                           interval_minutes, steps_per_day)


@dataclass(frozen=True)
class SplitView:
    train_range: tuple
    val_range: tuple
    test_range: tuple

    @property
    def lengths(self) -> tuple:
        return tuple(b - a for a, b in (self.train_range, self.val_range, self.test_range))


def split(n_steps, ratio=(6, 2, 2), min_len: int = 0) -> SplitView:
    """Contiguous train/val/test split; train and val floored, remainder to test.

    ``n_steps`` may also be a TimeSeriesStore. ``min_len`` is the shortest
    admissible segment (normally ``L_in + H``).
    """
    if isinstance(n_steps, TimeSeriesStore):
        n_steps = n_steps.n_steps
    if len(ratio) != 3 or any(int(r) <= 0 for r in ratio):
        raise ConfigError(f"ratio must be three positive integers, got {ratio}")
    total = sum(int(r) for r in ratio)
    n_train = n_steps * int(ratio[0]) // total
    n_val = n_steps * int(ratio[1]) // total
    n_test = n_steps - n_train - n_val
    if min(n_train, n_val, n_test) < min_len:
        raise ConfigError(
            f"split ({n_train}, {n_val}, {n_test}) has a segment shorter than {min_len} steps")
    return SplitView((0, n_train), (n_train, n_train + n_val), (n_train + n_val, n_steps))


@dataclass(frozen=True)
class WindowSet:
    """(location_id, start) pairs; each window spans [start, start + input_len + horizon)."""

    entries: np.ndarray
    input_len: int
    horizon: int
    split_range: tuple

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def location_ids(self) -> list:
        return sorted(set(self.entries[:, 0].tolist())) if len(self) else []

    def select(self, mask: np.ndarray) -> "WindowSet":
        return WindowSet(self.entries[mask], self.input_len, self.horizon, self.split_range)


def window_count(range_len: int, input_len: int, horizon: int, stride: int = 1) -> int:
    span = range_len - input_len - horizon
    return span // stride + 1 if span >= 0 else 0


def make_windows(store, split_range, location_ids, input_len: int = 96,
                 horizon: int = 12, stride: int = 1) -> WindowSet:
    if input_len < 1 or horizon < 1 or stride < 1:
        raise ConfigError("input_len, horizon and stride must be >= 1")
    lo, hi = split_range
    n = window_count(hi - lo, input_len, horizon, stride)
    starts = lo + stride * np.arange(n, dtype=np.int64)
    blocks = []
    for lid in location_ids:
        store.row(lid)
        blocks.append(np.column_stack([np.full(n, int(lid), dtype=np.int64), starts]))
    entries = np.vstack(blocks) if blocks else np.empty((0, 2), dtype=np.int64)
    return WindowSet(entries, input_len, horizon, tuple(split_range))


def gather(store, windows: WindowSet, scaler=None):
    """Materialize (inputs, targets) arrays, normalized when a scaler is given."""
    L, H = windows.input_len, windows.horizon
    if len(windows) == 0:
        return np.empty((0, L)), np.empty((0, H))
    rows = np.array([store.row(i) for i in windows.entries[:, 0]])
    idx = windows.entries[:, 1][:, None] + np.arange(L + H)[None, :]
    block = store.values[rows[:, None], idx]
    if scaler is not None:
        block = (block - scaler.mean[rows][:, None]) / scaler.std[rows][:, None]
    return block[:, :L], block[:, L:]


@dataclass(frozen=True)
class Scaler:
    """Per-location z-score parameters, rows aligned with the store."""

    mean: np.ndarray
    std: np.ndarray
    location_ids: tuple

    def _rows(self, location_ids):
        lookup = {lid: r for r, lid in enumerate(self.location_ids)}
        return np.array([lookup[int(i)] for i in location_ids])

    def _params(self, location_ids):
        if location_ids is None:
            return self.mean[:, None], self.std[:, None]
        if np.ndim(location_ids) == 0:  # one id, values is a single series
            r = self._rows([location_ids])[0]
            return self.mean[r], self.std[r]
        r = self._rows(location_ids)
        return self.mean[r].reshape(-1, 1), self.std[r].reshape(-1, 1)

    def apply(self, values, location_ids=None):
        mean, std = self._params(location_ids)
        return (np.asarray(values, dtype=np.float64) - mean) / std

    def invert(self, values, location_ids=None):
        mean, std = self._params(location_ids)
        return np.asarray(values, dtype=np.float64) * std + mean


def fit_scaler(store: TimeSeriesStore, train_range) -> Scaler:
    lo, hi = train_range
    if hi <= lo:
        raise ConfigError("train_range must be non-empty")
    seg = store.values[:, lo:hi]
    mean = seg.mean(axis=1)
    std = seg.std(axis=1)
    # constant series: std 0 -> epsilon so apply() yields exact zeros
    std = np.where(std < SCALER_EPS, SCALER_EPS, std)
    return Scaler(mean, std, store.location_ids)


# --------------------------------------------------------------------------
# Synthetic data

_CITIES = [
    ("Campbell", "Santa Clara", 41700), ("San Jose", "Santa Clara", 969655),
    ("Fremont", "Alameda", 230504), ("Hayward", "Alameda", 162954),
    ("San Mateo", "San Mateo", 105661), ("Burlingame", "San Mateo", 31386),
    ("Oakland", "Alameda", 440646), ("Sunnyvale", "Santa Clara", 155805),
    ("Palo Alto", "Santa Clara", 68572), ("Milpitas", "Santa Clara", 80273),
    ("Daly City", "San Mateo", 104901), ("Diamond Bar", "Los Angeles", 55072),
]
_FREEWAYS = ["SR87-N", "I880-S", "US101-N", "I280-S", "SR85-N", "I680-N", "SR17-S", "I580-W"]


@dataclass(frozen=True)
class SyntheticSpec:
    n_clusters: int = 3
    series_per_cluster: int = 20
    n_steps: int = 4800
    noise_sigma: float = 4.0
    seed: int = 0
    steps_per_day: int = 96
    interval_minutes: int = 15


def _cluster_dynamics(c: int, n_clusters: int, rng) -> tuple:
    """AR(2) residual coefficients with a cluster-specific oscillation period."""
    # periods 12 * 2**(2c/(n-1)): the lag-12 autocorrelation changes sign across clusters
    frac = c / max(n_clusters - 1, 1)
    period = 12.0 * (4.0 ** frac) * rng.uniform(0.97, 1.03)
    radius = RESID_RADIUS
    theta = 2 * np.pi / period
    return 2 * radius * np.cos(theta), -radius ** 2


def generate_synthetic(spec: SyntheticSpec):
    """Clustered traffic-like series with metadata; returns (store, db, labels).

    ``labels`` maps location_id to cluster index.

    Each cluster shares a daily base profile and a residual AR(2) process with
    a cluster-specific oscillation period; series add amplitude/phase jitter
    and white noise. Cluster-mates sit near one another and on one freeway.
    """
    if min(spec.n_clusters, spec.series_per_cluster, spec.n_steps) <= 0:
        raise ConfigError("synthetic counts must be positive")
    rng = np.random.default_rng(spec.seed)
    P = spec.steps_per_day
    t = np.arange(spec.n_steps)
    n = spec.n_clusters * spec.series_per_cluster
    values = np.empty((n, spec.n_steps))
    labels = {}
    records = []
    ring = 0.05 * max(spec.n_clusters, 2) / (2 * np.pi)
    burn = 200
    lid = 0
    for c in range(spec.n_clusters):
        harm_amp = rng.uniform(5.0, 25.0, size=4) / np.arange(1, 5)
        harm_phase = rng.uniform(0, 2 * np.pi, size=4)
        level = rng.uniform(60.0, 140.0)
        a1, a2 = _cluster_dynamics(c, spec.n_clusters, rng)
        ang = 2 * np.pi * c / spec.n_clusters
        center = (37.35 + ring * np.sin(ang), -121.95 + ring * np.cos(ang))
        freeway = _FREEWAYS[c % len(_FREEWAYS)]
        for s in range(spec.series_per_cluster):
            amp = rng.uniform(0.8, 1.2)
            shift = rng.uniform(-3.0, 3.0)
            phase = 2 * np.pi * (t + shift) / P
            base = level + sum(
                harm_amp[k] * np.cos((k + 1) * phase + harm_phase[k]) for k in range(4))
            innov = rng.normal(0.0, RESID_INNOV, size=spec.n_steps + burn)
            innov[:2] = 0.0  # process starts from rest
            resid = lfilter([1.0], [1.0, -a1, -a2], innov)
            noise = rng.normal(0.0, spec.noise_sigma, size=spec.n_steps)
            values[lid] = np.maximum(amp * base + resid[burn:] + noise, 0.0)
            city, county, pop = _CITIES[(c * 3 + s % 3) % len(_CITIES)]
            lat = center[0] + rng.normal(0.0, GEO_SPREAD_DEG)
            lon = center[1] + rng.normal(0.0, GEO_SPREAD_DEG)
            records.append(dict(location_id=lid, latitude=round(float(lat), 6),
                                longitude=round(float(lon), 6), city=city, county=county,
                                population=pop, freeway=freeway,
                                lanes=int(rng.integers(2, 6))))
            labels[lid] = c
            lid += 1
    values = np.round(values, 6)
    store = TimeSeriesStore(values, tuple(range(n)), spec.interval_minutes, P)
    n_train = spec.n_steps * 6 // 10
    metas = {}
    for r in records:
        vol = int(round(float(values[r["location_id"], :n_train].sum())))
        metas[r["location_id"]] = LocationMeta(historical_total_volume=vol, **r)
    return store, MetadataDB(metas, default_background(n)), labels
