"""Neighbor sets for a target location: road network, pattern similarity, geodetic."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import DataError, DcatsError

EARTH_RADIUS_KM = 6371.0
KINDS = ("road", "pattern", "geodetic")


class UndefinedSimilarityError(DcatsError, ValueError):
    """Every window of one input is constant, so no correlation exists."""


def geodetic_distance(a, b) -> float:
    """Great-circle (haversine) distance in km between two (lat, lon) points in degrees."""
    for lat, lon in (a, b):
        if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
            raise ValueError(f"coordinate out of range: ({lat}, {lon})")
    lat1, lon1 = map(math.radians, a)
    lat2, lon2 = map(math.radians, b)
    h = (math.sin((lat2 - lat1) / 2) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2)
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


# --------------------------------------------------------------------------
# road network

@dataclass
class RoadGraph:
    nodes: list
    edges: list  # (a, b, length_km)
    _index: dict = field(init=False, repr=False)
    _csr: object = field(init=False, repr=False, default=None)

    def __post_init__(self):
        self.nodes = sorted(set(int(n) for n in self.nodes))
        self._index = {n: i for i, n in enumerate(self.nodes)}
        clean = []
        for a, b, w in self.edges:
            a, b, w = int(a), int(b), float(w)
            if a == b:
                raise DataError(f"self-loop on node {a}")
            if not w > 0:
                raise DataError(f"edge ({a}, {b}) has non-positive length {w}")
            if a not in self._index or b not in self._index:
                raise DataError(f"edge ({a}, {b}) references a node outside the graph")
            clean.append((a, b, w))
        self.edges = clean

    def __contains__(self, node) -> bool:
        return int(node) in self._index

    def _matrix(self):
        if self._csr is None:
            n = len(self.nodes)
            best = {}
            for a, b, w in self.edges:
                key = (min(a, b), max(a, b))
                best[key] = min(w, best.get(key, math.inf))
            rows = [self._index[a] for a, _ in best] + [self._index[b] for _, b in best]
            cols = [self._index[b] for _, b in best] + [self._index[a] for a, _ in best]
            data = list(best.values()) * 2
            self._csr = coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
        return self._csr

    def distances_from(self, source) -> dict:
        """Shortest-path km from ``source`` to every reachable node (source included)."""
        if source not in self:
            raise KeyError(f"node {source} not in road graph")
        dist = dijkstra(self._matrix(), directed=False, indices=self._index[int(source)])
        return {n: float(d) for n, d in zip(self.nodes, dist) if np.isfinite(d)}


def road_distance(graph: RoadGraph, a, b):
    """Shortest weighted path length in km, or ``None`` when ``b`` is unreachable."""
    if b not in graph:
        raise KeyError(f"node {b} not in road graph")
    return graph.distances_from(a).get(int(b))


def load_road_graph(path) -> RoadGraph:
    path = Path(path)
    edges = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"from_id", "to_id", "length_km"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected header from_id,to_id,length_km")
        for lineno, rec in enumerate(reader, start=2):
            try:
                edges.append((int(rec["from_id"]), int(rec["to_id"]), float(rec["length_km"])))
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
    nodes = {a for a, _, _ in edges} | {b for _, b, _ in edges}
    return RoadGraph(sorted(nodes), edges)


def save_road_graph(graph: RoadGraph, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["from_id", "to_id", "length_km"])
        for a, b, length in graph.edges:
            w.writerow([a, b, repr(length)])


def road_graph_from_metadata(db) -> RoadGraph:
    """Chain sensors sharing a freeway, ordered along the freeway's main axis.

    Positions are projected onto the first principal axis of the freeway's
    coordinates (local equirectangular frame); consecutive sensors are joined
    with their geodetic distance as edge length.
    """
    by_fwy = {}
    for lid in db.ids():
        meta = db[lid]
        if meta.freeway:
            by_fwy.setdefault(meta.freeway, []).append(meta)
    edges = []
    for fwy in sorted(by_fwy):
        metas = by_fwy[fwy]
        if len(metas) < 2:
            continue
        lat0 = np.mean([m.latitude for m in metas])
        xy = np.array([[m.longitude * math.cos(math.radians(lat0)), m.latitude] for m in metas])
        xy -= xy.mean(axis=0)
        _, _, vt = np.linalg.svd(xy, full_matrices=False)
        axis = vt[0] if vt[0][np.argmax(np.abs(vt[0]))] > 0 else -vt[0]
        pos = xy @ axis
        order = sorted(range(len(metas)), key=lambda i: (pos[i], metas[i].location_id))
        for i, j in zip(order, order[1:]):
            a, b = metas[i], metas[j]
            d = geodetic_distance((a.latitude, a.longitude), (b.latitude, b.longitude))
            edges.append((a.location_id, b.location_id, max(d, 1e-6)))
    return RoadGraph(db.ids(), edges)


# --------------------------------------------------------------------------
# pattern similarity

def znorm_windows(x, m: int):
    """Z-normalized sliding windows of ``x`` and a mask of non-constant windows."""
    x = np.asarray(x, dtype=np.float64)
    win = sliding_window_view(x, m)
    valid = win.max(axis=1) > win.min(axis=1)
    mu = win.mean(axis=1)
    sd = win.std(axis=1)
    z = (win[valid] - mu[valid, None]) / sd[valid, None]
    return z, valid


def corr_to_dist(r, m: int):
    """Z-normalized Euclidean distance matching Pearson correlation ``r``."""
    return np.sqrt(np.maximum(2.0 * m * (1.0 - np.asarray(r)), 0.0))


def _max_corr(zx, zy, m: int, chunk: int = 2048) -> float:
    best = -np.inf
    for s in range(0, len(zx), chunk):
        best = max(best, float((zx[s:s + chunk] @ zy.T).max()))
    return best / m


def pattern_similarity(x, y, m: int) -> float:
    """Maximum Pearson correlation between any length-``m`` window of x and any of y.

    Equivalent to the minimum z-normalized distance d via r = 1 - d^2 / (2m).
    Constant windows are skipped. Exactly symmetric in (x, y).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if m < 2 or len(x) < m or len(y) < m:
        raise ValueError(f"need len(x), len(y) >= m >= 2 (got {len(x)}, {len(y)}, m={m})")
    # fixed argument order so floating-point summation is identical for (x, y) and (y, x)
    if (len(x), x.tobytes()) > (len(y), y.tobytes()):
        x, y = y, x
    zx, _ = znorm_windows(x, m)
    zy, _ = znorm_windows(y, m)
    if len(zx) == 0 or len(zy) == 0:
        raise UndefinedSimilarityError("all windows are constant in at least one series")
    return float(np.clip(_max_corr(zx, zy, m), -1.0, 1.0))


# --------------------------------------------------------------------------
# neighbor sets

@dataclass(frozen=True)
class NeighborEntry:
    location_id: int
    kind: str
    value: float

    @property
    def annotation_kind(self) -> str:
        return "similarity" if self.kind == "pattern" else "distance"


@dataclass(frozen=True)
class NeighborSets:
    target: int
    road: tuple
    pattern: tuple
    geodetic: tuple

    def by_kind(self, kind: str) -> tuple:
        return getattr(self, kind)

    def all_ids(self) -> list:
        seen = []
        for kind in KINDS:
            for e in self.by_kind(kind):
                if e.location_id not in seen:
                    seen.append(e.location_id)
        return seen

    def is_empty(self) -> bool:
        return not (self.road or self.pattern or self.geodetic)


def _rank(items, k, descending=False):
    key = (lambda t: (-t[1], t[0])) if descending else (lambda t: (t[1], t[0]))
    return sorted(items, key=key)[:k]


def build_neighbor_sets(store, db, graph, target, k: int = 10, m=None, train_range=None,
                        suffix=None, pool=None, cache=None, workers: int = 1) -> NeighborSets:
    """Rank candidates for ``target`` under the three criteria; ties go to the lower id.

    ``train_range`` bounds the pattern join (default: whole series); ``suffix``
    keeps only its last ``suffix`` steps. ``cache`` is an optional dict shared
    across calls, keyed by the unordered id pair.
    """
    target = int(target)
    if target not in store or target not in db:
        raise KeyError(f"unknown target location_id {target}")
    m = store.steps_per_day if m is None else m
    lo, hi = train_range if train_range is not None else (0, store.n_steps)
    if suffix is not None:
        lo = max(lo, hi - suffix)
    candidates = [int(c) for c in (pool if pool is not None else store.location_ids) if int(c) != target]

    tmeta = db[target]
    geo = []
    for c in candidates:
        if c in db:
            cm = db[c]
            geo.append((c, geodetic_distance((tmeta.latitude, tmeta.longitude),
                                             (cm.latitude, cm.longitude))))

    road = []
    if graph is not None and target in graph:
        reach = graph.distances_from(target)
        road = [(c, reach[c]) for c in candidates if c in reach]

    xt = store.series(target)[lo:hi]

    def sim(c):
        key = (min(target, c), max(target, c), m, lo, hi)
        if cache is not None and key in cache:
            return cache[key]
        try:
            val = pattern_similarity(xt, store.series(c)[lo:hi], m)
        except UndefinedSimilarityError:
            val = None
        if cache is not None:
            cache[key] = val
        return val

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            sims = list(ex.map(sim, candidates))
    else:
        sims = [sim(c) for c in candidates]
    pat = [(c, s) for c, s in zip(candidates, sims) if s is not None]

    def entries(items, kind):
        return tuple(NeighborEntry(c, kind, float(v)) for c, v in items)

    return NeighborSets(
        target=target,
        road=entries(_rank(road, k), "road"),
        pattern=entries(_rank(pat, k, descending=True), "pattern"),
        geodetic=entries(_rank(geo, k), "geodetic"),
    )


def save_neighbor_sets(sets, path) -> None:
    """Diagnostic CSV: target_id,kind,rank,neighbor_id,value."""
    if isinstance(sets, NeighborSets):
        sets = [sets]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target_id", "kind", "rank", "neighbor_id", "value"])
        for ns in sets:
            for kind in KINDS:
                for rank, e in enumerate(ns.by_kind(kind), start=1):
                    w.writerow([ns.target, kind, rank, e.location_id, f"{e.value:.6f}"])
