import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcats.errors import DataError
from dcats.metadata import render_neighbor_entry
from dcats.neighbors import (KINDS, RoadGraph, UndefinedSimilarityError, build_neighbor_sets, geodetic_distance,
                             load_road_graph, pattern_similarity, road_distance, save_neighbor_sets,
                             save_road_graph)

from oracles import all_simple_path_min, brute_max_pearson, brute_rank, great_circle_km


def test_geodetic_examples():
    assert geodetic_distance((37.0, -122.0), (37.0, -122.0)) == 0.0
    assert abs(geodetic_distance((0.0, 0.0), (0.0, 180.0)) - math.pi * 6371.0) < 1e-6
    sf_la = geodetic_distance((37.7749, -122.4194), (34.0522, -118.2437))
    assert abs(sf_la - 559.0) <= 1.0
    assert abs(sf_la - great_circle_km((37.7749, -122.4194), (34.0522, -118.2437))) < 1e-6


@given(st.floats(-90, 90), st.floats(-180, 180), st.floats(-90, 90), st.floats(-180, 180))
def test_geodetic_matches_oracle_and_is_symmetric(a1, o1, a2, o2):
    d = geodetic_distance((a1, o1), (a2, o2))
    assert d == geodetic_distance((a2, o2), (a1, o1))
    assert abs(d - great_circle_km((a1, o1), (a2, o2))) < 1e-6


def test_geodetic_rejects_out_of_range():
    with pytest.raises(ValueError):
        geodetic_distance((91.0, 0.0), (0.0, 0.0))


def test_road_graph_examples():
    g = RoadGraph([1, 2, 3, 4, 5], [(1, 2, 1.0), (2, 3, 2.0), (1, 3, 5.0), (4, 5, 1.0)])
    assert road_distance(g, 1, 1) == 0.0
    assert road_distance(g, 1, 3) == 3.0
    assert road_distance(g, 1, 5) is None
    with pytest.raises(KeyError):
        road_distance(g, 1, 99)


def test_road_graph_invariants_enforced():
    with pytest.raises(DataError):
        RoadGraph([1, 2], [(1, 1, 1.0)])
    with pytest.raises(DataError):
        RoadGraph([1, 2], [(1, 2, 0.0)])
    with pytest.raises(DataError):
        RoadGraph([1, 2], [(1, 3, 1.0)])


def test_five_node_graph_matches_path_enumeration():
    edges = [(0, 1, 4.0), (0, 2, 1.0), (2, 1, 2.0), (1, 3, 1.0), (2, 3, 5.0), (3, 4, 3.0)]
    g = RoadGraph(range(5), edges)
    for a in range(5):
        for b in range(5):
            assert road_distance(g, a, b) == pytest.approx(all_simple_path_min(edges, a, b), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 8), st.data())
def test_random_graphs_match_oracle_and_triangle_inequality(n, data):
    # spanning chain keeps the graph connected, then random extra edges
    edges = [(i, i + 1, data.draw(st.floats(0.1, 10.0))) for i in range(n - 1)]
    for _ in range(data.draw(st.integers(0, 8))):
        a, b = data.draw(st.integers(0, n - 1)), data.draw(st.integers(0, n - 1))
        if a != b:
            edges.append((a, b, data.draw(st.floats(0.1, 10.0))))
    g = RoadGraph(range(n), edges)
    d = {(a, b): road_distance(g, a, b) for a in range(n) for b in range(n)}
    for (a, b), v in d.items():
        assert v == pytest.approx(all_simple_path_min(edges, a, b), rel=1e-12, abs=1e-12)
        for c in range(n):
            assert d[a, b] <= d[a, c] + d[c, b] + 1e-9


def test_graph_file_round_trip(tmp_path):
    g = RoadGraph([1, 2, 3], [(1, 2, 1.5), (2, 3, 0.25)])
    save_road_graph(g, tmp_path / "g.csv")
    again = load_road_graph(tmp_path / "g.csv")
    assert again.edges == g.edges
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n", encoding="utf-8")
    with pytest.raises(DataError):
        load_road_graph(tmp_path / "bad.csv")


def test_pattern_similarity_examples():
    assert pattern_similarity([1, 2, 3, 4], [1, 3, 2, 4], 4) == pytest.approx(0.8, abs=1e-12)
    x = np.random.default_rng(0).normal(size=60)
    for m in (2, 5, 60):
        assert pattern_similarity(x, x, m) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(UndefinedSimilarityError):
        pattern_similarity(np.ones(10), x, 4)


def test_planted_subsequence_gives_one():
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=300), rng.normal(size=250)
    y[100:148] = 3.0 * x[40:88] + 7.0
    assert pattern_similarity(x, y, 48) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(48, 200), st.integers(48, 200))
def test_pattern_similarity_oracle_symmetry_clamp(seed, nx, ny):
    rng = np.random.default_rng(seed)
    x = np.cumsum(rng.normal(size=nx))
    y = np.cumsum(rng.normal(size=ny))
    fast = pattern_similarity(x, y, 48)
    assert fast == pattern_similarity(y, x, 48)
    assert -1.0 <= fast <= 1.0
    assert abs(fast - brute_max_pearson(x, y, 48)) < 1e-9


def test_neighbor_sets_shape_and_order(small_ws):
    ws = small_ws
    ns = ws.neighbor_sets(0, k=10, m=24)
    for kind in KINDS:
        entries = ns.by_kind(kind)
        ids = [e.location_id for e in entries]
        assert len(entries) <= 10 and 0 not in ids and len(set(ids)) == len(ids)
        vals = [e.value for e in entries]
        assert vals == sorted(vals, reverse=(kind == "pattern"))
    assert all(-1.0 <= e.value <= 1.0 for e in ns.pattern)
    assert all(e.value >= 0 for e in ns.road + ns.geodetic)


def test_neighbor_ranking_matches_brute_force(small_ws):
    ws = small_ws
    store, db = ws.store, ws.db
    lo, hi = ws.split.train_range
    target = 4
    ns = build_neighbor_sets(store, db, ws.graph, target, k=6, m=24, train_range=(lo, hi))
    others = [i for i in store.location_ids if i != target]
    pat = [(c, brute_max_pearson(store.series(target)[lo:hi], store.series(c)[lo:hi], 24)) for c in others]
    t = db[target]
    geo = [(c, geodetic_distance((t.latitude, t.longitude), (db[c].latitude, db[c].longitude))) for c in others]
    edges = ws.graph.edges
    road = [(c, all_simple_path_min(edges, target, c)) for c in others]
    road = [(c, v) for c, v in road if v is not None]
    assert [e.location_id for e in ns.pattern] == brute_rank(pat, 6, descending=True)
    assert [e.location_id for e in ns.geodetic] == brute_rank(geo, 6)
    assert [e.location_id for e in ns.road] == brute_rank(road, 6)


def test_ties_broken_by_lower_id(small_synth):
    store, db, _ = small_synth
    g = RoadGraph(db.ids(), [(0, 5, 1.0), (0, 3, 1.0), (0, 9, 1.0)])
    ns = build_neighbor_sets(store, db, g, 0, k=3, m=24, train_range=(0, 200))
    assert [e.location_id for e in ns.road] == [3, 5, 9]


def test_pattern_head_is_cluster_mate(small_ws):
    ws = small_ws
    labels = ws.labels
    for target in ws.store.location_ids:
        ns = ws.neighbor_sets(target, k=10)
        head = ns.pattern[0]
        assert labels[head.location_id] == labels[target]
        cross = [e.value for e in ns.pattern if labels[e.location_id] != labels[target]]
        assert all(head.value > v for v in cross)


def test_every_neighbor_renders(small_ws, tmp_path):
    ns = small_ws.neighbor_sets(2, k=10, m=24)
    for kind in KINDS:
        for e in ns.by_kind(kind):
            text = render_neighbor_entry(small_ws.db, e.location_id, e.annotation_kind, e.value)
            assert text.startswith(f"location_id={e.location_id}, ")
    rendered = [render_neighbor_entry(small_ws.db, e.location_id, "similarity", e.value) for e in ns.pattern]
    assert all(", similarity=" in r for r in rendered)
    save_neighbor_sets(ns, tmp_path / "n.csv")
    head = (tmp_path / "n.csv").read_text().splitlines()[0]
    assert head == "target_id,kind,rank,neighbor_id,value"
