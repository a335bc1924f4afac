from collections import Counter

import numpy as np
import pandas as pd
import pytest

from services import ingestion_service as ingest
from services import synth_generator as synth
from services.errors import InputError


# ── data tensor ──────────────────────────────────────────────────────────────

def _random_trips(rng, count, zones, slices):
    return [
        ingest.TripRecord(f"v{n}", int(rng.integers(zones)), int(rng.integers(zones)), int(rng.integers(slices)))
        for n in range(count)
    ]


def test_data_tensor_matches_counting_oracle(rng):
    trips = _random_trips(rng, 1000, 5, 4)
    r, report = ingest.build_data_tensor(trips, 5, 4)
    counts = Counter((t.origin_zone, t.dest_zone, t.start_slice) for t in trips)
    assert report.accepted == 1000 and report.rejected == 0
    for x in range(5):
        for y in range(5):
            for z in range(4):
                assert r[x, y, z] == np.log1p(counts.get((x, y, z), 0))


def test_data_tensor_ignores_record_order(rng):
    trips = _random_trips(rng, 300, 4, 3)
    shuffled = [trips[n] for n in rng.permutation(len(trips))]
    np.testing.assert_array_equal(ingest.build_data_tensor(trips, 4, 3)[0], ingest.build_data_tensor(shuffled, 4, 3)[0])


def test_log_scale_preserves_trip_total(rng):
    trips = _random_trips(rng, 777, 6, 5)
    r, _ = ingest.build_data_tensor(trips, 6, 5)
    assert abs(np.expm1(r).sum() - 777) <= 1e-9


def test_out_of_range_trips_are_rejected():
    trips = [
        ingest.TripRecord("a", 0, 1, 0),
        ingest.TripRecord("b", 3, 1, 0),
        ingest.TripRecord("c", 0, 1, 9),
    ]
    counts, report = ingest.count_trips(trips, 3, 2)
    assert (report.accepted, report.rejected) == (1, 2)
    assert counts.sum() == 1.0


def test_dataframe_and_records_agree(rng, tmp_path):
    trips = _random_trips(rng, 200, 4, 3)
    path = tmp_path / "trips.csv"
    ingest.write_trips_csv(path, trips)
    frame = ingest.read_trips_csv(path)
    np.testing.assert_array_equal(
        ingest.build_data_tensor(frame, 4, 3)[0], ingest.build_data_tensor(trips, 4, 3)[0]
    )


def test_malformed_trip_line_is_reported(tmp_path):
    path = tmp_path / "trips.csv"
    path.write_text("vid,origin_zone,dest_zone,slice\nv1,0,1,0\nv2,0,x,1\n")
    with pytest.raises(InputError, match="line 3"):
        ingest.read_trips_csv(path)


def test_workday_filter(tmp_path):
    path = tmp_path / "trips.csv"
    path.write_text(
        "vid,origin_zone,dest_zone,slice,date\n"
        "a,0,1,0,2015-03-02\n"   # Monday
        "b,0,1,0,2015-03-06\n"   # Friday
        "c,0,1,0,2015-03-07\n"   # Saturday
        "d,0,1,0,2015-03-04\n"   # Wednesday, excluded below
    )
    assert ingest.read_trips_csv(path, workdays_only=True)["vid"].tolist() == ["a", "b", "d"]
    kept = ingest.read_trips_csv(path, workdays_only=True, exclude_dates=["2015-03-04"])
    assert kept["vid"].tolist() == ["a", "b"]


def test_date_filter_needs_date_column(tmp_path):
    path = tmp_path / "trips.csv"
    path.write_text("vid,origin_zone,dest_zone,slice\nv1,0,1,0\n")
    with pytest.raises(InputError):
        ingest.read_trips_csv(path, workdays_only=True)


# ── urban context ────────────────────────────────────────────────────────────

def test_context_vectors_match_recomputation(rng):
    counts = rng.integers(1, 10, size=(4, 3)).astype(float)
    table = ingest.PoiTable(counts=counts, category_names=("a", "b", "c"))
    u = ingest.poi_context_vectors(table)
    total = counts.sum()
    for p in range(4):
        for h in range(3):
            assert u[p, h] == pytest.approx(counts[p, h] / counts[:, h].sum())
        assert u[p, 3] == pytest.approx(counts[p].sum() / total)
    np.testing.assert_array_equal(ingest.poi_context_vector(table, 2), u[2])


def test_context_similarity_by_hand():
    table = ingest.PoiTable(counts=np.array([[3.0, 0.0], [0.0, 5.0]]), category_names=("a", "b"))
    w = ingest.build_context_matrix(table).w
    u_a = np.array([1.0, 0.0, 3 / 8])
    u_b = np.array([0.0, 1.0, 5 / 8])
    expected = u_a @ u_b / (np.linalg.norm(u_a) * np.linalg.norm(u_b))
    assert w[0, 1] == pytest.approx(expected, rel=1e-12)
    assert w[0, 0] == 1.0 and w[1, 1] == 1.0
    assert w[0, 1] == w[1, 0]


def test_context_similarity_stays_in_unit_range(rng):
    counts = rng.integers(0, 50, size=(12, 6)).astype(float)
    counts[3] = 0.0
    w = ingest.build_context_matrix(ingest.PoiTable(counts=counts, category_names=tuple("abcdef"))).w
    assert (w >= 0).all() and (w <= 1 + 1e-12).all()
    np.testing.assert_array_equal(w, w.T)


def test_zone_without_poi_is_contextless():
    table = ingest.PoiTable(counts=np.array([[1.0, 0.0], [0.0, 2.0], [0.0, 0.0]]), category_names=("a", "b"))
    context = ingest.build_context_matrix(table)
    assert context.contextless.tolist() == [False, False, True]
    assert not context.w[2].any() and not context.w[:, 2].any()
    mask = context.penalty_mask()
    assert mask[0, 1] == 1.0 and mask[2, 0] == 0.0 and mask[2, 2] == 0.0


def test_context_from_array_flags_zero_diagonal():
    w = np.array([[1.0, 0.3, 0.0], [0.3, 1.0, 0.0], [0.0, 0.0, 0.0]])
    context = ingest.context_from_array(w)
    assert context.contextless.tolist() == [False, False, True]
    with pytest.raises(InputError):
        ingest.context_from_array(np.array([[1.0, 0.2], [0.1, 1.0]]))


def test_poi_csv_round_trip(tmp_path):
    table = ingest.PoiTable(counts=np.array([[2.0, 0.0, 1.0], [0.0, 4.0, 0.0]]), category_names=("a", "b", "c"))
    path = tmp_path / "poi.csv"
    ingest.write_poi_csv(path, table)
    loaded = ingest.read_poi_csv(path, 2, ("a", "b", "c"))
    np.testing.assert_array_equal(loaded.counts, table.counts)


def test_poi_row_out_of_range(tmp_path):
    path = tmp_path / "poi.csv"
    path.write_text("zone,category,count\n0,1,3\n1,7,2\n")
    with pytest.raises(InputError, match="line 3"):
        ingest.read_poi_csv(path, 2, ("a", "b"))


# ── neighbor graph ───────────────────────────────────────────────────────────

def test_neighbor_graph_is_symmetric(tmp_path):
    path = tmp_path / "adj.csv"
    path.write_text("zone_a,zone_b\n0,1\n2,1\n3,3\n")
    graph = ingest.build_neighbor_graph(path, 5)
    assert graph.neighbors[1] == frozenset({0, 2})
    assert graph.neighbors[0] == frozenset({1})
    assert graph.isolated().tolist() == [False, False, False, True, True]
    assert graph.pairs() == [(0, 1), (1, 2)]


def test_dangling_adjacency_index(tmp_path):
    path = tmp_path / "adj.csv"
    path.write_text("zone_a,zone_b\n0,1\n1,9\n")
    with pytest.raises(InputError, match="line 3"):
        ingest.build_neighbor_graph(path, 4)


def test_grid_degree_histogram(tmp_path):
    rows, cols = 21, 31
    path = tmp_path / "grid.csv"
    ingest.write_adjacency_csv(path, synth.grid_graph(rows, cols))
    graph = ingest.build_neighbor_graph(path, rows * cols)
    assert graph.zones == 651

    pairs = pd.read_csv(path)
    recount = np.bincount(np.concatenate([pairs["zone_a"], pairs["zone_b"]]), minlength=651)
    np.testing.assert_array_equal(graph.degrees(), recount)
    histogram = Counter(graph.degrees().tolist())
    assert histogram == {2: 4, 3: 2 * (rows - 2) + 2 * (cols - 2), 4: (rows - 2) * (cols - 2)}


@pytest.mark.parametrize("row", ["1,two", "0,1.7", "1,"])
def test_non_integer_adjacency_cell(tmp_path, row):
    path = tmp_path / "adj.csv"
    path.write_text(f"zone_a,zone_b\n0,1\n{row}\n")
    with pytest.raises(InputError, match="line 3"):
        ingest.build_neighbor_graph(path, 4)


@pytest.mark.parametrize("row", ["1,2,lots", "1,2,2.5", "x,1,3", "1,1.5,3"])
def test_non_integer_poi_cell(tmp_path, row):
    path = tmp_path / "poi.csv"
    path.write_text(f"zone,category,count\n0,1,3\n{row}\n")
    with pytest.raises(InputError, match="line 3"):
        ingest.read_poi_csv(path, 2, ("a", "b"))
