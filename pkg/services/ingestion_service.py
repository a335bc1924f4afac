# services/ingestion_service.py
"""
Build the model inputs from tabular records.

* data tensor R: counts of origin-destination-slice trips rescaled by
  ``ln(1 + count)``;
* context matrix W: cosine similarity of per-zone POI context vectors;
* neighbor graph: symmetric zone adjacency.

Upstream contract: map matching and zoning happen before this module. The
trip CSV already carries zone and slice indices (``vid,origin_zone,dest_zone,
slice`` plus an optional ISO ``date`` column used by the workday filter).
"""

import dataclasses
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from services.errors import InputError

logger = logging.getLogger(__name__)

TRIP_COLUMNS = ("vid", "origin_zone", "dest_zone", "slice")
POI_COLUMNS = ("zone", "category", "count")
ADJACENCY_COLUMNS = ("zone_a", "zone_b")

DEFAULT_POI_CATEGORIES = (
    "food & beverage service",
    "hotel",
    "scenic spot",
    "finance & insurance",
    "corporate business",
    "shopping service",
    "transportation facilities",
    "education and culture",
    "business building",
    "residence",
    "living service",
    "sports & entertainments",
    "medical care",
    "government agencies",
)


@dataclasses.dataclass(frozen=True)
class TripRecord:
    """One origin-destination-time record after map matching."""

    vehicle_id: str
    origin_zone: int
    dest_zone: int
    start_slice: int


@dataclasses.dataclass(frozen=True)
class IngestReport:
    accepted: int
    rejected: int


@dataclasses.dataclass
class PoiTable:
    """POI counts per zone (rows) and category (columns)."""

    counts: np.ndarray
    category_names: tuple

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.counts.ndim != 2 or self.counts.shape[1] < 1:
            raise InputError("POI counts must be an M×H matrix with H >= 1")
        if (self.counts < 0).any():
            raise InputError("POI counts must be nonnegative")
        if len(self.category_names) != self.counts.shape[1]:
            raise InputError(
                f"{len(self.category_names)} category names for {self.counts.shape[1]} columns"
            )

    @property
    def zones(self):
        return self.counts.shape[0]


@dataclasses.dataclass
class ContextMatrix:
    """Urban-context similarity matrix.

    ``contextless`` flags zones without any POI; their rows and columns are
    zero and they are left out of the context penalty.
    """

    w: np.ndarray
    contextless: np.ndarray

    @property
    def zones(self):
        return self.w.shape[0]

    def penalty_mask(self):
        """Pairs that enter the context penalty, or None when all do."""
        if not self.contextless.any():
            return None
        keep = ~self.contextless
        return np.outer(keep, keep).astype(np.float64)


@dataclasses.dataclass(frozen=True)
class NeighborGraph:
    """Per-zone sets of adjacent zones; symmetric, no self-loops."""

    neighbors: tuple

    @classmethod
    def from_pairs(cls, pairs, zones):
        sets = [set() for _ in range(zones)]
        for a, b in pairs:
            if a == b:
                continue
            sets[a].add(b)
            sets[b].add(a)
        return cls(tuple(frozenset(s) for s in sets))

    @property
    def zones(self):
        return len(self.neighbors)

    def degrees(self):
        return np.array([len(s) for s in self.neighbors], dtype=np.int64)

    def isolated(self):
        """Boolean mask of zones with no neighbors."""
        return self.degrees() == 0

    def pairs(self):
        """Undirected edges as sorted ``(x, y)`` tuples with x < y."""
        return sorted((x, y) for x, ys in enumerate(self.neighbors) for y in ys if x < y)


# ---------- DATA TENSOR ----------

def _parse_integer_columns(frame, columns, path):
    """Convert string columns to int64 in place; the first non-integer cell raises with its line."""
    for column in columns:
        parsed = pd.to_numeric(frame[column], errors="coerce")
        bad = parsed.isna() | (parsed != parsed.round())
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise InputError(f"{path}: {column}={frame[column].iloc[row]!r} is not an integer", line=row + 2)
        frame[column] = parsed.astype(np.int64)


def _trip_arrays(trips):
    if isinstance(trips, pd.DataFrame):
        return (
            trips["origin_zone"].to_numpy(dtype=np.int64),
            trips["dest_zone"].to_numpy(dtype=np.int64),
            trips["slice"].to_numpy(dtype=np.int64),
        )
    trips = list(trips)
    if not trips:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    return (
        np.fromiter((t.origin_zone for t in trips), dtype=np.int64, count=len(trips)),
        np.fromiter((t.dest_zone for t in trips), dtype=np.int64, count=len(trips)),
        np.fromiter((t.start_slice for t in trips), dtype=np.int64, count=len(trips)),
    )


def count_trips(trips, zones, slices):
    """Raw trip counts per (origin, destination, slice).

    Args:
        trips: iterable of TripRecord or a DataFrame with the trip CSV columns.
        zones (int): number of zones M.
        slices (int): number of time slices N.

    Returns:
        tuple: (M×M×N count array, IngestReport)
    """
    if zones < 1 or slices < 1:
        raise InputError("zones and slices must be positive")
    origin, dest, slot = _trip_arrays(trips)
    ok = (
        (origin >= 0) & (origin < zones)
        & (dest >= 0) & (dest < zones)
        & (slot >= 0) & (slot < slices)
    )
    rejected = int((~ok).sum())
    if rejected:
        logger.warning("rejected %d trip records with out-of-range indices", rejected)
    counts = np.zeros((zones, zones, slices))
    np.add.at(counts, (origin[ok], dest[ok], slot[ok]), 1.0)
    return counts, IngestReport(accepted=int(ok.sum()), rejected=rejected)


def build_data_tensor(trips, zones, slices):
    """Data tensor ``r = ln(1 + count)``; returns ``(tensor, IngestReport)``."""
    counts, report = count_trips(trips, zones, slices)
    logger.info("data tensor built from %d trips (%d rejected)", report.accepted, report.rejected)
    return np.log1p(counts), report


def read_trips_csv(path, workdays_only=False, exclude_dates=()):
    """Parse the trip CSV into a DataFrame, applying the workday filter.

    Rows whose indices are not integers raise InputError with the line number.
    When ``workdays_only`` is set, the file must have a ``date`` column; only
    Monday–Friday dates not listed in ``exclude_dates`` are kept.
    """
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in TRIP_COLUMNS if c not in frame.columns]
    if missing:
        raise InputError(f"{path}: missing columns {missing}", line=1)
    _parse_integer_columns(frame, TRIP_COLUMNS[1:], path)

    if workdays_only or exclude_dates:
        if "date" not in frame.columns:
            raise InputError(f"{path}: date filtering needs a 'date' column", line=1)
        dates = pd.to_datetime(frame["date"], errors="coerce")
        if dates.isna().any():
            row = int(np.flatnonzero(dates.isna().to_numpy())[0])
            raise InputError(f"{path}: unparsable date {frame['date'].iloc[row]!r}", line=row + 2)
        keep = pd.Series(True, index=frame.index)
        if workdays_only:
            keep &= dates.dt.dayofweek < 5
        if exclude_dates:
            keep &= ~dates.dt.normalize().isin(pd.to_datetime(list(exclude_dates)))
        logger.info("date filter kept %d of %d trips", int(keep.sum()), len(frame))
        frame = frame[keep.to_numpy()]
    return frame.reset_index(drop=True)


# ---------- URBAN CONTEXT ----------

def read_category_names(path):
    """One category name per line, in category-id order."""
    names = [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines()]
    return tuple(n for n in names if n)


def read_poi_csv(path, zones, category_names=DEFAULT_POI_CATEGORIES):
    """Parse ``zone,category,count`` rows (categories 1..H) into a PoiTable."""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(frame.columns[:3]) != list(POI_COLUMNS):
        raise InputError(f"{path}: expected header {','.join(POI_COLUMNS)}", line=1)
    _parse_integer_columns(frame, POI_COLUMNS, path)
    h = len(category_names)
    counts = np.zeros((zones, h))
    for row, (zone, category, count) in enumerate(frame[list(POI_COLUMNS)].itertuples(index=False)):
        if not (0 <= zone < zones) or not (1 <= category <= h) or count < 0:
            raise InputError(f"{path}: bad POI row ({zone}, {category}, {count})", line=row + 2)
        counts[int(zone), int(category) - 1] += count
    return PoiTable(counts=counts, category_names=tuple(category_names))


def poi_context_vectors(table):
    """All context vectors ``u_p = (c_p1, …, c_pH, n_p)`` as an M×(H+1) matrix.

    ``c_ph`` is the share of category h's POIs located in zone p (0 when the
    category is absent citywide) and ``n_p`` the zone's share of all POIs.
    """
    counts = table.counts
    total = counts.sum()
    if total <= 0:
        raise InputError("POI table is all zero")
    column_totals = counts.sum(axis=0)
    shares = np.divide(counts, column_totals, out=np.zeros_like(counts), where=column_totals > 0)
    volume = counts.sum(axis=1, keepdims=True) / total
    return np.hstack([shares, volume])


def poi_context_vector(table, p):
    """Context vector of a single zone p (length H+1)."""
    if not 0 <= p < table.zones:
        raise InputError(f"zone {p} out of range")
    return poi_context_vectors(table)[p]


def build_context_matrix(table):
    """Cosine similarity of POI context vectors.

    Zones with a zero context vector are flagged context-less: zero row and
    column, zero diagonal.
    """
    u = poi_context_vectors(table)
    norms = np.linalg.norm(u, axis=1)
    contextless = norms == 0
    unit = np.divide(u, norms[:, None], out=np.zeros_like(u), where=~contextless[:, None])
    w = unit @ unit.T
    w = 0.5 * (w + w.T)
    np.clip(w, 0.0, 1.0, out=w)
    idx = np.flatnonzero(~contextless)
    w[idx, idx] = 1.0
    if contextless.any():
        logger.warning("%d zones have no POIs and are left out of the context penalty", int(contextless.sum()))
    return ContextMatrix(w=w, contextless=contextless)


def context_from_array(w):
    """Rebuild a ContextMatrix from a stored matrix; zero diagonal marks context-less zones."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise InputError(f"context matrix must be square, got {w.shape}")
    if not np.allclose(w, w.T, atol=1e-12):
        raise InputError("context matrix must be symmetric")
    return ContextMatrix(w=w, contextless=np.diag(w) == 0)


# ---------- NEIGHBOR GRAPH ----------

def build_neighbor_graph(adjacency_file, zones):
    """Read ``zone_a,zone_b`` pairs and return their symmetric closure."""
    frame = pd.read_csv(adjacency_file, dtype=str, keep_default_na=False)
    if list(frame.columns[:2]) != list(ADJACENCY_COLUMNS):
        raise InputError(f"{adjacency_file}: expected header {','.join(ADJACENCY_COLUMNS)}", line=1)
    _parse_integer_columns(frame, ADJACENCY_COLUMNS, adjacency_file)
    pairs = []
    for row, (a, b) in enumerate(frame[list(ADJACENCY_COLUMNS)].itertuples(index=False)):
        if not (0 <= a < zones and 0 <= b < zones):
            raise InputError(f"{adjacency_file}: dangling zone index in pair ({a}, {b})", line=row + 2)
        pairs.append((int(a), int(b)))
    graph = NeighborGraph.from_pairs(pairs, zones)
    logger.info("neighbor graph: %d zones, %d edges", zones, len(graph.pairs()))
    return graph


# ---------- CSV EMITTERS ----------

def write_trips_csv(path, trips):
    rows = [(t.vehicle_id, t.origin_zone, t.dest_zone, t.start_slice) for t in trips]
    pd.DataFrame(rows, columns=list(TRIP_COLUMNS)).to_csv(path, index=False)


def write_poi_csv(path, table):
    zone, category = np.nonzero(table.counts)
    pd.DataFrame({
        "zone": zone,
        "category": category + 1,
        "count": table.counts[zone, category].astype(np.int64),
    }).to_csv(path, index=False)


def write_adjacency_csv(path, graph):
    pd.DataFrame(graph.pairs(), columns=list(ADJACENCY_COLUMNS)).to_csv(path, index=False)


def write_category_names(path, names):
    Path(path).write_text("\n".join(names) + "\n", encoding="utf-8")
