# services/synth_generator.py
"""
Seeded synthetic city with planted ground-truth factors.

Zones sit on a ``rows × cols`` grid. Spatial patterns are contiguous blocks
of zones, temporal patterns are unimodal bumps over the day, and the core is
diagonal-heavy with a planted tidal flow: in the first rhythm every
community sends traffic into community 0, in the last one community 0 sends
it back out.
"""

import dataclasses
import logging
from pathlib import Path

import numpy as np

from services import ingestion_service as ingest
from services import tensor_ops
from services.errors import InputError
from services.factorization_service import FactorModel

logger = logging.getLogger(__name__)

# -------- CONFIG (tweak these) --------
DEFAULT_GRID_ROWS = 6
DEFAULT_GRID_COLS = 5
DEFAULT_SLICES = 12
DEFAULT_PATTERNS = 4
DEFAULT_RHYTHMS = 3
DEFAULT_NOISE = 0.01

MEMBER_WEIGHT = 1.0          # projection weight of a zone on its own pattern
LEAK_WEIGHT = 0.1            # upper bound of the weight on foreign patterns
DIAGONAL_WEIGHT = 1.0
TIDAL_WEIGHT = 0.6
BACKGROUND_WEIGHT = 0.05
RHYTHM_FLOOR = 0.05
CONTEXT_PERTURBATION = 0.05
POI_BASE_RATE = 2.0
POI_DOMINANT_RATE = 20.0


@dataclasses.dataclass(frozen=True)
class PlantSpec:
    """Geometry, pattern dimensions and noise of a synthetic city.

    M = grid_rows * grid_cols zones, N = slices.
    """

    grid_rows: int = DEFAULT_GRID_ROWS
    grid_cols: int = DEFAULT_GRID_COLS
    slices: int = DEFAULT_SLICES
    dim_i: int = DEFAULT_PATTERNS
    dim_j: int = DEFAULT_PATTERNS
    dim_k: int = DEFAULT_RHYTHMS
    noise: float = DEFAULT_NOISE
    seed: int = 0

    def __post_init__(self):
        for name in ("grid_rows", "grid_cols", "slices", "dim_i", "dim_j", "dim_k"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be positive")
        if not np.isfinite(self.noise) or self.noise < 0:
            raise InputError("noise must be finite and nonnegative")
        if max(self.dim_i, self.dim_j) > self.zones:
            raise InputError(
                f"{max(self.dim_i, self.dim_j)} community blocks do not fit a "
                f"{self.grid_rows}×{self.grid_cols} grid"
            )
        if self.dim_k > self.slices:
            raise InputError(f"{self.dim_k} rhythms do not fit {self.slices} slices")

    @property
    def zones(self):
        return self.grid_rows * self.grid_cols

    @property
    def dims(self):
        return (self.dim_i, self.dim_j, self.dim_k)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**data)


# ---------- GEOMETRY ----------

def snake_order(rows, cols):
    """Zone indices (row-major numbering) in boustrophedon order."""
    order = []
    for r in range(rows):
        cells = range(r * cols, (r + 1) * cols)
        order.extend(cells if r % 2 == 0 else reversed(cells))
    return np.asarray(order, dtype=np.int64)


def community_blocks(rows, cols, count):
    """Split the grid into ``count`` contiguous blocks of near-equal size.

    Blocks are consecutive runs of the snake ordering, so each one is
    connected under 4-adjacency.
    """
    if count > rows * cols:
        raise InputError(f"{count} blocks exceed a {rows}×{cols} grid")
    labels = np.empty(rows * cols, dtype=np.int64)
    for block, cells in enumerate(np.array_split(snake_order(rows, cols), count)):
        labels[cells] = block
    return labels


def grid_graph(rows, cols):
    """4-adjacency of a row-major grid."""
    pairs = []
    for r in range(rows):
        for c in range(cols):
            x = r * cols + c
            if c + 1 < cols:
                pairs.append((x, x + 1))
            if r + 1 < rows:
                pairs.append((x, x + cols))
    return ingest.NeighborGraph.from_pairs(pairs, rows * cols)


# ---------- PLANTED FACTORS ----------

def _projection(labels, count, rng):
    v = rng.uniform(0.0, LEAK_WEIGHT, size=(len(labels), count))
    v[np.arange(len(labels)), labels] = MEMBER_WEIGHT + rng.uniform(0.0, LEAK_WEIGHT, size=len(labels))
    return v


def rhythm_templates(slices, count):
    """Unimodal bumps with evenly spaced peaks, one column per rhythm."""
    z = np.arange(slices, dtype=np.float64)
    centers = (np.arange(count) + 0.5) * slices / count
    width = max(slices / (2.0 * count), 0.5)
    return RHYTHM_FLOOR + np.exp(-0.5 * ((z[:, None] - centers[None, :]) / width) ** 2)


def planted_core(dims, rng):
    i, j, k = dims
    core = rng.uniform(0.0, BACKGROUND_WEIGHT, size=dims)
    for p in range(min(i, j)):
        core[p, p, :] += DIAGONAL_WEIGHT
    core[1:, 0, 0] += TIDAL_WEIGHT
    if k > 1:
        core[0, 1:, k - 1] += TIDAL_WEIGHT
    return core


def planted_context(labels, count, rng):
    """Row-cosine of a perturbed one-hot membership matrix."""
    g = np.zeros((len(labels), count))
    g[np.arange(len(labels)), labels] = 1.0
    g += rng.uniform(0.0, CONTEXT_PERTURBATION, size=g.shape)
    unit = g / np.linalg.norm(g, axis=1, keepdims=True)
    w = np.clip(unit @ unit.T, 0.0, 1.0)
    np.fill_diagonal(w, 1.0)
    return ingest.ContextMatrix(w=w, contextless=np.zeros(len(labels), dtype=bool))


def planted_labels(spec):
    """Origin and destination block labels of the plant."""
    return (
        community_blocks(spec.grid_rows, spec.grid_cols, spec.dim_i),
        community_blocks(spec.grid_rows, spec.grid_cols, spec.dim_j),
    )


def generate(spec):
    """Plant a model and draw a noisy tensor from it.

    Returns:
        tuple: (ground_truth FactorModel, r, ContextMatrix, NeighborGraph)
    """
    rng = np.random.default_rng(spec.seed)
    origin_labels, dest_labels = planted_labels(spec)
    model = FactorModel(
        core=planted_core(spec.dims, rng),
        o=_projection(origin_labels, spec.dim_i, rng),
        d=_projection(dest_labels, spec.dim_j, rng),
        t=rhythm_templates(spec.slices, spec.dim_k),
    )
    r = model.reconstruct()
    if spec.noise > 0:
        r = np.clip(r + rng.normal(0.0, spec.noise, size=r.shape), 0.0, None)
    w = planted_context(origin_labels, spec.dim_i, rng)
    graph = grid_graph(spec.grid_rows, spec.grid_cols)
    logger.info(
        "synthetic city: %d zones, %d slices, dims %s, noise %.3g, seed %d",
        spec.zones, spec.slices, spec.dims, spec.noise, spec.seed,
    )
    return model, r, w, graph


def sample_mask(dims, rate, seed):
    """Bernoulli(rate) 0/1 mask of shape ``dims``."""
    if not 0 < rate <= 1:
        raise InputError(f"sampling rate {rate} out of (0, 1]")
    dims = tuple(int(d) for d in dims)
    if rate == 1:
        return np.ones(dims)
    rng = np.random.default_rng(seed)
    return (rng.random(dims) < rate).astype(np.float64)


# ---------- RECORD EMISSION ----------

def trip_counts(r):
    """Integer trip counts whose ``ln(1 + count)`` is closest to ``r``."""
    return np.rint(np.expm1(tensor_ops.as_tensor3(r))).clip(min=0.0)


def trips_from_counts(counts, seed):
    """One TripRecord per counted trip, in a seeded random order."""
    counts = tensor_ops.as_tensor3(counts).astype(np.int64)
    x, y, z = np.nonzero(counts)
    repeats = counts[x, y, z]
    origin = np.repeat(x, repeats)
    dest = np.repeat(y, repeats)
    slot = np.repeat(z, repeats)
    order = np.random.default_rng(seed).permutation(len(origin))
    return [
        ingest.TripRecord(f"v{n:07d}", int(origin[p]), int(dest[p]), int(slot[p]))
        for n, p in enumerate(order)
    ]


def planted_poi(labels, count, seed, category_names=ingest.DEFAULT_POI_CATEGORIES):
    """POI counts where every community favors its own categories."""
    rng = np.random.default_rng(seed)
    h = len(category_names)
    rates = np.full((len(labels), h), POI_BASE_RATE)
    for block in range(count):
        rates[labels == block, block % h] = POI_DOMINANT_RATE
    return ingest.PoiTable(counts=rng.poisson(rates).astype(np.float64), category_names=tuple(category_names))


def emit_city(spec, out_dir):
    """Write the city as the CSV inputs the ingest command reads.

    Returns:
        dict: paths of ``trips``, ``poi``, ``categories`` and ``adjacency``
        plus the in-memory ``counts`` the trips were drawn from and the
        generated ``ground_truth``, ``tensor``, ``context`` and ``graph``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, r, w, graph = generate(spec)
    counts = trip_counts(r)
    origin_labels, _ = planted_labels(spec)
    poi = planted_poi(origin_labels, spec.dim_i, spec.seed)
    paths = {
        "trips": out_dir / "trips.csv",
        "poi": out_dir / "poi.csv",
        "categories": out_dir / "categories.txt",
        "adjacency": out_dir / "adjacency.csv",
    }
    ingest.write_trips_csv(paths["trips"], trips_from_counts(counts, spec.seed))
    ingest.write_poi_csv(paths["poi"], poi)
    ingest.write_category_names(paths["categories"], poi.category_names)
    ingest.write_adjacency_csv(paths["adjacency"], graph)
    logger.info("synthetic city written to %s (%d trips)", out_dir, int(counts.sum()))
    return {**paths, "counts": counts, "ground_truth": model, "tensor": r, "context": w, "graph": graph}
