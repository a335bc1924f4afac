# services/neighbor_regularizer.py
"""
Neighboring regularization of the spatial projection matrices.

A single CRF-style correction per solver round: unary potentials come from
the row-normalized projection matrix, pairwise potentials from a Gaussian
kernel on the observed mobility slices of adjacent zones, and the combined
potential pulls each zone's memberships toward those of behaviorally similar
neighbors. O is regularized with origin slices ``R[x, :, :]``, D with
destination slices ``R[:, y, :]``.
"""

import dataclasses
import logging

import numpy as np

from services.errors import InputError

logger = logging.getLogger(__name__)

ORIGIN = "origin"
DESTINATION = "destination"
SIDES = (ORIGIN, DESTINATION)

EPSILON_FLOOR = 1e-12


@dataclasses.dataclass(frozen=True)
class NrConfig:
    sigma_nr: float
    epsilon_floor: float = EPSILON_FLOOR

    def __post_init__(self):
        if not self.sigma_nr > 0:
            raise InputError(f"sigma_nr must be positive, got {self.sigma_nr}")
        if not 0 < self.epsilon_floor <= 1e-6:
            raise InputError(f"epsilon_floor must be in (0, 1e-6], got {self.epsilon_floor}")


def zone_profiles(r, side):
    """One row per zone: its flattened origin or destination slice."""
    r = np.asarray(r, dtype=np.float64)
    if side == ORIGIN:
        return r.reshape(r.shape[0], -1)
    if side == DESTINATION:
        return np.moveaxis(r, 1, 0).reshape(r.shape[1], -1)
    raise InputError(f"side must be one of {SIDES}, got {side!r}")


def pair_distances_sq(r, pairs, side):
    """Squared Frobenius distances between the slices of each zone pair."""
    profiles = zone_profiles(r, side)
    if not len(pairs):
        return np.zeros(0)
    pairs = np.asarray(pairs, dtype=np.int64)
    diff = profiles[pairs[:, 0]] - profiles[pairs[:, 1]]
    return np.einsum("ij,ij->i", diff, diff)


def pairwise_kernel(r, x, y, side, cfg):
    """Gaussian kernel ``exp(-‖slice_x - slice_y‖_F² / (2 σ²))``."""
    if x == y:
        raise InputError("pairwise kernel needs two distinct zones")
    dist_sq = pair_distances_sq(r, [(x, y)], side)[0]
    return float(np.exp(-dist_sq / (2.0 * cfg.sigma_nr ** 2)))


def median_sigma(r, graph, side):
    """Median slice distance over all neighbor pairs (1.0 if undefined)."""
    dist = np.sqrt(pair_distances_sq(r, graph.pairs(), side))
    sigma = float(np.median(dist)) if dist.size else 0.0
    if not sigma > 0:
        logger.warning("median %s slice distance is zero; using sigma_nr=1.0", side)
        sigma = 1.0
    return sigma


@dataclasses.dataclass
class PairwiseKernelCache:
    """Kernel values g(x, y) for every adjacent pair, as a dense weight matrix.

    ``weights[x, y]`` is g(x, y) when y is a neighbor of x and 0 otherwise.
    """

    weights: np.ndarray
    side: str
    sigma_nr: float

    @classmethod
    def build(cls, r, graph, side, cfg):
        zones = zone_profiles(r, side).shape[0]
        if graph.zones != zones:
            raise InputError(f"neighbor graph has {graph.zones} zones, tensor has {zones}")
        pairs = graph.pairs()
        weights = np.zeros((zones, zones))
        if pairs:
            g = np.exp(-pair_distances_sq(r, pairs, side) / (2.0 * cfg.sigma_nr ** 2))
            a, b = np.asarray(pairs).T
            weights[a, b] = g
            weights[b, a] = g
        return cls(weights=weights, side=side, sigma_nr=cfg.sigma_nr)


def normalize_rows(v):
    """Row-normalize to memberships; all-zero rows become uniform."""
    v = np.asarray(v, dtype=np.float64)
    sums = v.sum(axis=1, keepdims=True)
    uniform = np.full_like(v, 1.0 / v.shape[1])
    return np.divide(v, sums, out=uniform, where=sums > 0)


def unary_potentials(v, cfg):
    """``ψ^u = -log(max(o', floor))`` over the row-normalized matrix."""
    return -np.log(np.maximum(normalize_rows(v), cfg.epsilon_floor))


def pairwise_potentials(v_normalized, kernels, graph):
    """Average pairwise potential ``Q_xi = Σ_{y∈M_x} g(x,y) (1 - o'_yi)``.

    With the Potts-style potential (g for different labels, 0 for equal ones)
    the double sum over neighbors and other labels reduces to this form.
    """
    v_normalized = np.asarray(v_normalized, dtype=np.float64)
    if kernels.weights.shape[0] != v_normalized.shape[0] or graph.zones != v_normalized.shape[0]:
        raise InputError("kernel cache, graph and matrix disagree on the number of zones")
    return kernels.weights @ (1.0 - v_normalized)


def nr_update(v, v_prev_round, r, graph, cfg, side, kernels=None):
    """One neighboring-regularization correction of a projection matrix.

    Args:
        v (np.ndarray): projection matrix after this round's block update.
        v_prev_round (np.ndarray): the accepted matrix of the previous round.
        r (np.ndarray): data tensor the kernels are defined on.
        graph (NeighborGraph): zone adjacency.
        cfg (NrConfig): kernel width and log floor.
        side (str): ``"origin"`` for O, ``"destination"`` for D.
        kernels (PairwiseKernelCache, optional): precomputed kernels.

    Returns:
        np.ndarray: corrected, nonnegative matrix of the same shape.
    """
    v = np.asarray(v, dtype=np.float64)
    v_prev_round = np.asarray(v_prev_round, dtype=np.float64)
    if v.shape != v_prev_round.shape:
        raise InputError(f"shape mismatch: {v.shape} vs {v_prev_round.shape}")
    if kernels is None:
        kernels = PairwiseKernelCache.build(r, graph, side, cfg)

    normalized = normalize_rows(v)
    zeta = unary_potentials(v, cfg) + pairwise_potentials(normalized, kernels, graph)
    regularized = np.exp(-zeta) * v.sum(axis=1, keepdims=True)

    delta_nr = regularized - v
    delta_fit = v - v_prev_round
    out = np.where(
        delta_fit <= 0,
        np.maximum(0.0, v_prev_round + delta_fit + delta_nr),
        v_prev_round + np.maximum(0.0, delta_fit + delta_nr),
    )
    isolated = graph.isolated()
    out[isolated] = v[isolated]
    return out
