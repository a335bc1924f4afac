# services/analysis_service.py
"""
Reading a fitted model: communities, rhythms, intensities and errors.

Reports are exported as plot-ready CSV tables plus one JSON document.
"""

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment

from services import tensor_ops
from services.errors import InputError

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = "%.12g"


# ---------- COMMUNITIES ----------

@dataclasses.dataclass
class CommunityAssignment:
    """Crisp partition of zones by their strongest spatial pattern.

    ``members[i]`` lists the zones of pattern i; patterns nobody joined are
    listed in ``empty``.
    """

    labels: np.ndarray
    members: list
    empty: list

    @property
    def communities(self):
        """Indices of the non-empty patterns."""
        return [i for i, m in enumerate(self.members) if len(m)]


def assign_communities(v):
    """Label every zone with the argmax of its row; ties go to the lowest index."""
    v = tensor_ops.as_matrix(v)
    if (v < 0).any():
        raise InputError("projection matrix must be nonnegative")
    labels = np.argmax(v, axis=1)
    members = [np.flatnonzero(labels == i) for i in range(v.shape[1])]
    empty = [i for i, m in enumerate(members) if not len(m)]
    return CommunityAssignment(labels=labels, members=members, empty=empty)


def community_contiguity(assignment, graph):
    """Share of zones in multi-member communities with a same-community neighbor."""
    labels = assignment.labels
    sizes = np.bincount(labels, minlength=len(assignment.members))
    eligible = [x for x in range(len(labels)) if sizes[labels[x]] > 1]
    if not eligible:
        return 1.0
    linked = sum(any(labels[y] == labels[x] for y in graph.neighbors[x]) for x in eligible)
    return linked / len(eligible)


def label_agreement(labels, reference):
    """Fraction of zones with equal labels."""
    labels = np.asarray(labels)
    reference = np.asarray(reference)
    if labels.shape != reference.shape:
        raise InputError("label vectors differ in length")
    return float((labels == reference).mean())


def matched_label_agreement(labels, reference):
    """Label agreement after the one-to-one relabeling that maximizes it.

    Labels are compared up to a permutation of pattern indices, found by
    Hungarian matching on the label overlap counts.
    """
    labels = np.asarray(labels, dtype=np.int64)
    reference = np.asarray(reference, dtype=np.int64)
    if labels.shape != reference.shape:
        raise InputError("label vectors differ in length")
    if not labels.size:
        raise InputError("no labels to compare")
    size = int(max(labels.max(), reference.max())) + 1
    overlap = np.zeros((size, size))
    np.add.at(overlap, (labels, reference), 1.0)
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    return float(overlap[rows, cols].sum() / labels.size)


# ---------- RHYTHMS ----------

@dataclasses.dataclass
class RhythmReport:
    energies: np.ndarray
    rescaled: np.ndarray


def temporal_component(model, k):
    """Reconstruction using only temporal pattern k (other T columns zeroed)."""
    if not 0 <= k < model.t.shape[1]:
        raise InputError(f"temporal pattern {k} out of range")
    t_k = np.zeros_like(model.t)
    t_k[:, k] = model.t[:, k]
    return tensor_ops.reconstruct(model.core, model.o, model.d, t_k)


def pattern_energy(model, k):
    """Mean absolute value of the pattern-k component tensor."""
    component = temporal_component(model, k)
    return tensor_ops.l1_norm(component) / component.size


def pattern_energies(model):
    return np.array([pattern_energy(model, k) for k in range(model.t.shape[1])])


def rescaled_coefficients(model, energies=None):
    """T columns normalized to sum to their pattern's energy (zero columns stay 0)."""
    if energies is None:
        energies = pattern_energies(model)
    sums = model.t.sum(axis=0)
    shares = np.divide(model.t, sums, out=np.zeros_like(model.t), where=sums > 0)
    return shares * energies


def rhythm_report(model):
    energies = pattern_energies(model)
    return RhythmReport(energies=energies, rescaled=rescaled_coefficients(model, energies))


# ---------- CORE INTENSITIES ----------

@dataclasses.dataclass
class IntensityReport:
    cprime: np.ndarray
    inter: np.ndarray
    intra: np.ndarray


def concentrated_core(model):
    """``c'_ijk = c_ijk · Σ_x o_xi · Σ_y d_yj · Σ_z t_zk``."""
    o_sum = model.o.sum(axis=0)
    d_sum = model.d.sum(axis=0)
    t_sum = model.t.sum(axis=0)
    return model.core * o_sum[:, None, None] * d_sum[None, :, None] * t_sum[None, None, :]


def inter_intra_intensity(cprime):
    """Per-community inter- and intra-community traffic intensities."""
    cprime = tensor_ops.as_tensor3(cprime)
    if cprime.shape[0] != cprime.shape[1]:
        raise InputError(f"inter/intra intensities need I == J, got {cprime.shape[:2]}")
    flows = cprime.sum(axis=2)
    intra = np.diag(flows).copy()
    incoming = flows.sum(axis=0) - intra
    outgoing = flows.sum(axis=1) - intra
    return IntensityReport(cprime=cprime, inter=incoming + outgoing, intra=intra)


def od_slice(cprime, k):
    """Community-level OD matrix of rhythm k."""
    cprime = tensor_ops.as_tensor3(cprime)
    if not 0 <= k < cprime.shape[2]:
        raise InputError(f"rhythm {k} out of range")
    return cprime[:, :, k].copy()


def community_flows(cprime, community, k):
    """Incoming (column) and outgoing (row) flows of one community in rhythm k."""
    od = od_slice(cprime, k)
    if not 0 <= community < min(od.shape):
        raise InputError(f"community {community} out of range")
    return od[:, community].copy(), od[community, :].copy()


def intensity_deltas(earlier, later):
    """Inter/intra increments between two IntensityReports of aligned models."""
    if earlier.inter.shape != later.inter.shape:
        raise InputError("intensity reports have different community counts")
    return {"inter": later.inter - earlier.inter, "intra": later.intra - earlier.intra}


def rhythm_deltas(earlier, later):
    """Rescaled-curve differences between two aligned models (later minus earlier)."""
    before = rescaled_coefficients(earlier)
    after = rescaled_coefficients(later)
    if before.shape != after.shape:
        raise InputError(f"rhythm curves differ in shape: {before.shape} vs {after.shape}")
    return after - before


def sequence_deltas(sequence):
    """Year-over-year intensity and rhythm changes of a PatternSequence."""
    deltas = []
    models = list(sequence.models)
    for (prev_label, prev), (label, model) in zip(
        zip(sequence.labels, models), zip(sequence.labels[1:], models[1:])
    ):
        entry = {"label": label, "previous_label": prev_label, "rhythm": rhythm_deltas(prev, model)}
        if prev.dims[0] == prev.dims[1]:
            entry.update(intensity_deltas(
                inter_intra_intensity(concentrated_core(prev)),
                inter_intra_intensity(concentrated_core(model)),
            ))
        deltas.append(entry)
    return deltas


# ---------- ERRORS ----------

def rmse(r, r_hat, mask=None):
    """Root mean square error over all cells, or over the mask's 1-cells."""
    r = np.asarray(r, dtype=np.float64)
    r_hat = np.asarray(r_hat, dtype=np.float64)
    if r.shape != r_hat.shape:
        raise InputError(f"shape mismatch: {r.shape} vs {r_hat.shape}")
    sq = (r - r_hat) ** 2
    if mask is None:
        count = float(sq.size)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != r.shape:
            raise InputError(f"mask shape {mask.shape} does not match {r.shape}")
        count = float(mask.sum())
        if count == 0:
            raise InputError("mask selects no cells")
        sq = sq * mask
    return float(np.sqrt(sq.sum() / count))


def rmse_report(r, r_hat, train_mask=None):
    """Both RMSE conventions for a completion run.

    ``full_rmse`` divides by every cell of the tensor; ``held_out_rmse`` is
    taken over the cells the training mask left out (None when it left out
    nothing); ``train_rmse`` over the observed cells.
    """
    report = {"full_rmse": rmse(r, r_hat), "held_out_rmse": None, "train_rmse": None}
    if train_mask is not None:
        train_mask = np.asarray(train_mask, dtype=np.float64)
        report["train_rmse"] = rmse(r, r_hat, train_mask)
        held_out = 1.0 - train_mask
        if held_out.any():
            report["held_out_rmse"] = rmse(r, r_hat, held_out)
    return report


# ---------- EXPORT ----------

def build_report(model, graph=None):
    """Everything the analysis produces for one Tucker model, as plain data."""
    origin = assign_communities(model.o)
    destination = assign_communities(model.d)
    rhythms = rhythm_report(model)
    cprime = concentrated_core(model)
    report = {
        "dims": list(model.dims),
        "origin_communities": {
            "labels": origin.labels.tolist(),
            "empty": origin.empty,
        },
        "destination_communities": {
            "labels": destination.labels.tolist(),
            "empty": destination.empty,
        },
        "energies": rhythms.energies.tolist(),
        "rescaled_coefficients": rhythms.rescaled.tolist(),
        "concentrated_core": cprime.tolist(),
    }
    if cprime.shape[0] == cprime.shape[1]:
        intensities = inter_intra_intensity(cprime)
        report["inter"] = intensities.inter.tolist()
        report["intra"] = intensities.intra.tolist()
    if graph is not None:
        report["origin_contiguity"] = community_contiguity(origin, graph)
        report["destination_contiguity"] = community_contiguity(destination, graph)
    return report


def _community_label(index, empty):
    return "empty" if index in empty else f"C{index}"


def write_reports(model, out_dir, graph=None):
    """Write the CSV tables and ``report.json``; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = build_report(model, graph)
    paths = []

    origin = assign_communities(model.o)
    destination = assign_communities(model.d)
    zones = pd.DataFrame({
        "zone": np.arange(model.o.shape[0]),
        "origin_community": origin.labels,
        "destination_community": destination.labels,
    })
    paths.append(out_dir / "communities.csv")
    zones.to_csv(paths[-1], index=False)

    pattern_rows = []
    for side, assignment in (("origin", origin), ("destination", destination)):
        for i, members in enumerate(assignment.members):
            pattern_rows.append({
                "side": side,
                "pattern": i,
                "community": _community_label(i, assignment.empty),
                "size": len(members),
            })
    paths.append(out_dir / "patterns.csv")
    pd.DataFrame(pattern_rows).to_csv(paths[-1], index=False)

    rescaled = np.asarray(report["rescaled_coefficients"])
    rhythms = pd.DataFrame(rescaled, columns=[f"tp{k}" for k in range(rescaled.shape[1])])
    rhythms.insert(0, "slice", np.arange(rescaled.shape[0]))
    paths.append(out_dir / "rhythms.csv")
    rhythms.to_csv(paths[-1], index=False, float_format=CSV_FLOAT_FORMAT)

    cprime = np.asarray(report["concentrated_core"])
    i, j, k = np.indices(cprime.shape)
    core_table = pd.DataFrame({
        "origin_pattern": i.ravel(),
        "destination_pattern": j.ravel(),
        "temporal_pattern": k.ravel(),
        "intensity": cprime.ravel(),
    })
    paths.append(out_dir / "concentrated_core.csv")
    core_table.to_csv(paths[-1], index=False, float_format=CSV_FLOAT_FORMAT)

    if "inter" in report:
        intensities = pd.DataFrame({
            "community": np.arange(len(report["inter"])),
            "inter": report["inter"],
            "intra": report["intra"],
        })
        paths.append(out_dir / "intensities.csv")
        intensities.to_csv(paths[-1], index=False, float_format=CSV_FLOAT_FORMAT)

    paths.append(out_dir / "report.json")
    paths[-1].write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("analysis reports written to %s", out_dir)
    return paths
