# services/sequence_service.py
"""
Multi-year pattern evolution by pipeline initialization.

Year 1 is solved from a seeded random start; every later year starts from
the previous year's solution and sees only its own tensor and context, so
patterns are inherited by column index without any cross-year penalty.
"""

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

from services import factorization_service as fs
from services import tensor_ops
from services.errors import InputError

logger = logging.getLogger(__name__)


@dataclasses.dataclass
class YearInput:
    label: str
    tensor: np.ndarray
    context: object
    mask: np.ndarray | None = None


@dataclasses.dataclass
class DriftReport:
    """How far year l's factors moved from year l-1's."""

    label: str
    previous_label: str
    drift_o: float
    drift_d: float
    drift_t: float
    column_correlation_o: np.ndarray

    def to_dict(self):
        return {
            "label": self.label,
            "previous_label": self.previous_label,
            "drift_o": self.drift_o,
            "drift_d": self.drift_d,
            "drift_t": self.drift_t,
            "column_correlation_o": self.column_correlation_o.tolist(),
        }


@dataclasses.dataclass
class PatternSequence:
    labels: list
    models: list
    histories: list
    drift: list

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return iter(zip(self.labels, self.models, self.histories))


def relative_drift(current, previous):
    """‖current - previous‖_F / ‖previous‖_F (absolute change if previous is 0)."""
    base = tensor_ops.frobenius_norm(previous)
    change = tensor_ops.frobenius_norm(current - previous)
    return change / base if base > 0 else change


def column_correlation(previous, current):
    """Pearson correlation of every previous column with every current column.

    Constant columns correlate 0 with everything.
    """
    a = previous - previous.mean(axis=0)
    b = current - current.mean(axis=0)
    norms = np.outer(np.linalg.norm(a, axis=0), np.linalg.norm(b, axis=0))
    return np.divide(a.T @ b, norms, out=np.zeros_like(norms), where=norms > 0)


def _check_inputs(inputs):
    if not inputs:
        raise InputError("a pattern sequence needs at least one year")
    shape = np.shape(inputs[0].tensor)
    for year in inputs[1:]:
        if np.shape(year.tensor) != shape:
            raise InputError(f"year {year.label}: tensor shape {np.shape(year.tensor)} differs from {shape}")


def pi_tsa(inputs, h, graph=None, seed=0, solve=None):
    """Solve a sequence of years, each warm-started at its predecessor.

    Args:
        inputs (list[YearInput]): years in chronological order.
        h (Hyperparameters): shared hyperparameters.
        graph (NeighborGraph, optional): zone adjacency for the neighbor pass.
        seed (int): seed of the first year's random start.
        solve (callable, optional): solver with ``bcd_solve``'s signature.

    Returns:
        PatternSequence
    """
    _check_inputs(inputs)
    solve = solve or fs.bcd_solve
    labels, models, histories, drift = [], [], [], []
    init = fs.init_model(inputs[0].tensor, h.dims, seed)
    for year in inputs:
        result = solve(year.tensor, year.context, h, init, neighbor_graph=graph, mask=year.mask)
        model = result.model
        if models:
            prev = models[-1]
            report = DriftReport(
                label=year.label,
                previous_label=labels[-1],
                drift_o=relative_drift(model.o, prev.o),
                drift_d=relative_drift(model.d, prev.d),
                drift_t=relative_drift(model.t, prev.t),
                column_correlation_o=column_correlation(prev.o, model.o),
            )
            drift.append(report)
            logger.info(
                "year %s: drift O=%.3g D=%.3g T=%.3g", year.label,
                report.drift_o, report.drift_d, report.drift_t,
            )
        labels.append(year.label)
        models.append(model)
        histories.append(result.history)
        init = model.copy()
    return PatternSequence(labels=labels, models=models, histories=histories, drift=drift)


def read_sequence_manifest(path):
    """Read the sequence manifest.

    JSON: ``{"years": [{"label": "2008", "tensor": "...npz", "context": "...npz",
    "mask": optional}, ...]}``; relative paths resolve against the manifest.
    """
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    years = data.get("years")
    if not isinstance(years, list) or not years:
        raise InputError(f"{path}: manifest needs a non-empty 'years' list")
    entries = []
    for entry in years:
        missing = {"label", "tensor", "context"} - set(entry)
        if missing:
            raise InputError(f"{path}: year entry missing {sorted(missing)}")
        resolved = {
            key: str((path.parent / entry[key]).resolve()) if key in ("tensor", "context", "mask") else entry[key]
            for key in entry if entry[key] is not None
        }
        entries.append(resolved)
    return entries
