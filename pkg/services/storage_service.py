# services/storage_service.py
"""
Serialization of tensors, matrices and model checkpoints.

Binary container (``.npz``):
    dims    int64 array with the array shape
    values  float64 array, mode-1 fastest (Fortran order)
    layout  the string "F"

Checkpoint (``.npz``): one entry per factor (``core``, ``o``, ``d``, ``t``
for Tucker kinds; ``o``, ``d``, ``t`` for CP kinds), ``objective_history``
and ``meta``, a JSON string with kind, dims, hyperparameters and seed.

CSV export writes one line per nonzero: ``i,j,k,value`` for tensors and
``i,j,value`` for matrices, 0-based indices.
"""

import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from services.errors import InputError

logger = logging.getLogger(__name__)

_INDEX_COLUMNS = ("i", "j", "k")


def _npz_path(path):
    path = Path(path)
    return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")


def save_array(path, array):
    """Write a 2- or 3-dimensional array to the binary container."""
    array = np.asarray(array, dtype=np.float64)
    path = _npz_path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        dims=np.asarray(array.shape, dtype=np.int64),
        values=array.ravel(order="F"),
        layout=np.asarray("F"),
    )
    logger.debug("saved array %s to %s", array.shape, path)
    return path


def load_array(path):
    """Read an array written by :func:`save_array`."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Array file not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        missing = {"dims", "values", "layout"} - set(data.files)
        if missing:
            raise InputError(f"{path} is not an array container (missing {sorted(missing)})")
        if str(data["layout"]) != "F":
            raise InputError(f"{path}: unsupported layout {data['layout']}")
        dims = tuple(int(d) for d in data["dims"])
        values = data["values"]
    if values.size != int(np.prod(dims)):
        raise InputError(f"{path}: {values.size} values do not fill dims {dims}")
    return values.reshape(dims, order="F")


def write_nonzero_csv(path, array):
    """Export the nonzero cells of a matrix or tensor as CSV."""
    array = np.asarray(array, dtype=np.float64)
    idx = np.nonzero(array)
    columns = {name: ix for name, ix in zip(_INDEX_COLUMNS, idx)}
    columns["value"] = array[idx]
    frame = pd.DataFrame(columns)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # repr-exact floats so a CSV round trip is bit-identical
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def read_nonzero_csv(path, dims):
    """Inverse of :func:`write_nonzero_csv` for an array of shape ``dims``."""
    dims = tuple(int(d) for d in dims)
    names = list(_INDEX_COLUMNS[: len(dims)])
    frame = pd.read_csv(path, float_precision="round_trip")
    if list(frame.columns) != names + ["value"]:
        raise InputError(f"{path}: expected header {','.join(names + ['value'])}")
    array = np.zeros(dims)
    if frame.empty:
        return array
    index = tuple(frame[name].to_numpy(dtype=np.int64) for name in names)
    for axis, ix in enumerate(index):
        bad = np.flatnonzero((ix < 0) | (ix >= dims[axis]))
        if bad.size:
            # +2: header line plus 1-based numbering
            raise InputError(f"index {names[axis]}={ix[bad[0]]} out of range", line=int(bad[0]) + 2)
    array[index] = frame["value"].to_numpy(dtype=np.float64)
    return array


def save_checkpoint(path, factors, objective_history, meta):
    """Write a model checkpoint.

    Args:
        path (str or Path): target ``.npz`` file.
        factors (dict[str, np.ndarray]): factor arrays keyed by name.
        objective_history (sequence of float): recorded objective per round.
        meta (dict): JSON-serializable metadata (kind, dims, hyperparameters, seed).
    """
    path = _npz_path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: np.asarray(value, dtype=np.float64) for name, value in factors.items()}
    np.savez(
        path,
        objective_history=np.asarray(objective_history, dtype=np.float64),
        meta=np.asarray(json.dumps(meta, sort_keys=True)),
        **arrays,
    )
    logger.info("checkpoint written to %s", path)
    return path


def load_checkpoint(path):
    """Read a checkpoint; returns ``(factors, objective_history, meta)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if "meta" not in data.files:
            raise InputError(f"{path} is not a checkpoint (no meta entry)")
        meta = json.loads(str(data["meta"]))
        history = data["objective_history"].tolist()
        factors = {
            name: data[name] for name in data.files if name not in ("meta", "objective_history")
        }
    return factors, history, meta
