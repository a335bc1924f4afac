# services/tensor_ops.py
"""
Dense third-order tensor and matrix arithmetic.

Tensors are float64 numpy arrays of shape (d1, d2, d3); matrices are float64
arrays of shape (rows, cols). Modes are numbered 1 (origin), 2 (destination)
and 3 (time slice).

Layouts:
    * flat storage (``to_values`` / ``from_values``) is mode-1 fastest, i.e.
      Fortran order: element (x, y, z) sits at x + d1*y + d1*d2*z.
    * the mode-n unfolding is tensorly's: rows index mode n, columns run over
      the remaining modes in increasing order with the last one fastest. For
      mode 1, element (x, y, z) lands at row x, column y*d3 + z.
"""

import numpy as np
import scipy.linalg
import tensorly as tl
from tensorly import tenalg

from services.errors import InputError

MODES = (1, 2, 3)


def _axis(mode):
    if mode not in MODES:
        raise InputError(f"mode must be one of {MODES}, got {mode}")
    return mode - 1


def as_tensor3(values):
    """Validate and convert to a float64 third-order array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise InputError(f"expected a third-order tensor with positive dims, got shape {arr.shape}")
    return arr


def as_matrix(values):
    """Validate and convert to a float64 matrix."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or min(arr.shape) < 1:
        raise InputError(f"expected a matrix with positive dims, got shape {arr.shape}")
    return arr


def from_values(dims, values):
    """Build a tensor from a flat mode-1-fastest value array."""
    values = np.asarray(values, dtype=np.float64).ravel()
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise InputError(f"dims must be three positive integers, got {dims}")
    if values.size != dims[0] * dims[1] * dims[2]:
        raise InputError(f"{values.size} values do not fill dims {dims}")
    return values.reshape(dims, order="F")


def to_values(t):
    """Flatten a tensor in mode-1-fastest order."""
    return as_tensor3(t).ravel(order="F")


def mode_product(t, m, mode):
    """Tensor n-mode product ``t ×_mode m``.

    Args:
        t (np.ndarray): d1×d2×d3 tensor.
        m (np.ndarray): matrix with ``m.shape[1] == t.shape[mode-1]``.
        mode (int): 1, 2 or 3.

    Returns:
        np.ndarray: tensor with dimension ``mode`` replaced by ``m.shape[0]``.
    """
    t = as_tensor3(t)
    m = as_matrix(m)
    axis = _axis(mode)
    if m.shape[1] != t.shape[axis]:
        raise InputError(
            f"mode-{mode} product needs {t.shape[axis]} matrix columns, got {m.shape[1]}"
        )
    return tenalg.mode_dot(t, m, axis)


def matricize(t, mode):
    """Mode-n unfolding (see module docstring for the column order)."""
    t = as_tensor3(t)
    return tl.unfold(t, _axis(mode))


def fold(m, mode, dims):
    """Inverse of :func:`matricize`."""
    m = as_matrix(m)
    dims = tuple(int(d) for d in dims)
    axis = _axis(mode)
    if m.shape[0] != dims[axis] or m.size != dims[0] * dims[1] * dims[2]:
        raise InputError(f"matrix of shape {m.shape} cannot fold into {dims} along mode {mode}")
    return tl.fold(m, axis, dims)


def frobenius_norm(t):
    return float(np.linalg.norm(np.ravel(t)))


def l1_norm(t):
    return float(np.abs(t).sum())


def hadamard(a, b):
    """Elementwise product of two arrays of identical shape."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"hadamard needs equal shapes, got {a.shape} and {b.shape}")
    return a * b


def reconstruct(core, o, d, t):
    """Tucker reconstruction ``core ×1 o ×2 d ×3 t``."""
    core = as_tensor3(core)
    for axis, factor in enumerate((o, d, t)):
        if factor.shape[1] != core.shape[axis]:
            raise InputError(
                f"factor {axis + 1} has {factor.shape[1]} columns, core mode has {core.shape[axis]}"
            )
    return tenalg.multi_mode_dot(core, [o, d, t])


def superdiagonal(rank):
    """rank×rank×rank tensor with ones on the superdiagonal."""
    core = np.zeros((rank, rank, rank))
    idx = np.arange(rank)
    core[idx, idx, idx] = 1.0
    return core


def spectral_norm(m):
    """Largest singular value of a matrix; 0 for an all-zero matrix."""
    m = np.asarray(m, dtype=np.float64)
    if not m.any():
        return 0.0
    return float(scipy.linalg.svdvals(m)[0])
