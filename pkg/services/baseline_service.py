# services/baseline_service.py
"""
Baseline factorizations for the completion comparison.

* CP: R ≈ Σ_m o_m ∘ d_m ∘ t_m with L1 on O, D, T;
* rCP: CP plus the context terms α‖W - OOᵀ‖² + β‖W - DDᵀ‖²;
* Tucker: the Tucker factorization without context and neighbor terms.

All of them run through :func:`factorization_service.run_bcd`, so steps,
step sizes and extrapolation are the ones the main model uses.
"""

import dataclasses
import logging

import numpy as np
import tensorly as tl
from tensorly import tenalg

from services import factorization_service as fs
from services import tensor_ops
from services.errors import InputError

logger = logging.getLogger(__name__)

CP_BLOCKS = ("o", "d", "t")


@dataclasses.dataclass
class CpModel:
    """Rank-m CP factors O (M×m), D (M×m), T (N×m)."""

    o: np.ndarray
    d: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.o = tensor_ops.as_matrix(self.o)
        self.d = tensor_ops.as_matrix(self.d)
        self.t = tensor_ops.as_matrix(self.t)
        if not self.o.shape[1] == self.d.shape[1] == self.t.shape[1]:
            raise InputError("CP factors must share the same rank")

    @property
    def rank(self):
        return self.o.shape[1]

    @property
    def data_shape(self):
        return (self.o.shape[0], self.d.shape[0], self.t.shape[0])

    def blocks(self):
        return {"o": self.o, "d": self.d, "t": self.t}

    def reconstruct(self):
        return cp_reconstruct(self)

    def is_nonnegative(self):
        return all((b >= 0).all() for b in self.blocks().values())

    def as_tucker(self):
        """The same model as a Tucker model with a superdiagonal core."""
        return fs.FactorModel(tensor_ops.superdiagonal(self.rank), self.o, self.d, self.t)

    @classmethod
    def from_blocks(cls, blocks):
        return cls(o=blocks["o"], d=blocks["d"], t=blocks["t"])


def cp_reconstruct(model):
    """Sum of the rank-one outer products ``o_m ∘ d_m ∘ t_m``."""
    return tl.cp_to_tensor((None, [model.o, model.d, model.t]))


def init_cp_model(r, rank, seed):
    """Uniform (0, 1) factors scaled so the reconstruction norm matches ``r``."""
    r = tensor_ops.as_tensor3(r)
    rng = np.random.default_rng(seed)
    blocks = {
        "o": rng.uniform(size=(r.shape[0], rank)),
        "d": rng.uniform(size=(r.shape[1], rank)),
        "t": rng.uniform(size=(r.shape[2], rank)),
    }
    target = tensor_ops.frobenius_norm(r)
    current = tensor_ops.frobenius_norm(cp_reconstruct(CpModel.from_blocks(blocks)))
    if target > 0 and current > 0:
        scale = (target / current) ** (1.0 / 3.0)
        blocks = {name: b * scale for name, b in blocks.items()}
    return CpModel.from_blocks(blocks)


class CpObjective(fs.TuckerObjective):
    """Masked CP objective with optional context terms over blocks O, D, T."""

    blocks = CP_BLOCKS

    def __init__(self, r, w, h, mask=None):
        super().__init__(r, w, h, mask)
        self.l1_weights = {"o": h.gamma, "d": h.delta, "t": h.epsilon}

    def check(self, values):
        model = CpModel.from_blocks(values)
        if model.data_shape != self.r.shape:
            raise InputError(f"model reconstructs {model.data_shape}, tensor is {self.r.shape}")
        return model

    def reconstruct(self, values):
        return tl.cp_to_tensor((None, [values["o"], values["d"], values["t"]]))

    def gradient(self, block, values, residual=None):
        if residual is None:
            residual = self.residual(values)
        axis = {"o": 0, "d": 1, "t": 2}.get(block)
        if axis is None:
            raise InputError(f"unknown CP block {block!r}")
        factors = [values["o"], values["d"], values["t"]]
        grad = -2.0 * tl.unfold(residual, axis) @ tenalg.khatri_rao(factors, skip_matrix=axis)
        if block == "o" and self.alpha:
            grad += self.alpha * fs.context_gradient(self.w, self.pair_mask, values["o"])
        if block == "d" and self.beta:
            grad += self.beta * fs.context_gradient(self.w, self.pair_mask, values["d"])
        return grad

    def curvature(self, block, values):
        """Norm of the Hadamard product of the other two Gram matrices (half units)."""
        axis = {"o": 0, "d": 1, "t": 2}[block]
        factors = [values["o"], values["d"], values["t"]]
        gram = np.ones((factors[0].shape[1],) * 2)
        for a, f in enumerate(factors):
            if a != axis:
                gram = gram * (f.T @ f)
        value = tensor_ops.spectral_norm(gram)
        weight = {"o": self.alpha, "d": self.beta, "t": 0.0}[block]
        if weight:
            value += weight * fs.context_curvature(self.w_norm, values[block])
        return max(value, fs.LIPSCHITZ_FLOOR)


def _cp_run(r, w, h, mask, init, label):
    problem = CpObjective(r, w, h, mask)
    values = init.blocks()
    problem.check(values)
    if not init.is_nonnegative():
        raise InputError("initial model must be nonnegative")
    result = fs.run_bcd(problem, values, h.max_rounds, h.tolerance, None, h.log_every, label)
    return result


def cp_solve(r, h, mask, init):
    """Nonnegative CP with L1 on the factors (context weights ignored)."""
    return _cp_run(r, None, h, mask, init, "cp")


def rcp_solve(r, w, h, mask, init):
    """Nonnegative CP with the context terms α‖W - OOᵀ‖² + β‖W - DDᵀ‖²."""
    return _cp_run(r, w, h, mask, init, "rcp")


def tucker_solve(r, h, mask, init):
    """Tucker factorization with L1 terms only: no context, no neighbor pass."""
    return fs.bcd_solve(r, None, h.without_context(), init, neighbor_graph=None, mask=mask)


def cp_model_of(result):
    """CpModel view of a SolveResult returned by cp_solve / rcp_solve."""
    return CpModel.from_blocks(result.values)
