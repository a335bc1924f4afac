# services/factorization_service.py
"""
Context- and neighbor-regularized nonnegative Tucker factorization.

Model: R ≈ C ×1 O ×2 D ×3 T with all factors nonnegative, fitted by
minimizing

    ‖S ⊙ (R - C ×1 O ×2 D ×3 T)‖_F²
      + α ‖W - O Oᵀ‖_F² + β ‖W - D Dᵀ‖_F²
      + γ ‖O‖₁ + δ ‖D‖₁ + ε ‖T‖₁ + ϵ ‖C‖₁

(S is the optional sampling mask) by block coordinate descent over C, O, D,
T with extrapolated proximal-gradient steps. An optional neighboring pass
corrects O and D after every round.

The block-descent loop (:func:`run_bcd`) is generic over an objective object
so the CP baselines share the step, step-size and extrapolation code.
"""

import dataclasses
import functools
import logging
import math

import numpy as np
import tensorly as tl
from tensorly import tenalg

from services import neighbor_regularizer as nr
from services import tensor_ops
from services.errors import InputError, SolverError
from services.ingestion_service import ContextMatrix

logger = logging.getLogger(__name__)

BLOCKS = ("core", "o", "d", "t")

LIPSCHITZ_FLOOR = 1e-8
EXTRAPOLATION_CAP = 0.9999
MAX_BACKTRACKS = 40


# ---------- MODEL ----------

@dataclasses.dataclass
class FactorModel:
    """Core tensor (I×J×K) and projections O (M×I), D (M×J), T (N×K)."""

    core: np.ndarray
    o: np.ndarray
    d: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.core = tensor_ops.as_tensor3(self.core)
        self.o = tensor_ops.as_matrix(self.o)
        self.d = tensor_ops.as_matrix(self.d)
        self.t = tensor_ops.as_matrix(self.t)
        i, j, k = self.core.shape
        if (self.o.shape[1], self.d.shape[1], self.t.shape[1]) != (i, j, k):
            raise InputError(
                f"core {self.core.shape} does not match factor ranks "
                f"({self.o.shape[1]}, {self.d.shape[1]}, {self.t.shape[1]})"
            )
        if self.o.shape[0] != self.d.shape[0]:
            raise InputError("O and D must have the same number of zones")

    @property
    def dims(self):
        """(I, J, K)."""
        return self.core.shape

    @property
    def data_shape(self):
        """(M, M, N)."""
        return (self.o.shape[0], self.d.shape[0], self.t.shape[0])

    def reconstruct(self):
        return tensor_ops.reconstruct(self.core, self.o, self.d, self.t)

    def is_nonnegative(self):
        return all((block >= 0).all() for block in self.blocks().values())

    def blocks(self):
        return {"core": self.core, "o": self.o, "d": self.d, "t": self.t}

    def copy(self):
        return FactorModel(self.core.copy(), self.o.copy(), self.d.copy(), self.t.copy())

    @classmethod
    def from_blocks(cls, blocks):
        return cls(core=blocks["core"], o=blocks["o"], d=blocks["d"], t=blocks["t"])


def init_model(r, dims, seed):
    """Random nonnegative start whose reconstruction has the norm of ``r``.

    Entries are uniform on (0, 1); every block is then scaled by the same
    factor so that ‖C ×1 O ×2 D ×3 T‖_F = ‖R‖_F.
    """
    r = tensor_ops.as_tensor3(r)
    m, m2, n = r.shape
    i, j, k = dims
    rng = np.random.default_rng(seed)
    blocks = {
        "core": rng.uniform(size=(i, j, k)),
        "o": rng.uniform(size=(m, i)),
        "d": rng.uniform(size=(m2, j)),
        "t": rng.uniform(size=(n, k)),
    }
    model = FactorModel.from_blocks(blocks)
    target = tensor_ops.frobenius_norm(r)
    current = tensor_ops.frobenius_norm(model.reconstruct())
    if target > 0 and current > 0:
        scale = (target / current) ** 0.25
        model = FactorModel.from_blocks({name: b * scale for name, b in blocks.items()})
    return model


# ---------- CONTEXT TERMS ----------

def split_context(w):
    """Return ``(W, pair_mask)`` from a ContextMatrix, an array or None."""
    if w is None:
        return None, None
    if isinstance(w, ContextMatrix):
        return w.w, w.penalty_mask()
    return tensor_ops.as_matrix(w), None


def context_penalty(w, pair_mask, v):
    """‖P ⊙ (W - V Vᵀ)‖_F² (P = all ones when ``pair_mask`` is None)."""
    gap = w - v @ v.T
    if pair_mask is not None:
        gap = gap * pair_mask
    return float(np.vdot(gap, gap))


def context_gradient(w, pair_mask, v):
    """Gradient of :func:`context_penalty` with respect to V."""
    gap = w - v @ v.T
    if pair_mask is not None:
        gap = gap * pair_mask
    return -4.0 * gap @ v


def context_curvature(w_norm, v):
    """Local curvature bound of ‖W - V Vᵀ‖_F² (half units, see lipschitz_estimate)."""
    return 2.0 * (w_norm + 3.0 * tensor_ops.spectral_norm(v) ** 2)


def _check_mask(mask, shape):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != shape:
        raise InputError(f"mask shape {mask.shape} does not match tensor {shape}")
    return mask


# ---------- OBJECTIVE ----------

class TuckerObjective:
    """Smooth part, L1 part and block gradients of the factorization objective.

    Blocks are passed around as a dict ``{"core", "o", "d", "t"}``.
    """

    blocks = BLOCKS

    def __init__(self, r, w, h, mask=None):
        self.r = tensor_ops.as_tensor3(r)
        self.w, self.pair_mask = split_context(w)
        self.h = h
        self.mask = _check_mask(mask, self.r.shape)
        self.alpha = h.alpha if self.w is not None else 0.0
        self.beta = h.beta if self.w is not None else 0.0
        if self.w is not None and self.w.shape != (self.r.shape[0], self.r.shape[1]):
            raise InputError(f"context matrix {self.w.shape} does not match tensor {self.r.shape}")
        self.w_norm = tensor_ops.spectral_norm(self.w) if self.w is not None else 0.0
        self.l1_weights = {"core": h.varepsilon, "o": h.gamma, "d": h.delta, "t": h.epsilon}

    def check(self, values):
        model = FactorModel.from_blocks(values)
        if model.data_shape != self.r.shape:
            raise InputError(f"model reconstructs {model.data_shape}, tensor is {self.r.shape}")
        return model

    def reconstruct(self, values):
        return tensor_ops.reconstruct(values["core"], values["o"], values["d"], values["t"])

    def residual(self, values):
        """S ⊙ (R - R̂)."""
        res = self.r - self.reconstruct(values)
        if self.mask is not None:
            res = res * self.mask
        return res

    def fit_term(self, values):
        res = self.residual(values)
        return float(np.vdot(res, res))

    def context_terms(self, values):
        total = 0.0
        if self.alpha:
            total += self.alpha * context_penalty(self.w, self.pair_mask, values["o"])
        if self.beta:
            total += self.beta * context_penalty(self.w, self.pair_mask, values["d"])
        return total

    def smooth(self, values):
        return self.fit_term(values) + self.context_terms(values)

    def penalty(self, values):
        return sum(lam * tensor_ops.l1_norm(values[name]) for name, lam in self.l1_weights.items() if lam)

    def total(self, values):
        return self.smooth(values) + self.penalty(values)

    def l1_weight(self, block):
        return self.l1_weights[block]

    def gradient(self, block, values, residual=None):
        if residual is None:
            residual = self.residual(values)
        g = -2.0 * residual
        core, o, d, t = values["core"], values["o"], values["d"], values["t"]
        if block == "core":
            return tenalg.multi_mode_dot(g, [o, d, t], transpose=True)
        if block == "o":
            partial = tenalg.multi_mode_dot(core, [d, t], modes=[1, 2])
            grad = tl.unfold(g, 0) @ tl.unfold(partial, 0).T
            if self.alpha:
                grad += self.alpha * context_gradient(self.w, self.pair_mask, o)
            return grad
        if block == "d":
            partial = tenalg.multi_mode_dot(core, [o, t], modes=[0, 2])
            grad = tl.unfold(g, 1) @ tl.unfold(partial, 1).T
            if self.beta:
                grad += self.beta * context_gradient(self.w, self.pair_mask, d)
            return grad
        if block == "t":
            partial = tenalg.multi_mode_dot(core, [o, d], modes=[0, 1])
            return tl.unfold(g, 2) @ tl.unfold(partial, 2).T
        raise InputError(f"unknown block {block!r}")

    def curvature(self, block, values):
        return lipschitz_estimate(block, FactorModel.from_blocks(values), self.h, self.w, self.w_norm)


def objective(r, w, model, h, mask=None):
    """Full regularized objective of ``model`` on ``r`` (see module docstring)."""
    problem = TuckerObjective(r, w, h, mask)
    values = model.blocks()
    problem.check(values)
    value = problem.total(values)
    if not math.isfinite(value):
        raise SolverError("objective is not finite")
    return value


def gradients(r, w, model, h, mask=None):
    """Partial derivatives of the smooth objective part.

    Returns:
        tuple: (∂/∂C, ∂/∂O, ∂/∂D, ∂/∂T); the L1 terms are excluded.
    """
    problem = TuckerObjective(r, w, h, mask)
    values = model.blocks()
    problem.check(values)
    residual = problem.residual(values)
    return tuple(problem.gradient(name, values, residual) for name in BLOCKS)


# ---------- PROXIMAL STEP ----------

def pg_step(point, gradient, tau, lam):
    """Nonnegative proximal-gradient step ``max{0, g̃ - ∇/τ - λ/τ}``.

    Args:
        point (np.ndarray): extrapolated point g̃.
        gradient (np.ndarray): smooth-part gradient at g̃.
        tau (float): step curvature, > 0.
        lam (float): L1 weight, >= 0.
    """
    if not tau > 0:
        raise InputError(f"tau must be positive, got {tau}")
    if lam < 0:
        raise InputError(f"lambda must be nonnegative, got {lam}")
    return np.maximum(0.0, point - gradient / tau - lam / tau)


def lipschitz_estimate(block, model, h, w=None, w_norm=None):
    """Curvature of a block subproblem, as the spectral norm of its Gram system.

    For C this is ‖OᵀO‖₂‖DᵀD‖₂‖TᵀT‖₂ (the largest eigenvalue of the Kronecker
    product of the Gram matrices); for T it is the norm of the Gram matrix of
    the mode-3 unfolding of C ×1 O ×2 D, and likewise for O and D. For O and D
    the local bound 2α(‖W‖₂ + 3‖O‖₂²) of the context term is added; that term
    is quartic, so the solver backtracks on top of this estimate.

    The value is in "half" units: the squared-error term carries no 1/2, so
    the gradient's Lipschitz constant is twice the returned number.
    Always at least ``LIPSCHITZ_FLOOR``.
    """
    core, o, d, t = model.core, model.o, model.d, model.t
    if block == "core":
        value = (
            tensor_ops.spectral_norm(o.T @ o)
            * tensor_ops.spectral_norm(d.T @ d)
            * tensor_ops.spectral_norm(t.T @ t)
        )
    elif block in ("o", "d", "t"):
        axis = {"o": 0, "d": 1, "t": 2}[block]
        others = [f for a, f in enumerate((o, d, t)) if a != axis]
        modes = [a for a in range(3) if a != axis]
        unfolded = tl.unfold(tenalg.multi_mode_dot(core, others, modes=modes), axis)
        value = tensor_ops.spectral_norm(unfolded @ unfolded.T)
        weight = {"o": h.alpha, "d": h.beta, "t": 0.0}[block]
        if weight and w is not None:
            if w_norm is None:
                w_norm = tensor_ops.spectral_norm(split_context(w)[0])
            value += weight * context_curvature(w_norm, o if block == "o" else d)
    else:
        raise InputError(f"unknown block {block!r}")
    return max(value, LIPSCHITZ_FLOOR)


@functools.lru_cache(maxsize=None)
def _momentum_sequence(s):
    """t_s of the accelerated sequence t_0 = 1, t_s = (1 + √(1 + 4 t_{s-1}²)) / 2."""
    t = 1.0
    for _ in range(s):
        t = (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0
    return t


def extrapolation_weight(s, tau_prev, tau_curr, rho=EXTRAPOLATION_CAP):
    """Extrapolation weight ``min{(t_{s-1} - 1)/t_s, ρ √(τ_prev/τ_curr)}``.

    ``s`` counts rounds since the block's last restart; ``s <= 1`` gives 0.
    """
    if s <= 1:
        return 0.0
    nominal = (_momentum_sequence(s - 1) - 1.0) / _momentum_sequence(s)
    return min(nominal, rho * math.sqrt(tau_prev / tau_curr))


# ---------- BLOCK COORDINATE DESCENT ----------

@dataclasses.dataclass
class SolverState:
    """Iterates and step bookkeeping of one block-descent run."""

    current: dict
    previous: dict
    round_start: dict
    tau: dict
    omega: dict
    momentum: dict
    objective: float
    history: list

    @classmethod
    def start(cls, values, objective_value):
        values = {name: np.array(v, dtype=np.float64) for name, v in values.items()}
        return cls(
            current=values,
            previous={name: v.copy() for name, v in values.items()},
            round_start=dict(values),
            tau={},
            omega={name: 0.0 for name in values},
            momentum={name: 0 for name in values},
            objective=objective_value,
            history=[objective_value],
        )

    def replace_block(self, name, value, objective_value):
        """Install an externally corrected block and drop its extrapolation memory."""
        self.current[name] = value
        self.previous[name] = value.copy()
        self.momentum[name] = 0
        self.objective = objective_value


@dataclasses.dataclass
class SolveResult:
    values: dict
    history: list
    rounds: int
    converged: bool
    restarts: int = 0
    nr_reverts: int = 0

    @property
    def model(self):
        return FactorModel.from_blocks(self.values)

    @property
    def final_objective(self):
        return self.history[-1]


def _finite(value, where):
    if not math.isfinite(value):
        raise SolverError(f"objective became non-finite during {where}")
    return value


def _prox_with_backtracking(problem, values, name, point, tau):
    """Prox step from ``point`` with a sufficient-decrease check on the smooth part."""
    trial = dict(values)
    trial[name] = point
    grad = problem.gradient(name, trial)
    f_point = problem.smooth(trial)
    lam = problem.l1_weight(name)
    for _ in range(MAX_BACKTRACKS):
        candidate = pg_step(point, grad, tau, lam)
        trial[name] = candidate
        f_candidate = problem.smooth(trial)
        step = candidate - point
        bound = f_point + np.vdot(grad, step) + 0.5 * tau * np.vdot(step, step)
        if f_candidate <= bound + 1e-12 * abs(f_point):
            break
        tau *= 2.0
    else:
        logger.warning("backtracking on block %s stopped at tau=%.3g", name, tau)
    return candidate, tau, f_candidate + problem.penalty(trial)


def _update_block(problem, state, name):
    x = state.current[name]
    tau0 = 2.0 * problem.curvature(name, state.current)
    state.momentum[name] += 1
    omega = extrapolation_weight(state.momentum[name], state.tau.get(name, tau0), tau0)
    restarted = False

    if omega > 0:
        point = x + omega * (x - state.previous[name])
        candidate, tau, value = _prox_with_backtracking(problem, state.current, name, point, tau0)
        if _finite(value, f"block {name}") > state.objective:
            # restart: redo the step from the plain point
            omega, restarted = 0.0, True
            state.momentum[name] = 0
    if omega == 0:
        candidate, tau, value = _prox_with_backtracking(problem, state.current, name, x, tau0)
        if _finite(value, f"block {name}") > state.objective:
            candidate, value = x, state.objective

    state.previous[name] = x
    state.current[name] = candidate
    state.objective = value
    state.tau[name] = tau
    state.omega[name] = omega
    return restarted


def run_bcd(problem, init_values, max_rounds, tolerance, after_round=None, log_every=50, label="bcd"):
    """Gauss–Seidel block descent with extrapolated proximal-gradient steps.

    Every block step is accepted only if it does not raise the objective
    (extrapolation is dropped first, then the step itself), so the history is
    non-increasing.

    Args:
        problem: objective object exposing ``blocks``, ``smooth``, ``penalty``,
            ``total``, ``gradient``, ``curvature`` and ``l1_weight``.
        init_values (dict): starting blocks.
        max_rounds (int): round limit.
        tolerance (float): stop when the relative objective decrease over a
            round falls below this.
        after_round (callable, optional): ``after_round(state, s)`` hook run
            after the block updates of round ``s``; may replace blocks via
            ``state.replace_block`` and returns the number of reverted steps.
        log_every (int): INFO log interval in rounds.
        label (str): name used in log lines.

    Returns:
        SolveResult
    """
    state = SolverState.start(init_values, 0.0)
    state.objective = _finite(problem.total(state.current), "initialization")
    state.history = [state.objective]
    converged = False
    restarts = 0
    nr_reverts = 0
    s = 0
    for s in range(1, max_rounds + 1):
        start = state.objective
        state.round_start = dict(state.current)
        for name in problem.blocks:
            restarts += _update_block(problem, state, name)
        if after_round is not None:
            nr_reverts += after_round(state, s) or 0
        state.history.append(state.objective)
        if log_every and s % log_every == 0:
            logger.info("%s round %d: objective %.6g", label, s, state.objective)
        if start == 0 or (start - state.objective) / abs(start) < tolerance:
            converged = True
            break
    logger.info(
        "%s finished after %d rounds (converged=%s), objective %.6g",
        label, s, converged, state.objective,
    )
    return SolveResult(
        values=state.current,
        history=state.history,
        rounds=s,
        converged=converged,
        restarts=restarts,
        nr_reverts=nr_reverts,
    )


class NeighborPass:
    """Round hook applying the neighboring correction to O, then D.

    A correction that would raise the objective is reverted and logged.
    """

    def __init__(self, problem, graph, sigma=None, epsilon_floor=nr.EPSILON_FLOOR):
        self.problem = problem
        self.graph = graph
        # kernels only see observed cells
        observed = problem.r if problem.mask is None else problem.r * problem.mask
        self.kernels = {}
        for block, side in (("o", nr.ORIGIN), ("d", nr.DESTINATION)):
            cfg = nr.NrConfig(
                sigma_nr=sigma if sigma is not None else nr.median_sigma(observed, graph, side),
                epsilon_floor=epsilon_floor,
            )
            self.kernels[block] = (cfg, nr.PairwiseKernelCache.build(observed, graph, side, cfg))
        logger.info(
            "neighbor pass: sigma_nr origin=%.4g destination=%.4g",
            self.kernels["o"][0].sigma_nr, self.kernels["d"][0].sigma_nr,
        )

    def __call__(self, state, s):
        reverts = 0
        for block in ("o", "d"):
            cfg, kernels = self.kernels[block]
            corrected = nr.nr_update(
                state.current[block], state.round_start[block], self.problem.r,
                self.graph, cfg, kernels.side, kernels=kernels,
            )
            trial = dict(state.current)
            trial[block] = corrected
            value = _finite(self.problem.total(trial), f"neighbor pass on {block}")
            if value <= state.objective:
                state.replace_block(block, corrected, value)
            else:
                reverts += 1
                logger.warning(
                    "round %d: neighbor correction on %s would raise the objective "
                    "(%.6g > %.6g); reverted", s, block, value, state.objective,
                )
        return reverts


def bcd_solve(r, w, h, init, neighbor_graph=None, mask=None):
    """Fit the factorization by block coordinate descent.

    Blocks are updated in the order C, O, D, T; when ``h.nr_enabled`` and a
    neighbor graph is given, the neighboring correction runs on O then D
    after each round.

    Args:
        r (np.ndarray): M×M×N data tensor.
        w (ContextMatrix or np.ndarray or None): context matrix.
        h (Hyperparameters): weights and solver controls.
        init (FactorModel): nonnegative starting model.
        neighbor_graph (NeighborGraph, optional): zone adjacency.
        mask (np.ndarray, optional): binary sampling mask of R's shape.

    Returns:
        SolveResult: ``.model`` and ``.history`` hold the fit.
    """
    problem = TuckerObjective(r, w, h, mask)
    values = init.blocks()
    problem.check(values)
    if not init.is_nonnegative():
        raise InputError("initial model must be nonnegative")
    if init.dims != h.dims:
        raise InputError(f"initial model dims {init.dims} differ from hyperparameters {h.dims}")
    hook = None
    if h.nr_enabled and neighbor_graph is not None:
        hook = NeighborPass(problem, neighbor_graph, sigma=h.nr_sigma)
    label = "nr-cntf" if hook else ("cntf" if problem.alpha or problem.beta else "tucker")
    return run_bcd(problem, values, h.max_rounds, h.tolerance, hook, h.log_every, label)
