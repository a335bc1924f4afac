import math

import numpy as np
import pytest
import tensorly as tl
from tensorly import tenalg

from conftest import quiet_hyper, random_context, random_model
from services import analysis_service as analysis
from services import factorization_service as fs
from services import synth_generator as synth
from services.config import Hyperparameters
from services.errors import InputError, SolverError
from services.ingestion_service import ContextMatrix


# ── objective ────────────────────────────────────────────────────────────────

def _objective_oracle(r, w, pair_mask, model, h, mask):
    m, _, n = r.shape
    i_dim, j_dim, k_dim = model.dims
    c, o, d, t = model.core, model.o, model.d, model.t
    fit = 0.0
    for x in range(m):
        for y in range(m):
            for z in range(n):
                r_hat = 0.0
                for i in range(i_dim):
                    for j in range(j_dim):
                        for k in range(k_dim):
                            r_hat += c[i, j, k] * o[x, i] * d[y, j] * t[z, k]
                fit += (mask[x, y, z] * (r[x, y, z] - r_hat)) ** 2
    ctx_o = ctx_d = 0.0
    for x in range(m):
        for y in range(m):
            oo = sum(o[x, i] * o[y, i] for i in range(i_dim))
            dd = sum(d[x, j] * d[y, j] for j in range(j_dim))
            ctx_o += (pair_mask[x, y] * (w[x, y] - oo)) ** 2
            ctx_d += (pair_mask[x, y] * (w[x, y] - dd)) ** 2
    return (
        fit + h.alpha * ctx_o + h.beta * ctx_d
        + h.gamma * np.abs(o).sum() + h.delta * np.abs(d).sum()
        + h.epsilon * np.abs(t).sum() + h.varepsilon * np.abs(c).sum()
    )


@pytest.mark.parametrize("instance", range(10))
def test_objective_matches_brute_force(instance):
    rng = np.random.default_rng(100 + instance)
    r = rng.uniform(size=(5, 5, 4))
    model = random_model(rng, 5, 4, (2, 3, 2))
    context = random_context(rng, 5)
    if instance % 2:
        # zone 4 without POIs
        context.w[4, :] = context.w[:, 4] = 0.0
        context.contextless[4] = True
    mask = (rng.uniform(size=r.shape) < 0.7).astype(float) if instance % 3 else np.ones(r.shape)
    h = Hyperparameters(alpha=0.03, beta=0.02, gamma=0.5, delta=0.4, epsilon=0.3, varepsilon=0.2,
                        dim_i=2, dim_j=3, dim_k=2)
    pair_mask = context.penalty_mask()
    if pair_mask is None:
        pair_mask = np.ones((5, 5))
    expected = _objective_oracle(r, context.w, pair_mask, model, h, mask)
    got = fs.objective(r, context, model, h, mask)
    assert got == pytest.approx(expected, rel=1e-10)


def test_all_ones_mask_is_exactly_unmasked(rng):
    r = rng.uniform(size=(5, 5, 4))
    model = random_model(rng, 5, 4, (2, 3, 2))
    context = random_context(rng, 5)
    h = Hyperparameters(alpha=0.03, beta=0.02, gamma=0.5, delta=0.4, epsilon=0.3, varepsilon=0.2,
                        dim_i=2, dim_j=3, dim_k=2)
    assert fs.objective(r, context, model, h, np.ones(r.shape)) == fs.objective(r, context, model, h)


def test_column_rescaling_keeps_reconstruction_term(rng):
    r = rng.uniform(size=(5, 5, 4))
    model = random_model(rng, 5, 4, (3, 2, 2))
    scaled = model.copy()
    scaled.o[:, 1] *= 3.7
    scaled.core[1] /= 3.7
    problem = fs.TuckerObjective(r, None, quiet_hyper(dim_i=3, dim_j=2, dim_k=2))
    assert problem.fit_term(scaled.blocks()) == pytest.approx(problem.fit_term(model.blocks()), rel=1e-12)
    h = quiet_hyper(dim_i=3, dim_j=2, dim_k=2, gamma=1.0)
    assert fs.objective(r, None, scaled, h) != pytest.approx(fs.objective(r, None, model, h), rel=1e-6)


def test_objective_rejects_shape_mismatch(rng):
    model = random_model(rng, 4, 3, (2, 2, 2))
    with pytest.raises(InputError):
        fs.objective(rng.uniform(size=(5, 5, 3)), None, model, quiet_hyper())


# ── gradients ────────────────────────────────────────────────────────────────

def _finite_difference(problem, values, block, step=1e-6):
    grad = np.zeros_like(values[block])
    for idx in np.ndindex(grad.shape):
        plus = {name: v.copy() for name, v in values.items()}
        minus = {name: v.copy() for name, v in values.items()}
        plus[block][idx] += step
        minus[block][idx] -= step
        grad[idx] = (problem.smooth(plus) - problem.smooth(minus)) / (2 * step)
    return grad


@pytest.mark.parametrize("instance", range(20))
def test_gradients_match_finite_differences(instance):
    rng = np.random.default_rng(instance)
    r = rng.uniform(size=(6, 6, 4))
    model = random_model(rng, 6, 4, (3, 3, 2))
    context = random_context(rng, 6)
    h = Hyperparameters(alpha=0.01, beta=0.01, dim_i=3, dim_j=3, dim_k=2)
    analytic = dict(zip(fs.BLOCKS, fs.gradients(r, context, model, h)))
    problem = fs.TuckerObjective(r, context, h)
    values = model.blocks()
    for block in fs.BLOCKS:
        numeric = _finite_difference(problem, values, block)
        np.testing.assert_allclose(analytic[block], numeric, rtol=1e-5, atol=1e-6)


def test_masked_gradients_with_contextless_zone(rng):
    r = rng.uniform(size=(5, 5, 3))
    model = random_model(rng, 5, 3, (2, 2, 2))
    w = random_context(rng, 5).w
    w[0, :] = w[:, 0] = 0.0
    context = ContextMatrix(w=w, contextless=np.array([True, False, False, False, False]))
    mask = (rng.uniform(size=r.shape) < 0.6).astype(float)
    h = Hyperparameters(alpha=0.2, beta=0.1, dim_i=2, dim_j=2, dim_k=2)
    problem = fs.TuckerObjective(r, context, h, mask)
    values = model.blocks()
    for block in fs.BLOCKS:
        np.testing.assert_allclose(
            problem.gradient(block, values), _finite_difference(problem, values, block), rtol=1e-5, atol=1e-6,
        )


# ── proximal step and step sizes ─────────────────────────────────────────────

def test_pg_step_soft_thresholds_and_clips():
    out = fs.pg_step(np.array([1.0, -1.0, 0.5]), np.array([0.5, 0.0, 0.0]), 1.0, 0.25)
    np.testing.assert_allclose(out, [0.25, 0.0, 0.25])
    with pytest.raises(InputError):
        fs.pg_step(np.ones(2), np.ones(2), 0.0, 0.1)
    with pytest.raises(InputError):
        fs.pg_step(np.ones(2), np.ones(2), 1.0, -0.1)


def test_core_curvature_of_identity_factors():
    eye = np.eye(3)
    model = fs.FactorModel(np.ones((3, 3, 3)), eye, eye, eye)
    assert fs.lipschitz_estimate("core", model, quiet_hyper(dim_i=3, dim_j=3, dim_k=3)) == pytest.approx(1.0)


@pytest.mark.parametrize("instance", range(5))
def test_core_curvature_bounds_kronecker_eigenvalue(instance):
    rng = np.random.default_rng(instance)
    model = random_model(rng, 6, 5, (4, 4, 4))
    gram = np.kron(np.kron(model.o.T @ model.o, model.d.T @ model.d), model.t.T @ model.t)
    largest = np.linalg.eigvalsh(gram)[-1]
    tau = fs.lipschitz_estimate("core", model, quiet_hyper(dim_i=4, dim_j=4, dim_k=4))
    assert tau >= largest * (1 - 1e-9)


def test_temporal_curvature_is_gram_norm(rng):
    model = random_model(rng, 5, 4, (2, 3, 2))
    b = tl.unfold(tenalg.multi_mode_dot(model.core, [model.o, model.d], modes=[0, 1]), 2)
    expected = np.linalg.eigvalsh(b @ b.T)[-1]
    tau = fs.lipschitz_estimate("t", model, quiet_hyper(dim_i=2, dim_j=3, dim_k=2))
    assert tau == pytest.approx(expected, rel=1e-10)


def test_curvature_floor():
    zeros = fs.FactorModel(np.zeros((2, 2, 2)), np.zeros((3, 2)), np.zeros((3, 2)), np.zeros((2, 2)))
    assert fs.lipschitz_estimate("core", zeros, quiet_hyper()) == fs.LIPSCHITZ_FLOOR


def test_extrapolation_weight():
    assert fs.extrapolation_weight(0, 1.0, 1.0) == 0.0
    assert fs.extrapolation_weight(1, 1.0, 1.0) == 0.0
    t1 = (1 + math.sqrt(5)) / 2
    t2 = (1 + math.sqrt(1 + 4 * t1 * t1)) / 2
    assert fs.extrapolation_weight(2, 1.0, 1.0) == pytest.approx((t1 - 1) / t2)
    # a shrinking step caps the weight
    assert fs.extrapolation_weight(50, 1e-4, 1.0) == pytest.approx(0.9999 * 1e-2)
    for s in range(2, 200):
        assert 0.0 <= fs.extrapolation_weight(s, 1.0, 1.0) < 1.0


# ── initialization ───────────────────────────────────────────────────────────

def test_init_model_matches_data_norm(rng):
    r = rng.uniform(size=(6, 6, 5))
    model = fs.init_model(r, (3, 2, 2), seed=4)
    assert model.is_nonnegative()
    assert model.data_shape == r.shape and model.dims == (3, 2, 2)
    assert np.linalg.norm(model.reconstruct()) == pytest.approx(np.linalg.norm(r), rel=1e-10)


def test_init_model_is_seeded(rng):
    r = rng.uniform(size=(4, 4, 3))
    a, b = fs.init_model(r, (2, 2, 2), 9), fs.init_model(r, (2, 2, 2), 9)
    np.testing.assert_array_equal(a.core, b.core)
    np.testing.assert_array_equal(a.o, b.o)


# ── solver ───────────────────────────────────────────────────────────────────

def test_planted_model_is_a_fixed_point(tiny_city):
    truth, r, _, _ = tiny_city
    result = fs.bcd_solve(r, None, quiet_hyper(), truth)
    assert result.rounds == 1 and result.converged
    assert result.final_objective == 0.0
    np.testing.assert_array_equal(result.model.o, truth.o)


def test_history_is_monotone_with_neighbor_pass(tiny_city):
    _, r, context, graph = tiny_city
    h = quiet_hyper(alpha=0.01, beta=0.01, gamma=0.1, delta=0.1, epsilon=0.1, varepsilon=0.1,
                    nr_enabled=True, max_rounds=40, tolerance=0.0)
    result = fs.bcd_solve(r, context, h, fs.init_model(r, h.dims, 5), neighbor_graph=graph)
    history = np.asarray(result.history)
    assert len(history) == result.rounds + 1 == 41
    assert (np.diff(history) <= 1e-12).all()
    assert result.model.is_nonnegative()


def test_masked_history_is_monotone(desk_city):
    _, (_, r, context, graph) = desk_city
    h = Hyperparameters(dim_i=4, dim_j=4, dim_k=3, max_rounds=25, log_every=0)
    mask = synth.sample_mask(r.shape, 0.6, 2)
    result = fs.bcd_solve(r, context, h, fs.init_model(r, h.dims, 1), neighbor_graph=graph, mask=mask)
    assert (np.diff(result.history) <= 1e-12).all()


def test_solver_is_deterministic(tiny_city):
    _, r, context, graph = tiny_city
    h = quiet_hyper(alpha=0.01, beta=0.01, gamma=0.05, nr_enabled=True, max_rounds=15)
    runs = [fs.bcd_solve(r, context, h, fs.init_model(r, h.dims, 3), neighbor_graph=graph) for _ in range(2)]
    np.testing.assert_allclose(runs[0].history, runs[1].history, rtol=1e-10)
    for name in fs.BLOCKS:
        np.testing.assert_allclose(runs[0].values[name], runs[1].values[name], rtol=1e-10, atol=1e-12)


def test_solver_rejects_bad_starts(tiny_city):
    truth, r, _, _ = tiny_city
    negative = truth.copy()
    negative.o[0, 0] = -1.0
    with pytest.raises(InputError):
        fs.bcd_solve(r, None, quiet_hyper(), negative)
    with pytest.raises(InputError):
        fs.bcd_solve(r, None, quiet_hyper(dim_k=3), truth)


def test_non_finite_data_aborts(tiny_city):
    truth, r, _, _ = tiny_city
    r = r.copy()
    r[0, 0, 0] = np.inf
    with pytest.raises(SolverError):
        fs.bcd_solve(r, None, quiet_hyper(), truth)


def test_planted_recovery_from_ground_truth(desk_city):
    spec, (truth, r, context, graph) = desk_city
    h = Hyperparameters(alpha=1e-3, beta=1e-3, gamma=1e-4, delta=1e-4, epsilon=1e-4, varepsilon=1e-4,
                        dim_i=4, dim_j=4, dim_k=3, max_rounds=60, log_every=0)
    result = fs.bcd_solve(r, context, h, truth, neighbor_graph=graph)
    assert analysis.rmse(r, result.model.reconstruct()) <= 0.02
    origin, destination = synth.planted_labels(spec)
    assert analysis.label_agreement(analysis.assign_communities(result.model.o).labels, origin) >= 0.95
    assert analysis.label_agreement(analysis.assign_communities(result.model.d).labels, destination) >= 0.95

