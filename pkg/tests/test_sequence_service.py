import json

import numpy as np
import pytest

from conftest import quiet_hyper
from services import analysis_service as analysis
from services import factorization_service as fs
from services import sequence_service as seq
from services import synth_generator as synth
from services.errors import InputError


def _permute_block(spec, block, seed):
    """Zone permutation that shuffles only the zones of one planted block."""
    labels, _ = synth.planted_labels(spec)
    zones = np.flatnonzero(labels == block)
    perm = np.arange(spec.zones)
    perm[zones] = np.random.default_rng(seed).permutation(zones)
    return perm


def test_duplicate_years_barely_drift(tiny_city):
    _, r, context, _ = tiny_city
    h = quiet_hyper(gamma=0.01, delta=0.01, epsilon=0.01, varepsilon=0.01, max_rounds=5000, tolerance=1e-12)
    years = [seq.YearInput("2010", r, context), seq.YearInput("2011", r, context)]
    sequence = seq.pi_tsa(years, h, seed=1)
    assert len(sequence) == 2 and sequence.labels == ["2010", "2011"]
    (report,) = sequence.drift
    assert report.previous_label == "2010" and report.label == "2011"
    assert max(report.drift_o, report.drift_d, report.drift_t) <= 1e-3


def test_each_year_starts_from_the_previous_solution(tiny_city):
    _, r, context, _ = tiny_city
    h = quiet_hyper()
    seen = []

    def stub(tensor, w, hyper, init, neighbor_graph=None, mask=None):
        seen.append(init)
        values = {name: block * 2.0 for name, block in init.blocks().items()}
        return fs.SolveResult(values=values, history=[1.0, 1.0], rounds=1, converged=True)

    years = [seq.YearInput(str(y), r, context) for y in (2008, 2009, 2010)]
    sequence = seq.pi_tsa(years, h, seed=4, solve=stub)
    first = fs.init_model(r, h.dims, 4)
    np.testing.assert_array_equal(seen[0].o, first.o)
    np.testing.assert_array_equal(seen[1].o, sequence.models[0].o)
    np.testing.assert_array_equal(seen[2].core, sequence.models[1].core)
    assert [d.drift_o for d in sequence.drift] == pytest.approx([1.0, 1.0])


def test_shuffled_community_keeps_other_labels(desk_city):
    spec, (_, r, context, graph) = desk_city
    perm = _permute_block(spec, 2, seed=7)
    moved = perm != np.arange(spec.zones)
    r_next = r[np.ix_(perm, perm, np.arange(r.shape[2]))]
    context_next = type(context)(w=context.w[np.ix_(perm, perm)], contextless=context.contextless[perm])

    h = quiet_hyper(alpha=1e-3, beta=1e-3, gamma=1e-4, delta=1e-4, epsilon=1e-4, varepsilon=1e-4,
                    dim_i=4, dim_j=4, dim_k=3, max_rounds=800, tolerance=1e-9)
    years = [seq.YearInput("before", r, context), seq.YearInput("after", r_next, context_next)]
    sequence = seq.pi_tsa(years, h, graph=graph, seed=2)
    before = analysis.assign_communities(sequence.models[0].o).labels
    after = analysis.assign_communities(sequence.models[1].o).labels
    assert analysis.label_agreement(after[~moved], before[~moved]) >= 0.95


def test_column_correlation_of_identical_factors(rng):
    o = rng.uniform(size=(8, 3))
    corr = seq.column_correlation(o, o)
    np.testing.assert_allclose(np.diag(corr), 1.0)
    assert seq.relative_drift(o, o) == 0.0


def test_empty_and_mismatched_years(tiny_city):
    _, r, context, _ = tiny_city
    with pytest.raises(InputError):
        seq.pi_tsa([], quiet_hyper())
    years = [seq.YearInput("a", r, context), seq.YearInput("b", r[:, :, :3], context)]
    with pytest.raises(InputError):
        seq.pi_tsa(years, quiet_hyper())


def test_manifest_paths_resolve_against_its_folder(tmp_path):
    (tmp_path / "data").mkdir()
    manifest = tmp_path / "data" / "years.json"
    manifest.write_text(json.dumps({"years": [
        {"label": "2008", "tensor": "t08.npz", "context": "../w.npz"},
        {"label": "2009", "tensor": "t09.npz", "context": "../w.npz", "mask": None},
    ]}))
    entries = seq.read_sequence_manifest(manifest)
    assert [e["label"] for e in entries] == ["2008", "2009"]
    assert entries[0]["tensor"] == str((tmp_path / "data" / "t08.npz").resolve())
    assert entries[1]["context"] == str((tmp_path / "w.npz").resolve())
    assert "mask" not in entries[1]


def test_manifest_missing_keys(tmp_path):
    manifest = tmp_path / "years.json"
    manifest.write_text(json.dumps({"years": [{"label": "2008", "tensor": "t.npz"}]}))
    with pytest.raises(InputError, match="context"):
        seq.read_sequence_manifest(manifest)
    manifest.write_text(json.dumps({"years": []}))
    with pytest.raises(InputError):
        seq.read_sequence_manifest(manifest)
