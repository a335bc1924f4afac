import json

import pytest

from services.config import OUTPUT_DIR_ENV, Hyperparameters, RunConfig, config_hash
from services.errors import InputError


@pytest.mark.parametrize("changes", [
    {"alpha": -1.0},
    {"gamma": float("nan")},
    {"dim_k": 0},
    {"max_rounds": 0},
    {"tolerance": -1e-3},
    {"nr_sigma": 0.0},
])
def test_bad_hyperparameters(changes):
    with pytest.raises(InputError):
        Hyperparameters(**changes)


def test_without_context_keeps_the_rest():
    h = Hyperparameters(alpha=0.3, beta=0.2, gamma=1.0, dim_i=5)
    plain = h.without_context()
    assert (plain.alpha, plain.beta, plain.nr_enabled) == (0.0, 0.0, False)
    assert plain.gamma == 1.0 and plain.dims == (5, h.dim_j, h.dim_k)


def test_unknown_keys_are_rejected():
    with pytest.raises(InputError, match="lambda"):
        Hyperparameters.from_dict({"lambda": 1.0})
    with pytest.raises(InputError, match="sampling"):
        RunConfig.from_dict({"sampling": 0.5})


def test_config_json_round_trip(tmp_path):
    config = RunConfig(mode="synth", seed=4, hyper=Hyperparameters(dim_i=3, dim_j=3, dim_k=2))
    path = tmp_path / "run.json"
    path.write_text(json.dumps(config.to_dict()))
    loaded = RunConfig.from_json(path)
    assert loaded == config
    assert config_hash(loaded) == config_hash(config)


def test_hash_changes_with_settings():
    assert config_hash(RunConfig(seed=1)) != config_hash(RunConfig(seed=2))


def test_malformed_json_reports_line(tmp_path):
    path = tmp_path / "run.json"
    path.write_text('{\n  "mode": "factorize",\n  "seed": ,\n}\n')
    with pytest.raises(InputError) as info:
        RunConfig.from_json(path)
    assert info.value.line == 3


def test_required_paths(tmp_path):
    with pytest.raises(InputError, match="--tensor"):
        RunConfig(mode="factorize").validate()
    missing = RunConfig(mode="factorize", tensor=str(tmp_path / "t.npz"), context=str(tmp_path / "w.npz"))
    with pytest.raises(FileNotFoundError):
        missing.validate()
    assert RunConfig(mode="synth").validate().mode == "synth"


def test_bad_mode_and_rates():
    with pytest.raises(InputError):
        RunConfig(mode="train").validate()
    with pytest.raises(InputError):
        RunConfig(mode="synth", sampling_rates=[0.5, 1.2]).validate()
    with pytest.raises(InputError):
        RunConfig(mode="synth", repeats=0).validate()


def test_environment_overrides_output_dir(monkeypatch, tmp_path):
    config = RunConfig(output_dir="runs")
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)
    assert str(config.resolved_output_dir()) == "runs"
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path))
    assert config.resolved_output_dir() == tmp_path
