# services/config.py
"""Run configuration and hyperparameters.

Defaults follow the values the model was tuned with on the city-scale data:
context weights 0.01, L1 weights 2.5, 20 spatial and 4 temporal patterns.
"""

import dataclasses
import hashlib
import json
import math
import os
from pathlib import Path

from services.errors import InputError

# -------- CONFIG (tweak these) --------
DEFAULT_ALPHA = 0.01
DEFAULT_BETA = 0.01
DEFAULT_GAMMA = 2.5          # L1 on O
DEFAULT_DELTA = 2.5          # L1 on D
DEFAULT_EPSILON = 2.5        # L1 on T
DEFAULT_VAREPSILON = 2.5     # L1 on the core
DEFAULT_DIM_I = 20
DEFAULT_DIM_J = 20
DEFAULT_DIM_K = 4
DEFAULT_MAX_ROUNDS = 500
DEFAULT_TOLERANCE = 1e-6
DEFAULT_SEED = 0

DEFAULT_SAMPLING_RATES = (0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_SWEEP_IJ = (5, 10, 15, 20, 25, 30)
DEFAULT_SWEEP_K = (2, 3, 4, 5, 6, 8, 10)
DEFAULT_SWEEP_CONTEXT = (0.0, 0.005, 0.01, 0.02, 0.05)
DEFAULT_SWEEP_SPARSITY = (0.1, 0.5, 1.0, 2.5, 5.0, 10.0)

OUTPUT_DIR_ENV = "NRCNTF_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "runs"

EXIT_OK = 0
EXIT_INPUT_ERROR = 2
EXIT_SOLVER_FAILURE = 3

MODES = ("ingest", "factorize", "complete", "sequence", "sweep", "synth", "analyze")


@dataclasses.dataclass(frozen=True)
class Hyperparameters:
    """Regularization weights, pattern dimensions and solver controls.

    gamma, delta, epsilon and varepsilon are the L1 weights on O, D, T and
    the core respectively.
    """

    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA
    delta: float = DEFAULT_DELTA
    epsilon: float = DEFAULT_EPSILON
    varepsilon: float = DEFAULT_VAREPSILON
    dim_i: int = DEFAULT_DIM_I
    dim_j: int = DEFAULT_DIM_J
    dim_k: int = DEFAULT_DIM_K
    max_rounds: int = DEFAULT_MAX_ROUNDS
    tolerance: float = DEFAULT_TOLERANCE
    nr_enabled: bool = True
    nr_sigma: float | None = None
    log_every: int = 50

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("alpha", "beta", "gamma", "delta", "epsilon", "varepsilon"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise InputError(f"{name} must be finite and nonnegative, got {value}")
        for name in ("dim_i", "dim_j", "dim_k", "max_rounds"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be a positive integer")
        if not self.tolerance >= 0:
            raise InputError("tolerance must be nonnegative")
        if self.nr_sigma is not None and not self.nr_sigma > 0:
            raise InputError("nr_sigma must be positive")

    @property
    def dims(self):
        return (self.dim_i, self.dim_j, self.dim_k)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def without_context(self):
        """Same settings with the context terms and the neighbor pass off."""
        return self.replace(alpha=0.0, beta=0.0, nr_enabled=False)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**data)


@dataclasses.dataclass
class RunConfig:
    """Everything one CLI run needs. JSON keys match the field names."""

    mode: str = "factorize"
    trips: str | None = None
    poi: str | None = None
    categories: str | None = None
    adjacency: str | None = None
    tensor: str | None = None
    context: str | None = None
    manifest: str | None = None
    checkpoint: str | None = None
    output_dir: str = DEFAULT_OUTPUT_DIR
    zones: int | None = None
    slices: int | None = None
    workdays_only: bool = False
    exclude_dates: list = dataclasses.field(default_factory=list)
    hyper: Hyperparameters = dataclasses.field(default_factory=Hyperparameters)
    sampling_rate: float = 1.0
    sampling_rates: list = dataclasses.field(default_factory=lambda: list(DEFAULT_SAMPLING_RATES))
    repeats: int = 1
    seed: int = DEFAULT_SEED
    sweep_ij: list = dataclasses.field(default_factory=lambda: list(DEFAULT_SWEEP_IJ))
    sweep_k: list = dataclasses.field(default_factory=lambda: list(DEFAULT_SWEEP_K))
    sweep_context: list = dataclasses.field(default_factory=list)
    sweep_sparsity: list = dataclasses.field(default_factory=list)
    workers: int = 1
    synth: dict = dataclasses.field(default_factory=dict)

    def validate(self):
        if self.mode not in MODES:
            raise InputError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        self.hyper.validate()
        if not 0 < self.sampling_rate <= 1:
            raise InputError("sampling_rate must be in (0, 1]")
        for rate in self.sampling_rates:
            if not 0 < rate <= 1:
                raise InputError(f"sampling rate {rate} out of (0, 1]")
        if self.repeats < 1:
            raise InputError("repeats must be >= 1")
        for name in self.required_paths():
            path = getattr(self, name)
            if path is None:
                raise InputError(f"mode {self.mode} needs --{name.replace('_', '-')}")
            if not Path(path).exists():
                raise FileNotFoundError(f"{name} not found: {path}")
        return self

    def required_paths(self):
        if self.mode == "ingest":
            return ("trips", "poi", "adjacency")
        if self.mode in ("factorize", "complete", "sweep"):
            return ("tensor", "context")
        if self.mode == "sequence":
            return ("manifest",)
        if self.mode == "analyze":
            return ("checkpoint",)
        return ()

    def to_dict(self):
        data = dataclasses.asdict(self)
        data["hyper"] = self.hyper.to_dict()
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        hyper = Hyperparameters.from_dict(data.pop("hyper", {}) or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        return cls(hyper=hyper, **data)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise InputError(f"config is not valid JSON: {e.msg}", line=e.lineno) from None
        return cls.from_dict(data)

    def resolved_output_dir(self):
        """Output directory, honoring the environment override."""
        return Path(os.environ.get(OUTPUT_DIR_ENV) or self.output_dir)


def config_hash(config):
    """SHA-256 of the canonical JSON form of a RunConfig."""
    payload = json.dumps(config.to_dict(), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
