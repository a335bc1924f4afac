# services/experiment_service.py
"""
Command implementations behind the CLI.

Every command takes a validated RunConfig, writes its artifacts into the
output directory, and returns a JSON-ready summary. ``run_command`` wraps a
command with the run registry and the ``manifest.json`` file.
"""

import concurrent.futures
import importlib.metadata
import json
import logging
import time
from pathlib import Path

import numpy as np
import pandas as pd

from services import analysis_service as analysis
from services import baseline_service as baselines
from services import factorization_service as fs
from services import ingestion_service as ingest
from services import sequence_service
from services import storage_service as storage
from services import synth_generator as synth
from services.config import Hyperparameters, config_hash
from services.database_service import DatabaseService
from services.errors import InputError

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
VERSIONED_PACKAGES = ("numpy", "scipy", "tensorly", "pandas", "sqlalchemy")
CP_KINDS = ("cp", "rcp")


# ---------- HELPERS ----------

def package_versions():
    versions = {}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = importlib.metadata.version(name)
        except importlib.metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def derive_seeds(seed, count, cell=None):
    """``count`` independent integer seeds spawned from ``seed`` (and ``cell``, when given)."""
    entropy = seed if cell is None else [seed, cell]
    children = np.random.SeedSequence(entropy).spawn(count)
    return [int(child.generate_state(1)[0]) for child in children]


def model_kind(h, graph):
    if h.nr_enabled and graph is not None:
        return "nr-cntf"
    return "cntf" if (h.alpha or h.beta) else "tucker"


def write_json(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable), encoding="utf-8")
    return path


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return str(value)


def save_model(path, values, history, kind, h, seed, extra=None):
    """Checkpoint a solved model with its kind, dims and hyperparameters."""
    meta = {"kind": kind, "hyper": h.to_dict(), "seed": seed}
    if kind in CP_KINDS:
        meta["dims"] = [int(values["o"].shape[1])]
    else:
        meta["dims"] = list(values["core"].shape)
    meta.update(extra or {})
    return storage.save_checkpoint(path, values, history, meta)


def load_model(path):
    """Read a checkpoint as a FactorModel (CP kinds as a superdiagonal Tucker model)."""
    factors, history, meta = storage.load_checkpoint(path)
    kind = meta.get("kind")
    if kind in CP_KINDS:
        model = baselines.CpModel.from_blocks(factors).as_tucker()
        dims = (model.dims[0],)
    else:
        missing = set(fs.BLOCKS) - set(factors)
        if missing:
            raise InputError(f"{path}: checkpoint missing factors {sorted(missing)}")
        model = fs.FactorModel.from_blocks(factors)
        dims = model.dims
    if tuple(meta.get("dims", dims)) != tuple(dims):
        raise InputError(f"{path}: checkpoint dims {meta.get('dims')} do not match its factors {dims}")
    return model, history, meta


def load_inputs(config):
    """Data tensor, context matrix and (optional) neighbor graph of a run."""
    r = storage.load_array(config.tensor)
    if r.ndim != 3 or r.shape[0] != r.shape[1]:
        raise InputError(f"{config.tensor}: expected an M×M×N tensor, got {r.shape}")
    w = ingest.context_from_array(storage.load_array(config.context))
    if w.zones != r.shape[0]:
        raise InputError(f"context has {w.zones} zones, tensor has {r.shape[0]}")
    graph = None
    if config.adjacency:
        graph = ingest.build_neighbor_graph(config.adjacency, r.shape[0])
    return r, w, graph


def _evaluation_mask(shape, rate, seed):
    return None if rate >= 1 else synth.sample_mask(shape, rate, seed)


def _score(r, r_hat, mask):
    """Held-out RMSE when a mask hides cells, full-tensor RMSE otherwise."""
    report = analysis.rmse_report(r, r_hat, mask)
    return report["held_out_rmse"] if report["held_out_rmse"] is not None else report["full_rmse"]


def _map(fn, jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(job) for job in jobs]


# ---------- RUN WRAPPER ----------

class RunRecorder:
    """Registry row, artifact list and manifest of one CLI run."""

    def __init__(self, config):
        self.config = config
        self.output_dir = config.resolved_output_dir()
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.hash = config_hash(config)
        self.versions = package_versions()
        self.db = DatabaseService(self.output_dir)
        self.run = None
        self.artifacts = []

    def __enter__(self):
        earlier = self.db.runs_with_hash(self.hash)
        if earlier:
            logger.info(
                "config %s already ran %d time(s) in %s; last run %d ended %s",
                self.hash[:12], len(earlier), self.output_dir, earlier[-1].id, earlier[-1].status,
            )
        self.run = self.db.record_run(self.config.mode, self.hash, self.config.seed, self.versions)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None:
            self.db.finish_run(self.run, "failed", summary={"error": str(exc)})
        self.db.close()
        return False

    def add(self, kind, path):
        self.artifacts.append({"kind": kind, "path": str(path)})
        self.db.add_artifact(self.run, kind, path)

    def finish(self, summary):
        manifest = {
            "mode": self.config.mode,
            "config": self.config.to_dict(),
            "config_hash": self.hash,
            "seed": self.config.seed,
            "versions": self.versions,
            "artifacts": self.artifacts,
        }
        write_json(self.output_dir / MANIFEST_FILE, manifest)
        self.db.finish_run(self.run, "ok", summary.get("final_objective"), summary)


def run_command(config):
    """Validate ``config``, run its mode and record the run.

    Returns:
        dict: the command's summary, with ``output_dir`` added.
    """
    config.validate()
    command = COMMANDS[config.mode]
    with RunRecorder(config) as recorder:
        started = time.perf_counter()
        summary = command(config, recorder)
        summary["seconds"] = round(time.perf_counter() - started, 3)
        summary["output_dir"] = str(recorder.output_dir)
        recorder.finish(summary)
    return summary


# ---------- COMMANDS ----------

def cmd_ingest(config, recorder):
    """Trip, POI and adjacency CSVs → tensor, context and graph artifacts."""
    trips = ingest.read_trips_csv(config.trips, config.workdays_only, config.exclude_dates)
    zones = config.zones
    if zones is None:
        zones = int(max(trips["origin_zone"].max(), trips["dest_zone"].max())) + 1 if len(trips) else 0
    slices = config.slices
    if slices is None:
        slices = int(trips["slice"].max()) + 1 if len(trips) else 0
    r, report = ingest.build_data_tensor(trips, zones, slices)

    names = ingest.read_category_names(config.categories) if config.categories else ingest.DEFAULT_POI_CATEGORIES
    context = ingest.build_context_matrix(ingest.read_poi_csv(config.poi, zones, names))
    graph = ingest.build_neighbor_graph(config.adjacency, zones)

    out = recorder.output_dir
    recorder.add("tensor", storage.save_array(out / "tensor.npz", r))
    recorder.add("tensor-csv", storage.write_nonzero_csv(out / "tensor.csv", r))
    recorder.add("context", storage.save_array(out / "context.npz", context.w))
    adjacency = out / "adjacency.csv"
    ingest.write_adjacency_csv(adjacency, graph)
    recorder.add("adjacency", adjacency)
    summary = {
        "zones": zones,
        "slices": slices,
        "accepted": report.accepted,
        "rejected": report.rejected,
        "contextless_zones": int(context.contextless.sum()),
        "isolated_zones": int(graph.isolated().sum()),
        "edges": len(graph.pairs()),
    }
    recorder.add("ingest-report", write_json(out / "ingest_report.json", summary))
    return summary


def cmd_factorize(config, recorder):
    """Fit one model; with ``sampling_rate < 1`` the fit only sees a sampled mask."""
    r, w, graph = load_inputs(config)
    h = config.hyper
    mask = _evaluation_mask(r.shape, config.sampling_rate, config.seed)
    started = time.perf_counter()
    result = fs.bcd_solve(r, w, h, fs.init_model(r, h.dims, config.seed), neighbor_graph=graph, mask=mask)
    seconds = time.perf_counter() - started
    kind = model_kind(h, graph)

    out = recorder.output_dir
    recorder.add("checkpoint", save_model(out / "model.npz", result.values, result.history, kind, h, config.seed))
    summary = {
        "kind": kind,
        "rounds": result.rounds,
        "converged": result.converged,
        "restarts": result.restarts,
        "nr_reverts": result.nr_reverts,
        "final_objective": result.final_objective,
        "objective_history": result.history,
        "solve_seconds": round(seconds, 3),
        "seed": config.seed,
        **analysis.rmse_report(r, result.model.reconstruct(), mask),
    }
    recorder.add("report", write_json(out / "factorize_report.json", summary))
    return summary


def completion_methods(h, graph):
    """Method name → solver for the completion comparison."""
    methods = {}
    if graph is not None and h.nr_enabled:
        methods["nr-cntf"] = "nr-cntf"
    methods.update({
        "cntf": "cntf",
        "tucker": "tucker",
        f"cp-{h.dim_k}": ("cp", h.dim_k),
        f"rcp-{h.dim_k}": ("rcp", h.dim_k),
    })
    if h.dim_i != h.dim_k:
        methods[f"cp-{h.dim_i}"] = ("cp", h.dim_i)
        methods[f"rcp-{h.dim_i}"] = ("rcp", h.dim_i)
    return methods


def complete_one(job):
    """Solve one (method, mask, seed) completion cell; returns the reconstruction."""
    method, r, w, graph, h, mask, seed = job
    if method == "nr-cntf":
        result = fs.bcd_solve(r, w, h, fs.init_model(r, h.dims, seed), neighbor_graph=graph, mask=mask)
        return result.model.reconstruct()
    if method == "cntf":
        result = fs.bcd_solve(r, w, h.replace(nr_enabled=False), fs.init_model(r, h.dims, seed), mask=mask)
        return result.model.reconstruct()
    if method == "tucker":
        return baselines.tucker_solve(r, h, mask, fs.init_model(r, h.dims, seed)).model.reconstruct()
    kind, rank = method
    init = baselines.init_cp_model(r, rank, seed)
    if kind == "cp":
        result = baselines.cp_solve(r, h, mask, init)
    else:
        result = baselines.rcp_solve(r, w, h, mask, init)
    return baselines.cp_model_of(result).reconstruct()


def cmd_complete(config, recorder):
    """Held-out RMSE of every method at every sampling rate, over repeats."""
    r, w, graph = load_inputs(config)
    h = config.hyper
    methods = completion_methods(h, graph)
    rows, jobs = [], []
    for rate in config.sampling_rates:
        for repeat, seed in enumerate(derive_seeds(config.seed, config.repeats)):
            mask = _evaluation_mask(r.shape, rate, seed)
            for name, method in methods.items():
                rows.append({"method": name, "rate": rate, "repeat": repeat, "seed": seed})
                jobs.append((method, r, w, graph, h, mask, seed))
    reconstructions = _map(complete_one, jobs, config.workers)
    for row, job, r_hat in zip(rows, jobs, reconstructions):
        report = analysis.rmse_report(r, r_hat, job[5])
        row.update(full_rmse=report["full_rmse"], held_out_rmse=report["held_out_rmse"])

    out = recorder.output_dir
    table = pd.DataFrame(rows)
    recorder.add("completion", out / "completion.csv")
    table.to_csv(out / "completion.csv", index=False, float_format="%.12g")
    scored = table.assign(rmse=table["held_out_rmse"].fillna(table["full_rmse"]))
    summary_table = (
        scored.groupby(["rate", "method"], sort=True)["rmse"]
        .agg(["mean", "median"])
        .reset_index()
    )
    recorder.add("completion-summary", out / "completion_summary.csv")
    summary_table.to_csv(out / "completion_summary.csv", index=False, float_format="%.12g")
    for rate, group in summary_table.groupby("rate"):
        logger.info(
            "rate %.2f: %s", rate,
            ", ".join(f"{m}={v:.4g}" for m, v in zip(group["method"], group["median"])),
        )
    return {
        "methods": list(methods),
        "rates": list(config.sampling_rates),
        "repeats": config.repeats,
        "median_rmse": {
            f"{row.method}@{row.rate:g}": row.median for row in summary_table.itertuples(index=False)
        },
    }


def sweep_one(job):
    """Fit one sweep cell; returns ``(rmse, final objective)``."""
    r, w, graph, h, mask, seed = job
    result = fs.bcd_solve(r, w, h, fs.init_model(r, h.dims, seed), neighbor_graph=graph, mask=mask)
    return _score(r, result.model.reconstruct(), mask), result.final_objective


def sweep_cells(config):
    """(axis, value, Hyperparameters) for every point of the sweep."""
    h = config.hyper
    cells = [("ij", v, h.replace(dim_i=v, dim_j=v)) for v in config.sweep_ij]
    cells += [("k", v, h.replace(dim_k=v)) for v in config.sweep_k]
    cells += [("context", v, h.replace(alpha=v, beta=v)) for v in config.sweep_context]
    cells += [("sparsity", v, h.replace(gamma=v, delta=v, epsilon=v)) for v in config.sweep_sparsity]
    return cells


def cmd_sweep(config, recorder):
    """RMSE against dimensionality and regularization weights."""
    r, w, graph = load_inputs(config)
    rows, jobs = [], []
    for cell, (axis, value, h) in enumerate(sweep_cells(config)):
        for repeat, seed in enumerate(derive_seeds(config.seed, config.repeats, cell)):
            mask = _evaluation_mask(r.shape, config.sampling_rate, seed)
            rows.append({"axis": axis, "value": value, "repeat": repeat, "seed": seed})
            jobs.append((r, w, graph, h, mask, seed))
    for row, (rmse, final) in zip(rows, _map(sweep_one, jobs, config.workers)):
        row.update(rmse=rmse, final_objective=final)

    out = recorder.output_dir
    table = pd.DataFrame(rows, columns=["axis", "value", "repeat", "seed", "rmse", "final_objective"])
    recorder.add("sweep", out / "sweep.csv")
    table.to_csv(out / "sweep.csv", index=False, float_format="%.12g")
    averaged = table.groupby(["axis", "value"], sort=False)["rmse"].agg(["mean", "median"]).reset_index()
    written = {}
    for axis in ("ij", "k", "context", "sparsity"):
        part = averaged[averaged["axis"] == axis]
        if len(part):
            path = out / f"sweep_{axis}.csv"
            part.drop(columns="axis").to_csv(path, index=False, float_format="%.12g")
            recorder.add(f"sweep-{axis}", path)
            written[axis] = part["mean"].tolist()
    return {"cells": len(rows), "mean_rmse": written}


def read_years(config):
    years = []
    for entry in sequence_service.read_sequence_manifest(config.manifest):
        mask = storage.load_array(entry["mask"]) if "mask" in entry else None
        years.append(sequence_service.YearInput(
            label=str(entry["label"]),
            tensor=storage.load_array(entry["tensor"]),
            context=ingest.context_from_array(storage.load_array(entry["context"])),
            mask=mask,
        ))
    return years


def cmd_sequence(config, recorder):
    """Pipeline-initialized factorization of a sequence of years."""
    years = read_years(config)
    graph = None
    if config.adjacency:
        graph = ingest.build_neighbor_graph(config.adjacency, np.shape(years[0].tensor)[0])
    h = config.hyper
    sequence = sequence_service.pi_tsa(years, h, graph=graph, seed=config.seed)

    out = recorder.output_dir
    kind = model_kind(h, graph)
    finals = {}
    for (label, model, history), year in zip(sequence, years):
        path = save_model(
            out / f"model_{label}.npz", model.blocks(), history, kind, h, config.seed, {"label": label},
        )
        recorder.add("checkpoint", path)
        for report in analysis.write_reports(model, out / f"analysis_{label}", graph):
            recorder.add("report", report)
        finals[label] = {
            "final_objective": history[-1],
            "rounds": len(history) - 1,
            **analysis.rmse_report(year.tensor, model.reconstruct(), year.mask),
        }
    drift = [report.to_dict() for report in sequence.drift]
    recorder.add("drift", write_json(out / "drift.json", drift))

    delta_rows = []
    for entry in analysis.sequence_deltas(sequence):
        for z, row in enumerate(entry["rhythm"]):
            for k, value in enumerate(row):
                delta_rows.append({
                    "label": entry["label"], "previous_label": entry["previous_label"],
                    "table": "rhythm", "index": z, "pattern": k, "delta": value,
                })
        for table in ("inter", "intra"):
            for community, value in enumerate(entry.get(table, ())):
                delta_rows.append({
                    "label": entry["label"], "previous_label": entry["previous_label"],
                    "table": table, "index": community, "pattern": community, "delta": value,
                })
    if delta_rows:
        path = out / "year_over_year.csv"
        pd.DataFrame(delta_rows).to_csv(path, index=False, float_format="%.12g")
        recorder.add("deltas", path)
    return {"years": sequence.labels, "kind": kind, "fits": finals, "drift": drift}


def cmd_synth(config, recorder):
    """Write a synthetic city: CSV inputs, tensor, context and the planted model."""
    spec = synth.PlantSpec.from_dict({"seed": config.seed, **config.synth})
    out = recorder.output_dir
    city = synth.emit_city(spec, out)
    for kind in ("trips", "poi", "categories", "adjacency"):
        recorder.add(kind, city[kind])
    truth, r, w = city["ground_truth"], city["tensor"], city["context"]
    recorder.add("tensor", storage.save_array(out / "tensor.npz", r))
    recorder.add("context", storage.save_array(out / "context.npz", w.w))
    recorder.add("trip-tensor", storage.save_array(out / "trip_tensor.npz", np.log1p(city["counts"])))
    planted = Hyperparameters(dim_i=spec.dim_i, dim_j=spec.dim_j, dim_k=spec.dim_k, alpha=0.0, beta=0.0,
                              gamma=0.0, delta=0.0, epsilon=0.0, varepsilon=0.0, nr_enabled=False)
    path = save_model(out / "ground_truth.npz", truth.blocks(), [], "tucker", planted, spec.seed, {"planted": True})
    recorder.add("checkpoint", path)
    origin, dest = synth.planted_labels(spec)
    labels = out / "planted_labels.csv"
    pd.DataFrame({"zone": np.arange(spec.zones), "origin_community": origin,
                  "destination_community": dest}).to_csv(labels, index=False)
    recorder.add("labels", labels)
    return {"zones": spec.zones, "slices": spec.slices, "dims": list(spec.dims),
            "noise": spec.noise, "trips": int(city["counts"].sum())}


def cmd_analyze(config, recorder):
    """Community, rhythm and intensity reports of a checkpoint."""
    model, history, meta = load_model(config.checkpoint)
    graph = None
    if config.adjacency:
        graph = ingest.build_neighbor_graph(config.adjacency, model.data_shape[0])
    paths = analysis.write_reports(model, recorder.output_dir, graph)
    for path in paths:
        recorder.add("report", path)
    report = analysis.build_report(model, graph)
    return {
        "kind": meta.get("kind"),
        "dims": list(model.dims),
        "final_objective": history[-1] if history else None,
        "empty_origin_patterns": report["origin_communities"]["empty"],
        "empty_destination_patterns": report["destination_communities"]["empty"],
    }


COMMANDS = {
    "ingest": cmd_ingest,
    "factorize": cmd_factorize,
    "complete": cmd_complete,
    "sequence": cmd_sequence,
    "sweep": cmd_sweep,
    "synth": cmd_synth,
    "analyze": cmd_analyze,
}

