# app.py - command line front end for NR-cNTF runs

import argparse
import dataclasses
import logging
import sys

from dotenv import load_dotenv

from services.config import (
    EXIT_INPUT_ERROR,
    EXIT_OK,
    EXIT_SOLVER_FAILURE,
    MODES,
    RunConfig,
)
from services.errors import SolverError
from services.experiment_service import run_command

logger = logging.getLogger("nrcntf")


# ==================== ARGUMENTS ====================

def _common_arguments():
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--config", help="JSON run config; flags override its keys")
    parser.add_argument("--output-dir", help="output directory (env NRCNTF_OUTPUT_DIR wins)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    inputs = parser.add_argument_group("inputs")
    inputs.add_argument("--trips")
    inputs.add_argument("--poi")
    inputs.add_argument("--categories", help="category names, one per line")
    inputs.add_argument("--adjacency")
    inputs.add_argument("--tensor")
    inputs.add_argument("--context")
    inputs.add_argument("--manifest", help="sequence manifest (JSON)")
    inputs.add_argument("--checkpoint")
    inputs.add_argument("--zones", type=int)
    inputs.add_argument("--slices", type=int)
    inputs.add_argument("--workdays-only", action="store_true", default=None)
    inputs.add_argument("--exclude-dates", nargs="+", metavar="DATE")

    hyper = parser.add_argument_group("model")
    for name in ("alpha", "beta", "gamma", "delta", "epsilon", "varepsilon"):
        hyper.add_argument(f"--{name}", type=float)
    hyper.add_argument("--dims", type=int, nargs=3, metavar=("I", "J", "K"))
    hyper.add_argument("--max-rounds", type=int)
    hyper.add_argument("--tol", type=float, dest="tolerance")
    hyper.add_argument("--no-nr", action="store_true", help="skip the neighboring pass")
    hyper.add_argument("--nr-sigma", type=float)

    runs = parser.add_argument_group("experiments")
    runs.add_argument("--sampling-rate", type=float)
    runs.add_argument("--rates", type=float, nargs="+", dest="sampling_rates")
    runs.add_argument("--repeats", type=int)
    runs.add_argument("--sweep-ij", type=int, nargs="+")
    runs.add_argument("--sweep-k", type=int, nargs="+")
    runs.add_argument("--sweep-context", type=float, nargs="+")
    runs.add_argument("--sweep-sparsity", type=float, nargs="+")
    runs.add_argument("--workers", type=int)

    city = parser.add_argument_group("synthetic city")
    city.add_argument("--grid", type=int, nargs=2, metavar=("ROWS", "COLS"))
    city.add_argument("--noise", type=float)
    return parser


def build_parser():
    common = _common_arguments()
    parser = argparse.ArgumentParser(
        prog="nrcntf",
        description="Context- and neighbor-regularized Tucker factorization of OD-time tensors",
    )
    sub = parser.add_subparsers(dest="mode", required=True)
    helps = {
        "ingest": "build tensor, context and graph from CSV records",
        "factorize": "fit one model",
        "complete": "tensor completion comparison over sampling rates",
        "sequence": "pipeline-initialized multi-year factorization",
        "sweep": "RMSE against dimensionality and regularization",
        "synth": "write a seeded synthetic city",
        "analyze": "community, rhythm and intensity reports of a checkpoint",
    }
    for mode in MODES:
        sub.add_parser(mode, parents=[common], help=helps[mode])
    return parser


_CONFIG_FIELDS = (
    "trips", "poi", "categories", "adjacency", "tensor", "context", "manifest",
    "checkpoint", "output_dir", "zones", "slices", "workdays_only", "exclude_dates",
    "sampling_rate", "sampling_rates", "repeats", "seed", "sweep_ij", "sweep_k",
    "sweep_context", "sweep_sparsity", "workers",
)
_HYPER_FIELDS = (
    "alpha", "beta", "gamma", "delta", "epsilon", "varepsilon", "max_rounds",
    "tolerance", "nr_sigma",
)


def config_from_args(args):
    """RunConfig from the JSON file (if any) with command-line overrides."""
    config = RunConfig.from_json(args.config) if args.config else RunConfig()
    changes = {name: getattr(args, name) for name in _CONFIG_FIELDS if getattr(args, name) is not None}
    hyper = {name: getattr(args, name) for name in _HYPER_FIELDS if getattr(args, name) is not None}
    if args.dims:
        hyper.update(dim_i=args.dims[0], dim_j=args.dims[1], dim_k=args.dims[2])
    if args.no_nr:
        hyper["nr_enabled"] = False
    synth = dict(config.synth)
    if args.mode == "synth":
        if args.grid:
            synth.update(grid_rows=args.grid[0], grid_cols=args.grid[1])
        if args.slices is not None:
            synth["slices"] = args.slices
        if args.dims:
            synth.update(dim_i=args.dims[0], dim_j=args.dims[1], dim_k=args.dims[2])
        if args.noise is not None:
            synth["noise"] = args.noise
    return dataclasses.replace(
        config, mode=args.mode, hyper=config.hyper.replace(**hyper), synth=synth, **changes,
    )


# ==================== MAIN ====================

def main(argv=None):
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = config_from_args(args)
        summary = run_command(config)
    except SolverError as e:
        print(f"❌ Solver failed: {e}")
        return EXIT_SOLVER_FAILURE
    except (ValueError, FileNotFoundError) as e:
        # InputError, malformed JSON and CSV parse errors are all ValueErrors
        print(f"❌ Input error: {e}")
        return EXIT_INPUT_ERROR

    print(f"✅ {config.mode} finished in {summary['seconds']:.2f}s")
    if summary.get("final_objective") is not None:
        print(f"📊 Final objective: {summary['final_objective']:.6g}")
    for key in ("held_out_rmse", "full_rmse"):
        if summary.get(key) is not None:
            print(f"📊 {key}: {summary[key]:.6g}")
    print(f"📁 Outputs: {summary['output_dir']}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
