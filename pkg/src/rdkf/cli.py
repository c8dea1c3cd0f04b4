"""Command line entry point ``rdkf``.

Subcommands: ``generate-network``, ``run``, ``steady-state``, ``tolerances``
and ``report``. Failures print a JSON error object on stderr and exit with
2 (bad configuration), 3 (numerical infeasibility) or 4 (I/O).
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericalError
from .graph import random_strongly_connected
from .harness import (ExperimentConfig, VariantSpec, build_setup, compare_variants, default_density,
                      standard_variants, run_experiment, write_report)
from .least_favorable import full_tolerance, local_tolerances, robust_steady_state, state_tolerance

EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 2, 3, 4


def preset_tracking() -> ExperimentConfig:
    """Full-size tracking study: 100 nodes, 20 sensors, 4% links, 500 runs of 250 steps."""
    return ExperimentConfig(num_nodes=100, num_sensors=20, edge_density=0.04, num_runs=500,
                            horizon=250, actual_model="least_favorable", actual_tolerance=0.05,
                            variants=tuple(standard_variants(0.05)))


PRESETS = {"tracking": preset_tracking}


def _variant_arg(text: str) -> VariantSpec:
    """``NAME:KIND[:key=value,...]``, e.g. ``DKF3:dkf:alpha=1``."""
    parts = text.split(":")
    if len(parts) < 2:
        raise argparse.ArgumentTypeError(f"variant {text!r} must look like NAME:KIND[:key=value,...]")
    kwargs = {}
    if len(parts) > 2:
        for item in ":".join(parts[2:]).split(","):
            key, _, val = item.partition("=")
            kwargs[key] = val if key == "comm_mode" else float(val)
    try:
        return VariantSpec(parts[0], parts[1], **kwargs)
    except TypeError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdkf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, runs=True):
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--config", help="experiment config JSON (flags override it)")
        p.add_argument("--nodes", type=int)
        p.add_argument("--sensors", type=int)
        p.add_argument("--density", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--tolerance", type=float, help="tolerance b of the actual model and robust variants")
        p.add_argument("--k", type=float, help="measurement noise scale k")
        p.add_argument("--out", default="out")
        if runs:
            p.add_argument("--runs", type=int)
            p.add_argument("--horizon", type=int)
            p.add_argument("--alpha", type=float)
            p.add_argument("--beta", type=float)
            p.add_argument("--delta", type=float)
            p.add_argument("--variant", action="append", type=_variant_arg,
                           help="NAME:KIND[:key=value,...]; repeatable, replaces the preset list")
            p.add_argument("--workers", type=int, default=1)
            p.add_argument("--no-checks", action="store_true")

    g = sub.add_parser("generate-network", help="write a random strongly connected network as JSON")
    common(g, runs=False)
    common(sub.add_parser("run", help="Monte Carlo comparison of filter variants"))
    common(sub.add_parser("steady-state", help="stationary least favorable covariances"), runs=False)
    t = sub.add_parser("tolerances", help="local tolerances b^i of the sensor nodes")
    common(t, runs=False)
    t.add_argument("--comm-mode", choices=["global", "state"], default="global")
    r = sub.add_parser("report", help="print the comparison table of a finished run")
    r.add_argument("--out", default="out")
    return parser


def config_from_args(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_json(Path(args.config).read_text())
    elif args.preset:
        cfg = PRESETS[args.preset]()
    else:
        cfg = ExperimentConfig()
    changes = {}
    if args.nodes is not None:
        changes["num_nodes"] = args.nodes
        if args.density is None:
            changes["edge_density"] = default_density(args.nodes)
    for flag, key in (("sensors", "num_sensors"), ("density", "edge_density"), ("seed", "seed"),
                      ("k", "noise_scale"), ("runs", "num_runs"), ("horizon", "horizon")):
        val = getattr(args, flag, None)
        if val is not None:
            changes[key] = val
    if getattr(args, "no_checks", False):
        changes["checks"] = False
    variants = list(getattr(args, "variant", None) or cfg.variants)
    if args.tolerance is not None:
        changes["actual_tolerance"] = args.tolerance
        variants = [replace(v, tolerance=args.tolerance) if v.kind != "dkf" else v for v in variants]
    for key in ("alpha", "beta", "delta"):
        val = getattr(args, key, None)
        if val is not None:
            variants = [replace(v, **{key: val}) for v in variants]
    changes["variants"] = tuple(variants)
    cfg = replace(cfg, **changes)
    # revalidate the merged result against the schema
    return ExperimentConfig.from_dict(cfg.to_dict())


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True))


def _cmd_generate(args) -> dict:
    cfg = config_from_args(args)
    rng = np.random.default_rng([cfg.seed, 0])
    net = random_strongly_connected(cfg.num_nodes, cfg.num_sensors, cfg.density, rng)
    path = Path(args.out) / "network.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    net.save(path)
    return {"network": str(path), "num_links": net.num_links}


def _steady(args):
    cfg = config_from_args(args)
    setup = build_setup(replace(cfg, horizon=1, num_runs=1, variants=(VariantSpec("DKF", "dkf"),)))
    return cfg, setup, robust_steady_state(setup.ctx.model, cfg.actual_tolerance)


def _cmd_steady(args) -> dict:
    cfg, setup, steady = _steady(args)
    data = steady.to_dict()
    data["b"] = cfg.actual_tolerance
    data["b_full"] = full_tolerance(steady)
    _write_json(Path(args.out) / "steady_state.json", data)
    return {"theta_inf": steady.theta, "iterations": steady.iterations}


def _cmd_tolerances(args) -> dict:
    cfg, setup, steady = _steady(args)
    local = local_tolerances(steady, setup.ctx.model)
    b_i = {str(setup.ctx.network.sensors[k]): v for k, v in local.items()}
    data = {"b": cfg.actual_tolerance, "b_i": b_i, "b_full": full_tolerance(steady),
            "comm_mode": args.comm_mode,
            "b_comm": cfg.actual_tolerance if args.comm_mode == "global" else state_tolerance(steady),
            "V_inf": steady.V.tolist(), "theta_inf": steady.theta,
            "K": steady.K.tolist(), "K_tilde": steady.K_tilde.tolist()}
    _write_json(Path(args.out) / "tolerances.json", data)
    return {"b_i": b_i}


def _cmd_run(args) -> dict:
    cfg = config_from_args(args)
    report = run_experiment(cfg, workers=max(1, args.workers))
    files = write_report(report, args.out)
    return {"files": [str(f) for f in files], "comparison": compare_variants(report)}


def _cmd_report(args) -> dict:
    summary = json.loads((Path(args.out) / "summary.json").read_text())
    return {"comparison": summary["comparison"]}


COMMANDS = {"generate-network": _cmd_generate, "run": _cmd_run, "steady-state": _cmd_steady,
            "tolerances": _cmd_tolerances, "report": _cmd_report}


def _fail(code: int, kind: str, exc: Exception) -> int:
    print(json.dumps({"error": kind, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def run_cli(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERICAL, "numerical", exc)
    except OSError as exc:
        return _fail(EXIT_IO, "io", exc)
    print(json.dumps(result, indent=1, sort_keys=True))
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
