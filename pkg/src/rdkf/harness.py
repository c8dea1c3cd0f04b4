"""Seeded Monte Carlo comparison of filter variants on shared trajectories.

Run ``r`` draws its trajectory from ``numpy.random.default_rng([seed, 1, r])``;
network and sensor suite come from ``default_rng([seed, 0])``. Per-run
results are reduced with ``math.fsum`` in run order, so serial and pooled
executions give bit-identical reports.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .distributed import FilterVariant, NetworkContext, TriggerParams, rdkfloc_variant, run_network_filter
from .errors import ConfigError
from .graph import SensorNetwork, random_strongly_connected
from .least_favorable import LfSchedule, lf_schedule, sample_trajectory
from .presets import tracking_model

# mean out-degree of the reference 100-node network at 4% link density
REFERENCE_MEAN_DEGREE = 0.04 * 99
STEADY_FRACTION = 0.2


def default_density(num_nodes: int) -> float:
    """Link density that keeps the reference mean degree, capped at a complete graph."""
    if num_nodes <= 1:
        return 1.0
    return min(1.0, REFERENCE_MEAN_DEGREE / (num_nodes - 1))


@dataclass(frozen=True)
class VariantSpec:
    name: str
    kind: str
    tolerance: float = 0.0
    alpha: float = 10.0
    beta: float = 0.2
    delta: float = 0.5
    comm_mode: str = "global"

    @property
    def trigger(self) -> TriggerParams:
        return TriggerParams(self.alpha, self.beta, self.delta)


def standard_variants(b: float = 0.05) -> list[VariantSpec]:
    """The four filters of the tracking comparison: two robust, two classical with different triggers."""
    return [VariantSpec("RDKF", "rdkf", b), VariantSpec("RDKFLOC", "rdkfloc", b),
            VariantSpec("DKF1", "dkf"), VariantSpec("DKF2", "dkf", alpha=0.01)]


@dataclass(frozen=True)
class ExperimentConfig:
    num_nodes: int = 20
    num_sensors: int = 5
    edge_density: Optional[float] = None
    network_file: Optional[str] = None
    noise_scale: float = 1.0
    actual_model: str = "least_favorable"
    actual_tolerance: float = 0.05
    variants: tuple = field(default_factory=lambda: tuple(standard_variants()))
    horizon: int = 250
    num_runs: int = 50
    seed: int = 7
    checks: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(
            v if isinstance(v, VariantSpec) else VariantSpec(**v) for v in self.variants))
        if self.horizon < 1 or self.num_runs < 1:
            raise ConfigError("horizon and num_runs must be at least 1")
        if self.actual_model not in ("nominal", "least_favorable"):
            raise ConfigError(f"unknown actual model {self.actual_model!r}")
        if not self.variants:
            raise ConfigError("at least one filter variant is required")
        if len({v.name for v in self.variants}) != len(self.variants):
            raise ConfigError("variant names must be unique")

    @property
    def density(self) -> float:
        return default_density(self.num_nodes) if self.edge_density is None else self.edge_density

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variants"] = [asdict(v) for v in self.variants]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        try:
            jsonschema.validate(data, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"invalid experiment config: {exc.message}") from exc
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc


_VARIANT_SCHEMA = {
    "type": "object",
    "required": ["name", "kind"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "kind": {"enum": ["rdkf", "rdkfloc", "dkf"]},
        "tolerance": {"type": "number", "minimum": 0},
        "alpha": {"type": "number", "exclusiveMinimum": 0},
        "beta": {"type": "number", "exclusiveMinimum": 0},
        "delta": {"type": "number", "exclusiveMinimum": 0},
        "comm_mode": {"enum": ["global", "state"]},
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "num_nodes": {"type": "integer", "minimum": 1},
        "num_sensors": {"type": "integer", "minimum": 1},
        "edge_density": {"type": ["number", "null"], "exclusiveMinimum": 0, "maximum": 1},
        "network_file": {"type": ["string", "null"]},
        "noise_scale": {"type": "number", "exclusiveMinimum": 0},
        "actual_model": {"enum": ["nominal", "least_favorable"]},
        "actual_tolerance": {"type": "number", "minimum": 0},
        "variants": {"type": "array", "minItems": 1, "items": _VARIANT_SCHEMA},
        "horizon": {"type": "integer", "minimum": 1},
        "num_runs": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "checks": {"type": "boolean"},
    },
}


@dataclass
class Setup:
    """Everything shared by the runs of one experiment."""

    config: ExperimentConfig
    ctx: NetworkContext
    variants: list
    schedule: LfSchedule


def build_setup(config: ExperimentConfig) -> Setup:
    rng = np.random.default_rng([config.seed, 0])
    if config.network_file:
        network = SensorNetwork.load(config.network_file)
    else:
        network = random_strongly_connected(config.num_nodes, config.num_sensors, config.density, rng)
    model = tracking_model(len(network.sensors), rng, config.noise_scale)
    variants = []
    for spec in config.variants:
        if spec.kind == "rdkfloc":
            variants.append(rdkfloc_variant(model, network, spec.tolerance, spec.trigger,
                                            spec.comm_mode, spec.name))
        else:
            variants.append(FilterVariant(spec.name, spec.kind, spec.trigger,
                                          spec.tolerance if spec.kind == "rdkf" else 0.0))
    b = config.actual_tolerance if config.actual_model == "least_favorable" else 0.0
    schedule = lf_schedule(model, b, config.horizon)
    return Setup(config, NetworkContext(model, network), variants, schedule)


@dataclass
class RunResult:
    """Per-variant traces of a single run."""

    sq_err: dict        # name -> (T, N) squared errors
    tx: dict            # name -> (T,) fraction transmitting
    theta: dict         # name -> (4, T) [theta_c, theta_bar_c, theta_s, theta_bar_s]
    diagnostics: dict   # name -> summary of invariant checks


def _group_means(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if not mask.any():
        return np.full(values.shape[0], np.nan)
    return values[:, mask].mean(axis=1)


def _summarise_diagnostics(diags) -> dict:
    if not diags:
        return {}
    return {
        "omega_violations": sum(d.omega_violations for d in diags),
        "fused_violations": sum(d.fused_violations for d in diags),
        "kl_violations": sum(d.kl_violations for d in diags),
        "kl_reverse_violations": sum(d.kl_reverse_violations for d in diags),
        "max_eig_filtered": max(d.max_eig_filt for d in diags),
        "max_eig_fused": max(d.max_eig_fused for d in diags),
        "min_eig_filtered": min(d.min_eig_filt for d in diags),
        "max_kl_silent": max(d.kl_silent_max for d in diags),
        "max_kl_silent_reverse": max(d.kl_silent_reverse_max for d in diags),
    }


def run_single(setup: Setup, r: int) -> RunResult:
    cfg = setup.config
    rng = np.random.default_rng([cfg.seed, 1, r])
    traj = sample_trajectory(setup.ctx.model, setup.schedule.b, cfg.horizon, rng, setup.schedule)
    sensors = setup.ctx.sensor_mask
    out = RunResult({}, {}, {}, {})
    for v in setup.variants:
        run = run_network_filter(setup.ctx, v, traj.measurements, checks=cfg.checks)
        out.sq_err[v.name] = np.sum((run.x_filt - traj.states[:-1, None, :]) ** 2, axis=-1)
        out.tx[v.name] = run.c.mean(axis=1)
        out.theta[v.name] = np.stack([_group_means(run.theta, ~sensors), _group_means(run.theta_bar, ~sensors),
                                      _group_means(run.theta, sensors), _group_means(run.theta_bar, sensors)])
        out.diagnostics[v.name] = _summarise_diagnostics(run.diagnostics)
    return out


def _run_task(args):
    setup, r = args
    return run_single(setup, r)


def _fsum_mean(stack: np.ndarray) -> np.ndarray:
    """Mean over axis 0 with compensated summation in index order."""
    flat = stack.reshape(stack.shape[0], -1)
    out = np.array([math.fsum(flat[:, j]) for j in range(flat.shape[1])]) / stack.shape[0]
    return out.reshape(stack.shape[1:])


def steady_window(horizon: int) -> slice:
    return slice(horizon - max(1, int(math.ceil(STEADY_FRACTION * horizon))), horizon)


@dataclass
class MetricsReport:
    config: ExperimentConfig
    variants: list
    mse_t: dict
    mse_node: dict
    tx_rate: dict
    theta: dict  # name -> dict of four traces
    run_mse: dict  # name -> (R,) steady-state mse per run
    run_tx: dict   # name -> (R,) mean tx rate per run
    diagnostics: dict
    local_tolerances: dict = field(default_factory=dict)

    def rmse_t(self, name: str) -> np.ndarray:
        return np.sqrt(self.mse_t[name])


def run_experiment(config: ExperimentConfig, workers: int = 1, setup: Optional[Setup] = None) -> MetricsReport:
    setup = setup or build_setup(config)
    tasks = [(setup, r) for r in range(config.num_runs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]
    names = [v.name for v in setup.variants]
    win = steady_window(config.horizon)
    mse_t, mse_node, tx, theta, run_mse, run_tx, diag = {}, {}, {}, {}, {}, {}, {}
    for name in names:
        err = np.stack([res.sq_err[name] for res in results])          # (R, T, N)
        net_err = err.mean(axis=2)                                       # (R, T)
        mse_t[name] = _fsum_mean(net_err)
        mse_node[name] = _fsum_mean(err.mean(axis=1))
        tx_stack = np.stack([res.tx[name] for res in results])
        tx[name] = _fsum_mean(tx_stack)
        th = _fsum_mean(np.stack([res.theta[name] for res in results]))
        theta[name] = dict(zip(("theta_c", "theta_bar_c", "theta_s", "theta_bar_s"), th))
        run_mse[name] = np.array([math.fsum(row[win]) / len(row[win]) for row in net_err])
        run_tx[name] = np.array([math.fsum(row) / len(row) for row in tx_stack])
        diag[name] = _merge_diagnostics([res.diagnostics[name] for res in results])
    local = {}
    for v in setup.variants:
        if v.local_tolerances:
            local[v.name] = {int(k): float(b) for k, b in sorted(v.local_tolerances.items())}
    return MetricsReport(config, names, mse_t, mse_node, tx, theta, run_mse, run_tx, diag, local)


def _merge_diagnostics(items: list) -> dict:
    items = [d for d in items if d]
    if not items:
        return {}
    out = {}
    for key in items[0]:
        vals = [d[key] for d in items]
        if key.endswith("violations"):
            out[key] = int(sum(vals))
        elif key.startswith("min"):
            out[key] = float(min(vals))
        else:
            out[key] = float(max(vals))
    return out


def compare_variants(report: MetricsReport) -> list[dict]:
    """Steady-state mean mse (last 20% of the horizon) and mean tx rate, best mse first."""
    win = steady_window(report.config.horizon)
    rows = []
    for name in report.variants:
        mse = report.mse_t[name][win]
        rows.append({"variant": name, "steady_mse": math.fsum(mse) / len(mse),
                     "steady_rmse": math.sqrt(math.fsum(mse) / len(mse)),
                     "mean_tx_rate": math.fsum(report.tx_rate[name]) / len(report.tx_rate[name])})
    return sorted(rows, key=lambda row: (row["steady_mse"], row["variant"]))


def _write_csv(path: Path, index_name: str, columns: dict) -> None:
    length = len(next(iter(columns.values())))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([index_name] + list(columns))
        for k in range(length):
            w.writerow([k] + [repr(float(col[k])) for col in columns.values()])


def write_report(report: MetricsReport, outdir) -> list[Path]:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "mse_t.csv", out / "mse_node.csv", out / "tx_rate.csv", out / "theta.csv"]
    _write_csv(files[0], "t", report.mse_t)
    _write_csv(files[1], "node", report.mse_node)
    _write_csv(files[2], "t", report.tx_rate)
    _write_csv(files[3], "t", {f"{name}:{key}": trace for name in report.variants
                               for key, trace in report.theta[name].items()})
    summary = {
        "config": report.config.to_dict(),
        "comparison": compare_variants(report),
        "per_run": {name: {"steady_mse": report.run_mse[name].tolist(),
                           "mean_tx_rate": report.run_tx[name].tolist()} for name in report.variants},
        "diagnostics": report.diagnostics,
        "local_tolerances": {k: {str(i): b for i, b in v.items()} for k, v in report.local_tolerances.items()},
    }
    path = out / "summary.json"
    path.write_text(json.dumps(summary, indent=1, sort_keys=True))
    return files + [path]
