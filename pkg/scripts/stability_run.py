"""Long least favorable run of RDKF: network-average MSE over time and the Omega floor.

    python3 scripts/stability_run.py [--horizon 2500] [--seed 7]
"""
import argparse

import numpy as np

from rdkf.distributed import FilterVariant, TriggerParams, run_network_filter
from rdkf.harness import ExperimentConfig, build_setup
from rdkf.least_favorable import sample_trajectory


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--horizon", type=int, default=2500)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--tolerance", type=float, default=0.05)
    parser.add_argument("--segments", type=int, default=10)
    args = parser.parse_args()
    cfg = ExperimentConfig(horizon=args.horizon, num_runs=1, seed=args.seed, actual_tolerance=args.tolerance)
    setup = build_setup(cfg)
    traj = sample_trajectory(setup.ctx.model, args.tolerance, args.horizon,
                             np.random.default_rng([args.seed, 1, 0]), setup.schedule)
    run = run_network_filter(setup.ctx, FilterVariant.rdkf(args.tolerance, TriggerParams()), traj.measurements,
                             checks=True)
    mse = np.mean(np.sum((run.x_filt - traj.states[:-1, None, :]) ** 2, axis=-1), axis=1)
    floor = np.array([d.min_eig_filt for d in run.diagnostics])
    print(f"{'steps':>13s} {'mean mse':>10s} {'max mse':>10s} {'min eig':>11s}")
    for idx in np.array_split(np.arange(args.horizon), args.segments):
        print(f"{idx[0]:6d}-{idx[-1]:6d} {mse[idx].mean():10.4f} {mse[idx].max():10.4f} {floor[idx].min():11.4e}")
    print(f"upper bound on eigenvalues {setup.ctx.omega_bar:.2f}, "
          f"observed max {max(d.max_eig_filt for d in run.diagnostics):.2f}")


if __name__ == "__main__":
    main()
