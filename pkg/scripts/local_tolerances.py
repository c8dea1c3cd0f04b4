"""Stationary local tolerances b^i of the sensor nodes against the global b.

    python3 scripts/local_tolerances.py [--full] [--tolerance 0.05]
"""
import argparse

from rdkf.cli import preset_tracking
from rdkf.harness import ExperimentConfig, build_setup
from rdkf.least_favorable import full_tolerance, local_tolerances, robust_steady_state, state_tolerance


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--full", action="store_true")
    parser.add_argument("--tolerance", type=float, default=0.05)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()
    base = preset_tracking() if args.full else ExperimentConfig()
    cfg = ExperimentConfig.from_dict({**base.to_dict(), "seed": args.seed, "horizon": 1, "num_runs": 1,
                                      "actual_tolerance": args.tolerance})
    setup = build_setup(cfg)
    model, net = setup.ctx.model, setup.ctx.network
    steady = robust_steady_state(model, args.tolerance)
    print(f"b={args.tolerance}  theta_inf={steady.theta:.6f}  iterations={steady.iterations}")
    print(f"full-output divergence {full_tolerance(steady):.12f}, state-only divergence {state_tolerance(steady):.6f}")
    for k, b in local_tolerances(steady, model).items():
        print(f"sensor node {net.sensors[k]:3d}: b^i = {b:.6f}  ratio {b / args.tolerance:.3f}")


if __name__ == "__main__":
    main()
