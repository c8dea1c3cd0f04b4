"""Monte Carlo comparison of RDKF, RDKFLOC, DKF1 and DKF2 on the tracking model.

    python3 scripts/tracking_study.py                  # desk scale: 20 nodes, 5 sensors, 50 runs
    python3 scripts/tracking_study.py --full --workers 8   # 100 nodes, 20 sensors, 500 runs

Writes the four CSV files and summary.json to --out and prints the
steady-state comparison table.
"""
import argparse
import time

from rdkf.cli import preset_tracking
from rdkf.harness import ExperimentConfig, compare_variants, run_experiment, write_report


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--full", action="store_true", help="full-size study instead of desk scale")
    parser.add_argument("--runs", type=int)
    parser.add_argument("--horizon", type=int)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--out", default="out/tracking")
    args = parser.parse_args()

    cfg = preset_tracking() if args.full else ExperimentConfig()
    cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "seed": args.seed,
                                      **({"num_runs": args.runs} if args.runs else {}),
                                      **({"horizon": args.horizon} if args.horizon else {})})
    start = time.perf_counter()
    report = run_experiment(cfg, workers=args.workers)
    write_report(report, args.out)
    print(f"{cfg.num_nodes} nodes, {cfg.num_sensors} sensors, {cfg.num_runs} runs of {cfg.horizon} steps "
          f"in {time.perf_counter() - start:.1f}s")
    print(f"{'variant':10s} {'steady mse':>12s} {'steady rmse':>12s} {'tx rate':>8s}")
    for row in compare_variants(report):
        print(f"{row['variant']:10s} {row['steady_mse']:12.4f} {row['steady_rmse']:12.4f} {row['mean_tx_rate']:8.3f}")
    for name, diag in report.diagnostics.items():
        print(f"{name}: invariant violations omega={diag['omega_violations']} fused={diag['fused_violations']} "
              f"kl={diag['kl_violations']}, max silent KL {diag['max_kl_silent']:.3f}")


if __name__ == "__main__":
    main()
