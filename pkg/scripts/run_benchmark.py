"""Train policies on the synthetic training suite and compare them against the
fixed, random and oracle schedulers on the held-out suite at matched AKI.

    python scripts/run_benchmark.py --seeds 0 1 2 3 4 --out bench
"""

import argparse
import csv
import sys
import time
from pathlib import Path

from keysched.benchmark import TEST_SUITE, TRAIN_SUITE, benchmark_config, compare_at_matched_aki, make_suite
from keysched.evaluation import cki_histogram
from keysched.policy import save_checkpoint
from keysched.trainer import TrainConfig, train

COLUMNS = ("seed", "tau", "policy_aki", "fixed_interval", "fixed_aki", "policy_quality", "fixed_quality",
           "random_quality", "oracle_quality", "gap_closed", "policy_affinity", "random_affinity",
           "policy_cki_var", "random_cki_var")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--eta", type=float, default=TrainConfig.eta)
    ap.add_argument("--episodes", type=int, default=TrainConfig.total_episodes)
    ap.add_argument("--target-aki", type=float, default=25.0)
    ap.add_argument("--out", default="bench")
    args = ap.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_suite = make_suite(20, TRAIN_SUITE, benchmark_config())
    test_suite = make_suite(20, TEST_SUITE, benchmark_config())
    rows = []
    for seed in args.seeds:
        t0 = time.perf_counter()
        params, opt, log = train(train_suite, TrainConfig(eta=args.eta, seed=seed, total_episodes=args.episodes))
        save_checkpoint(out / f"policy_seed{seed}.kpol", params, opt)
        log.write_csv(out / f"train_log_seed{seed}.csv")
        c = compare_at_matched_aki(params, test_suite, args.target_aki)
        row = (seed, c.tau, c.policy.aki, c.fixed_interval, c.fixed.aki, c.policy.mean_quality,
               c.fixed.mean_quality, c.random.mean_quality, c.oracle_quality, c.gap_closed, c.policy_affinity,
               c.random_affinity, cki_histogram(c.policy_rollouts).variance,
               cki_histogram(c.random_rollouts).variance)
        rows.append(row)
        print(f"seed {seed} ({time.perf_counter() - t0:.0f} s): aki {c.policy.aki:.1f}, quality "
              f"{c.policy.mean_quality:.4f} vs fixed {c.fixed.mean_quality:.4f} vs oracle {c.oracle_quality:.4f}, "
              f"gap closed {c.gap_closed:.2f}", flush=True)
    with open(out / "benchmark.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        w.writerows([[repr(v) if isinstance(v, float) else v for v in r] for r in rows])
    return 0


if __name__ == "__main__":
    sys.exit(main())
