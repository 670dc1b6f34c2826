"""Dense and sparse propagation-of-chaos sweeps for G = 0.5.

    python scripts/run_chaos.py --reps 20 --out results/chaos
"""
import argparse
import json
import time
from pathlib import Path

from graphon_invest.chaos_lab import BetaConstant, BetaPower, ChaosConfig, adjacent_inversions, run_experiment
from graphon_invest.graphon import Constant
from graphon_invest.market import NormalXi


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--ns", type=int, nargs="+", default=[8, 16, 32, 64, 128])
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", type=Path, default=Path("results/chaos"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    regimes = {"dense": BetaConstant(1.0), "sparse": BetaPower(0.25)}
    for name, rule in regimes.items():
        cfg = ChaosConfig(Constant(0.5), args.ns, rule, reps=args.reps, seed=args.seed,
                          xi_law=NormalXi(1.0, 0.5))
        t0 = time.perf_counter()
        rep = run_experiment(cfg, threads=args.threads)
        elapsed = time.perf_counter() - t0
        (args.out / f"{name}.json").write_text(rep.to_json())
        (args.out / f"{name}.csv").write_text(rep.to_csv())
        print(f"== {name} ({elapsed:.1f}s)")
        print(rep.summary())
        print(f"inversions {adjacent_inversions(rep.means['strategy_error'])}, "
              f"bound C {rep.bound_C:.3e}, dominated {rep.bound_dominated}, "
              f"rejection rates {[round(r, 3) for r in rep.rejection_rate]}")
        print("xi_error " + json.dumps([round(x, 6) for x in rep.xi_errors]))


if __name__ == "__main__":
    main()
