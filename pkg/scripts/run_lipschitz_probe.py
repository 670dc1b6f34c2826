"""Empirical Lipschitz ratio of psi against (n-1)/(n-2) and against 1/(1 - r max|sst|^2)."""
import argparse

import numpy as np

from graphon_invest.fixed_point_finite import psi_map, time_slice
from graphon_invest.graphon import complete_graph, normalized_weights
from graphon_invest.market import AgentCoeffs, FullSpace


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--draws", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'n':>3} {'sst':>6} {'ratio':>8} {'(n-1)/(n-2)':>12} {'sharp':>8}")
    for n in (3, 5, 10, 20):
        L = normalized_weights(complete_graph(n))
        for sstar in (0.5, 1.0, 2.0):
            cs = [AgentCoeffs(1, 1.0, sstar, 0.2, 0.5)] * n
            sl = time_slice(cs, 0)
            sharp = 1 / (1 - L.sum(1).max() * float((sl.sst ** 2).max()))
            worst = 0.0
            for _ in range(args.draws):
                X = rng.normal(size=(50, n))
                Y = X + 0.1 * rng.normal(size=(50, n))
                r = np.abs(psi_map(X, np.zeros((n, 1)), cs, L) - psi_map(Y, np.zeros((n, 1)), cs, L)).max(1)
                worst = max(worst, float((r / np.abs(X - Y).max(1)).max()))
            print(f"{n:3d} {float(sl.sst.max()):6.3f} {worst:8.4f} {(n - 1) / (n - 2):12.4f} {sharp:8.4f}")


if __name__ == "__main__":
    main()
