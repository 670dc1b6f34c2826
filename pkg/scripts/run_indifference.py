"""Indifference capital: closed form against bisection, and the finite-vs-graphon gap."""
import argparse

import numpy as np

from graphon_invest.fixed_point_finite import solve_equilibrium_det
from graphon_invest.graphon import Constant, complete_graph, sample_admissible_graph
from graphon_invest.graphon_game import LabelGrid, solve_graphon_equilibrium_det
from graphon_invest.indifference import (indifference_bisection, indifference_capital_finite,
                                         indifference_capital_graphon)
from graphon_invest.market import AgentCoeffs, TimeGrid


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--paths", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    tg = TimeGrid(1.0, 1)

    for sstar in (1.0, 0.0):
        c = AgentCoeffs(1, 1.0, sstar, 0.2, 0.5, 1.0)
        eq = solve_equilibrium_det(complete_graph(3), [c] * 3, tg)
        closed = indifference_capital_finite(eq, c)
        b = indifference_bisection(0, eq, c, mc_paths=args.paths, seed=args.seed)
        print(f"complete n=3, sigma*={sstar}: closed {closed.p[0]:.6f} (Y_base {closed.y_base_0[0]:.4f}), "
              f"bisection {b.p[0]:.6f} +- {b.diagnostics['stderr']:.4f}")

    c = AgentCoeffs(1, 1.0, 1.0, 0.2, 0.5, 1.0)
    print("finite-vs-graphon gap, G = 0.5:")
    for n in (8, 16, 32, 64, 128):
        grid = LabelGrid(n)
        gr = solve_graphon_equilibrium_det(Constant(0.5), grid, tg, c)
        pg = indifference_capital_graphon(gr, Constant(0.5), grid, c).p
        gaps = []
        for r in range(10):
            _, L, _ = sample_admissible_graph(Constant(0.5), n, 1.0, seed=1000 * n + r)
            pf = indifference_capital_finite(solve_equilibrium_det(L, [c] * n, tg), c, L).p
            gaps.append(np.mean(np.abs(pf - pg)))
        print(f"  n={n:4d}  mean |p_fin - p_graphon| = {np.mean(gaps):.4e}")


if __name__ == "__main__":
    main()
