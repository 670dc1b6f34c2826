"""Best-response check of the finite equilibrium for n = 5 on two graphs."""
import argparse

import numpy as np

from graphon_invest.fixed_point_finite import best_response_oracle, solve_equilibrium_det
from graphon_invest.graphon import Constant, complete_graph, sample_admissible_graph
from graphon_invest.market import AgentCoeffs, TimeGrid


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--paths", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    n, tg = 5, TimeGrid(1.0, 1)
    rng = np.random.default_rng(args.seed)
    standing = [AgentCoeffs(1, 1.0, 1.0, 0.2, 0.5, 1.0)] * n
    mixed = [AgentCoeffs(1, float(rng.uniform(0.7, 1.3)), float(rng.uniform(-0.8, 0.8)),
                         float(rng.uniform(-0.3, 0.3)), float(rng.uniform(0.3, 0.8)), 1.0) for _ in range(n)]
    _, bern, _ = sample_admissible_graph(Constant(0.5), n, 1.0, seed=args.seed)
    for name, graph, cs in (("complete", complete_graph(n), standing), ("bernoulli(0.5)", bern, mixed)):
        eq = solve_equilibrium_det(graph, cs, tg)
        print(f"{name}: pi = {np.round(eq.pi[:, 0, 0], 5).tolist()}")
        for i in range(n):
            br = best_response_oracle(i, eq, cs, eq.weights, tg, mc_paths=args.paths, seed=args.seed + 10 + i)
            flag = "ok" if br.gain <= 3 * br.gain_stderr else "GAIN"
            print(f"  agent {i}: best constant {br.strategy[0]: .5f}  gain {br.gain: .2e} "
                  f"+- {br.gain_stderr:.2e}  {flag}")


if __name__ == "__main__":
    main()
