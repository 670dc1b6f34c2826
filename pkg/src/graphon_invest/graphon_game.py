"""Graphon equilibrium on a midpoint label grid, its value, and the two Picard schemes."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .bsde import BsdeProblem, baseline_driver, brownian_forward, solve_bsde_lsmc
from .errors import ConvergenceError, ParameterError
from .fixed_point_finite import _profile_map, running_cost, time_slice
from .graphon import Graphon, grid_matrix
from .market import AgentCoeffs, TimeGrid, project


@dataclass(frozen=True)
class LabelGrid:
    """Midpoint labels ``u_m = (m - 1/2)/M`` with weights ``1/M``."""

    M: int

    def __post_init__(self):
        if self.M < 1:
            raise ParameterError("M must be >= 1")

    @property
    def labels(self) -> np.ndarray:
        return (np.arange(1, self.M + 1) - 0.5) / self.M

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.M, 1.0 / self.M)

    def index_of(self, u) -> np.ndarray:
        """Nearest label; a tie (u on a cell boundary) goes to the cell ``((m-1)/M, m/M]``."""
        u = np.asarray(u, float)
        return np.clip(np.ceil(u * self.M - 1e-12).astype(int), 1, self.M) - 1


def label_coeffs(coeffs, grid: LabelGrid) -> list:
    """Accept one AgentCoeffs (homogeneous), a list of M, or a function of the label."""
    if isinstance(coeffs, AgentCoeffs):
        return [coeffs] * grid.M
    if callable(coeffs):
        return [coeffs(float(u)) for u in grid.labels]
    coeffs = list(coeffs)
    if len(coeffs) != grid.M:
        raise ParameterError(f"{len(coeffs)} coefficient records for {grid.M} labels")
    return coeffs


def quadrature_weights(G: Graphon, grid: LabelGrid, rows=None) -> np.ndarray:
    """``G(u, u_l) / M`` for the label rows ``u`` (default: the labels themselves)."""
    rows = grid.labels if rows is None else rows
    return grid_matrix(G, rows, grid.labels) * grid.weights[None, :]


@dataclass
class GraphonEquilibrium:
    labels: np.ndarray
    grid: TimeGrid
    pi: np.ndarray              # (M, K, d)
    z_star: np.ndarray          # (M, K)
    y0: np.ndarray = None
    value0: np.ndarray = None
    benchmark: np.ndarray = None
    residual: float = 0.0
    iterations: list = field(default_factory=list)

    @property
    def M(self):
        return len(self.labels)

    def to_dict(self) -> dict:
        opt = lambda a: None if a is None else a.tolist()
        return {"labels": self.labels.tolist(), "grid": self.grid.to_dict(), "pi": self.pi.tolist(),
                "z_star": self.z_star.tolist(), "y0": opt(self.y0), "value0": opt(self.value0),
                "benchmark": opt(self.benchmark), "residual": self.residual,
                "iterations": list(self.iterations)}

    @classmethod
    def from_dict(cls, data: dict) -> "GraphonEquilibrium":
        opt = lambda key: None if data.get(key) is None else np.array(data[key], float)
        return cls(np.array(data["labels"], float), TimeGrid(**data["grid"]),
                   np.array(data["pi"], float), np.array(data["z_star"], float),
                   opt("y0"), opt("value0"), opt("benchmark"), float(data["residual"]),
                   list(data.get("iterations", [])))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_csv(self, path):
        knots = self.grid.knots
        d = self.pi.shape[2]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "t"] + [f"pi_{c}" for c in range(d)] + ["z_star"])
            for m, u in enumerate(self.labels):
                for k in range(self.grid.steps):
                    w.writerow([repr(float(u)), repr(float(knots[k]))]
                               + [repr(float(v)) for v in self.pi[m, k]] + [repr(float(self.z_star[m, k]))])


def solve_graphon_equilibrium_det(G: Graphon, grid: LabelGrid, tgrid: TimeGrid, coeffs,
                                  tol: float = 1e-10, max_iter: int = 10_000,
                                  init=None) -> GraphonEquilibrium:
    """Picard iteration on the label profile with ``Z^u = 0`` and
    ``Z*^u = sum_l G(u, u_l) pi^l . sigma*^l / M`` on every time interval."""
    cl = label_coeffs(coeffs, grid)
    for c in cl:
        c.check_grid(tgrid)
    Wg = quadrature_weights(G, grid)
    M, d, K = grid.M, cl[0].d, tgrid.steps
    pi = np.zeros((M, K, d))
    zs = np.zeros((M, K))
    iters, worst = [], 0.0
    for k in range(K):
        sl = time_slice(cl, k)
        p = np.zeros((M, d)) if init is None else np.array(init, float).reshape(M, d)
        damp, prev = 1.0, np.inf
        for it in range(1, max_iter + 1):
            new, _ = _profile_map(sl, Wg, p)
            res = float(np.max(np.abs(new - p), initial=0.0))
            if res > prev and damp == 1.0:
                damp = 0.5
            p = p + damp * (new - p)
            prev = res
            if res <= tol:
                break
        else:
            raise ConvergenceError(f"label profile iteration stalled on interval {k}",
                                   residual=res, iterations=max_iter)
        pi[:, k], zs[:, k] = _profile_map(sl, Wg, p)
        iters.append(it)
        worst = max(worst, res)
    eq = GraphonEquilibrium(grid.labels, tgrid, pi, zs, residual=worst, iterations=iters)
    eq.y0, eq.value0, eq.benchmark = graphon_value(eq, G, grid, tgrid, cl)
    return eq


def graphon_value(eq: GraphonEquilibrium, G: Graphon, grid: LabelGrid, tgrid: TimeGrid, coeffs):
    """``Y^u_0``, ``V^{u,G}_0`` and the benchmark ``int E[xi^v] G(u, v) dv`` per label."""
    cl = label_coeffs(coeffs, grid)
    Wg = quadrature_weights(G, grid)
    y0 = np.zeros(grid.M)
    for k in range(tgrid.steps):
        sl = time_slice(cl, k)
        y0 += tgrid.dt * running_cost(sl, Wg, eq.pi[:, k], eq.z_star[:, k], idiosyncratic=False)
    xi = np.array([c.xi_mean for c in cl])
    eta = np.array([c.eta for c in cl])
    bench = Wg @ xi
    return y0, -np.exp(-(xi - bench - y0) / eta), bench


# ------------------------------------------------------------ Picard schemes


@dataclass
class PicardBsdeResult:
    y0: np.ndarray
    gaps: list
    ratios: list
    diverged: bool
    mean_field: np.ndarray


def picard_graphon_bsde(G: Graphon, grid: LabelGrid, tgrid: TimeGrid, coeffs, kappa: float = 0.0,
                        paths: int = 10_000, basis_degree: int = 3, picard_iters: int = 6,
                        seed: int = 0, lsmc_picard: int = 3) -> PicardBsdeResult:
    """Outer iteration on the mean-field drift ``sum_l G(u, u_l) E[pi^l . sigma^l theta^l] / M``.

    No common noise (sigma* = 0).  Label u has ``theta^u_t = theta_bar^u + kappa W^u_t``
    and strategy ``pi^u = sigma^{-1} P(Z^u + eta theta^u)``.  The drift is
    frozen from the previous iterate's controls (zero controls on the first
    pass), every label solves its own regression BSDE on common random
    numbers, and the gap is the sup over labels of successive ``Y_0`` changes.
    """
    cl = label_coeffs(coeffs, grid)
    if any(np.any(c.sigma_star) for c in cl):
        raise ParameterError("picard_graphon_bsde covers sigma* = 0 only")
    Wg = quadrature_weights(G, grid)
    M, K, dt = grid.M, tgrid.steps, tgrid.dt
    fw = brownian_forward(tgrid, paths, seed, dim=cl[0].d)
    thetas = [np.stack([c.at(k)[2] for k in range(K)]) for c in cl]       # (K, d) each

    def theta_fn_for(m):
        th = thetas[m]
        return lambda k, x: th[k] + kappa * np.asarray(x)

    def drift_means(Z):
        """E[pi^l . sigma^l theta^l] per label and interval under controls ``Z``."""
        out = np.empty((M, K))
        for m, c in enumerate(cl):
            for k in range(K):
                s, _, _ = c.at(k)
                theta = thetas[m][k] + kappa * fw.x[:, k, :]
                a = Z[m][:, k, :] + c.eta * theta
                pi = project(c.A, s, a) / s
                out[m, k] = float(np.mean(np.sum(pi * s * theta, axis=1)))
        return out

    Z = [np.zeros((paths, K, cl[0].d)) for _ in range(M)]
    prev, gaps, ratios, growth = None, [], [], 0
    mf = None
    for it in range(picard_iters):
        mf = Wg @ drift_means(Z)                    # (M, K)
        y0 = np.empty(M)
        for m, c in enumerate(cl):
            drv = baseline_driver(c, tgrid, theta_fn=theta_fn_for(m), mean_field=mf[m])
            prob = BsdeProblem(tgrid, drv, 0.0, c.d, lipschitz_scale=float(np.abs(thetas[m]).max()) + 1.0)
            res = solve_bsde_lsmc(prob, fw, basis_degree=basis_degree, picard_iters=lsmc_picard)
            y0[m] = res.y0
            Z[m] = res.Z
        if prev is not None:
            gaps.append(float(np.max(np.abs(y0 - prev))))
            if len(gaps) > 1:
                ratios.append(gaps[-1] / gaps[-2] if gaps[-2] > 0 else 0.0)
                growth = growth + 1 if gaps[-1] > gaps[-2] else 0
                if growth >= 3:
                    return PicardBsdeResult(y0, gaps, ratios, True, mf)
            if gaps[-1] == 0.0:
                break
        prev = y0
    return PicardBsdeResult(y0, gaps, ratios, False, mf)


@dataclass
class SmallTimeResult:
    pi: np.ndarray
    factors: list
    iterations: int
    converged: bool
    horizon_too_large: bool


def picard_graphon_fbsde_small_time(G: Graphon, grid: LabelGrid, tgrid: TimeGrid, coeffs,
                                    iters: int = 200, tol: float = 1e-12) -> SmallTimeResult:
    """Fixed-point map on the forward profile in the deterministic reduction.

    The frozen forward input is each label's common-noise loading
    ``x^u_t = int_0^t sigma*^u . pi^u dW*``; its graphon average sets the
    terminal benchmark exposure ``Z*``, the backward step returns the controls
    and the forward equation is advanced with them.  Contraction factors are
    ratios of successive ``E|x_T^{new} - x_T^{old}|^2`` square roots averaged
    over labels.
    """
    cl = label_coeffs(coeffs, grid)
    Wg = quadrature_weights(G, grid)
    M, K, dt, d = grid.M, tgrid.steps, tgrid.dt, cl[0].d
    slices = [time_slice(cl, k) for k in range(K)]
    pi = np.zeros((M, K, d))
    factors, prev_dist = [], None
    converged = False
    it = 0
    for it in range(1, iters + 1):
        new = np.stack([_profile_map(slices[k], Wg, pi[:, k])[0] for k in range(K)], axis=1)
        load = np.stack([np.sum(slices[k].sigma_star * (new[:, k] - pi[:, k]), axis=1)
                         for k in range(K)], axis=1)          # (M, K)
        dist = float(np.sqrt(np.mean(np.sum(load ** 2, axis=1) * dt)))
        step = float(np.max(np.abs(new - pi), initial=0.0))
        pi = new
        if prev_dist is not None and prev_dist > 0:
            factors.append(dist / prev_dist)
        prev_dist = dist
        if step <= tol:
            converged = True
            break
    too_large = bool(factors) and max(factors) >= 1.0
    # the last application only confirms the fixed point
    return SmallTimeResult(pi, factors, it - 1 if converged else it, converged, too_large)
