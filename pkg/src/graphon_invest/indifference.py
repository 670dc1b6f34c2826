"""Competition-indifference capital: closed forms and a Monte Carlo bisection check."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bsde import baseline_y0
from .errors import ConsistencyError, DomainError, ParameterError
from .fixed_point_finite import FiniteEquilibrium, _game_noise, _profile_map, time_slice
from .graphon import Graphon
from .graphon_game import GraphonEquilibrium, LabelGrid, label_coeffs
from .market import AgentCoeffs, TimeGrid

CONSISTENCY_TOL = 1e-8


@dataclass
class IndifferenceResult:
    p: np.ndarray
    y_base_0: np.ndarray
    method: str                     # "closed_form" or "bisection"
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"p": np.atleast_1d(self.p).tolist(),
                "y_base_0": np.atleast_1d(self.y_base_0).tolist(),
                "method": self.method, "diagnostics": self.diagnostics}

    @classmethod
    def from_dict(cls, data: dict) -> "IndifferenceResult":
        return cls(np.array(data["p"], float), np.array(data["y_base_0"], float),
                   data["method"], dict(data.get("diagnostics", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_csv(self, path, key: str = "agent"):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([key, "p", "y_base_0"])
            for i, (p, y) in enumerate(zip(np.atleast_1d(self.p), np.atleast_1d(self.y_base_0))):
                w.writerow([i, repr(float(p)), repr(float(y))])


def _baselines(coeffs: list, grid: TimeGrid) -> np.ndarray:
    # identical records share one ODE solve
    cache = {}
    out = np.empty(len(coeffs))
    for i, c in enumerate(coeffs):
        key = c.to_json()
        if key not in cache:
            cache[key] = baseline_y0(c, grid)
        out[i] = cache[key]
    return out


def _check(log_form: np.ndarray, closed: np.ndarray, what: str):
    gap = np.abs(log_form - closed)
    bad = gap > CONSISTENCY_TOL * np.maximum(1.0, np.abs(closed))
    if np.any(bad):
        raise ConsistencyError(f"{what}: log-ratio and closed form differ by {gap.max():.3e}")
    return float(gap.max(initial=0.0))


def indifference_capital_finite(eq: FiniteEquilibrium, coeffs, weights=None, grid: TimeGrid = None,
                                y_base: Optional[np.ndarray] = None) -> IndifferenceResult:
    """``p^i = eta_i (log(-V^comp) - log(-V^base))`` and its reduction ``xi_bar + gamma_0 - Y^base_0``.

    ``V^base = -exp(-(xi - Y^base_0)/eta)`` is the isolated optimum.  Both
    forms are computed; disagreement beyond 1e-8 is an internal error.
    """
    coeffs = [coeffs] * eq.n if isinstance(coeffs, AgentCoeffs) else list(coeffs)
    grid = eq.grid if grid is None else grid
    if weights is not None and not np.allclose(weights, eq.weights):
        raise ParameterError("weights differ from the ones the equilibrium was solved with")
    yb = _baselines(coeffs, grid) if y_base is None else np.broadcast_to(np.asarray(y_base, float), (eq.n,))
    eta = np.array([c.eta for c in coeffs])
    xi = np.array([c.xi_mean for c in coeffs])
    closed = eq.xi_bar + eq.gamma0 - yb
    # log(-V_base) = -(xi - Y)/eta taken in log space to avoid overflow
    log_form = eta * (np.log(-eq.value0) + (xi - yb) / eta)
    gap = _check(log_form, closed, "finite indifference capital")
    return IndifferenceResult(closed, np.array(yb), "closed_form", {"form_gap": gap})


def indifference_capital_graphon(eq: GraphonEquilibrium, G: Graphon, grid: LabelGrid, coeffs,
                                 y_base: Optional[np.ndarray] = None) -> IndifferenceResult:
    """Per-label ``p^u = int E[xi^v] G(u, v) dv + Y^u_0 - Y^base_0``."""
    cl = label_coeffs(coeffs, grid)
    if eq.value0 is None:
        raise ParameterError("graphon equilibrium has no value; solve it first")
    yb = _baselines(cl, eq.grid) if y_base is None else np.broadcast_to(np.asarray(y_base, float), (grid.M,))
    eta = np.array([c.eta for c in cl])
    xi = np.array([c.xi_mean for c in cl])
    closed = eq.benchmark + eq.y0 - yb
    log_form = eta * (np.log(-eq.value0) + (xi - yb) / eta)
    gap = _check(log_form, closed, "graphon indifference capital")
    return IndifferenceResult(closed, np.array(yb), "closed_form", {"form_gap": gap})


def baseline_strategy(c: AgentCoeffs, grid: TimeGrid) -> np.ndarray:
    """Isolated optimum ``varsigma^{-1} P(sigma_tilde eta theta)`` per interval, shape (K, d)."""
    out = np.empty((grid.steps, c.d))
    for k in range(grid.steps):
        sl = time_slice([c], k)
        out[k] = _profile_map(sl, np.zeros((1, 1)), np.zeros((1, c.d)))[0][0]
    return out


def indifference_bisection(i: int, eq: FiniteEquilibrium, coeffs, weights=None,
                           grid: TimeGrid = None, mc_paths: int = 100_000, seed: int = 0,
                           tol: float = 1e-6, bracket=(-10.0, 10.0),
                           max_iter: int = 200) -> IndifferenceResult:
    """Root of ``p -> E[U(xi - p + X^base_T)] - E[U(xi + X^comp_T - benchmark)]`` by bisection.

    Both expectations use the same own-noise paths; the competition side
    plays the equilibrium, the isolated side the baseline optimum.  The search
    stops at ``tol`` or once the bracket is well inside one Monte Carlo
    standard error (delta method on the log ratio of the two means).
    """
    coeffs = [coeffs] * eq.n if isinstance(coeffs, AgentCoeffs) else list(coeffs)
    grid = eq.grid if grid is None else grid
    if weights is not None and not np.allclose(weights, eq.weights):
        raise ParameterError("weights differ from the ones the equilibrium was solved with")
    c = coeffs[i]
    Rk, bench = _game_noise(eq, coeffs, grid, i, mc_paths, seed)
    x_comp = c.xi_mean + np.sum(Rk * eq.pi[i][None], axis=(1, 2))
    x_base = c.xi_mean + np.sum(Rk * baseline_strategy(c, grid)[None], axis=(1, 2))
    # shift exponents by a common constant so means stay in floating range
    e_comp = -(x_comp - bench) / c.eta
    e_base = -x_base / c.eta
    shift = max(e_comp.max(), e_base.max())
    u_comp = np.exp(e_comp - shift)
    u_base = np.exp(e_base - shift)
    m_comp, m_base = u_comp.mean(), u_base.mean()

    def gap(p):
        # E[U(base, p)] - E[U(comp)], both scaled by exp(-shift); decreasing in p
        return -np.exp(p / c.eta) * m_base + m_comp

    lo, hi = map(float, bracket)
    if not (gap(lo) > 0 > gap(hi)):
        raise DomainError(f"indifference root not bracketed in [{lo}, {hi}]")
    infl = u_comp / m_comp - u_base / m_base
    stderr = float(c.eta * infl.std(ddof=1) / np.sqrt(mc_paths))
    floor = min(tol, 0.01 * stderr) if stderr > 0 else tol
    it = 0
    while hi - lo > max(tol, floor) and it < max_iter:
        mid = 0.5 * (lo + hi)
        if gap(mid) > 0:
            lo = mid
        else:
            hi = mid
        it += 1
    p = 0.5 * (lo + hi)
    yb = baseline_y0(c, grid)
    return IndifferenceResult(np.array([p]), np.array([yb]), "bisection",
                              {"agent": int(i), "stderr": stderr, "iterations": it,
                               "paths": int(mc_paths), "seed": int(seed),
                               "closed_form": float(eq.xi_bar[i] + eq.gamma0[i] - yb)})
