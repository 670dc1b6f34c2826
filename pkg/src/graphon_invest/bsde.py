"""Scalar BSDE numerics: backward RK4 for deterministic reductions and regression Monte Carlo."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable, Optional

import numpy as np

from .errors import ConvergenceError, ParameterError, RefinementRequired
from .market import AgentCoeffs, TimeGrid, brownian_increments, residual

log = logging.getLogger(__name__)


@dataclass
class BsdeProblem:
    """``Y_t = xi + int_t^T f(s, Y_s, Z_s, Z*_s, X_s) ds - int_t^T Z dW - int_t^T Z* dW*``.

    ``driver(t, y, z, z_star, x)`` works on batches: ``y`` is ``(p,)``, ``z`` is
    ``(p, dim_z)``, ``z_star`` is ``(p,)`` and ``x`` the forward state or None.
    ``terminal`` is a number or a function of the terminal forward state.
    """

    grid: TimeGrid
    driver: Callable
    terminal: object = 0.0
    dim_z: int = 1
    common_noise: bool = False
    quad_growth: float = 0.0
    lipschitz_scale: float = 1.0


@dataclass
class OdeSolution:
    t: np.ndarray
    y: np.ndarray

    @property
    def y0(self) -> float:
        return float(self.y[0])


def _rk4(p: BsdeProblem, steps: int) -> OdeSolution:
    T = p.grid.T
    h = T / steps
    t = np.linspace(0.0, T, steps + 1)
    y = np.empty(steps + 1)
    y[-1] = float(p.terminal)
    z0 = np.zeros((1, p.dim_z))
    zs0 = np.zeros(1)

    def rhs(s, v):                   # dY/dt = -f, integrated from T down to 0
        return -float(np.asarray(p.driver(s, np.array([v]), z0, zs0, None)).ravel()[0])

    # endpoint stages are nudged into the open step so drivers that are
    # piecewise constant on the grid are read on the step being integrated
    eps = 1e-12 * T
    for k in range(steps, 0, -1):
        s, v = t[k], y[k]
        k1 = rhs(s - eps, v)
        k2 = rhs(s - h / 2, v - h / 2 * k1)
        k3 = rhs(s - h / 2, v - h / 2 * k2)
        k4 = rhs(s - h + eps, v - h * k3)
        y[k - 1] = v - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return OdeSolution(t, y)


def solve_bsde_ode(p: BsdeProblem, check: bool = True, tol: float = 1e-8) -> OdeSolution:
    """Backward RK4 for the Z = Z* = 0 reduction on the problem's grid.

    With ``check`` the solve is repeated at half the step and a difference in
    ``Y(0)`` above ``tol`` raises RefinementRequired.
    """
    if callable(p.terminal):
        raise ParameterError("the ODE reduction needs a deterministic terminal value")
    sol = _rk4(p, p.grid.steps)
    if check:
        fine = _rk4(p, 2 * p.grid.steps)
        gap = abs(fine.y0 - sol.y0)
        if gap > tol:
            raise RefinementRequired(f"halving the step moved Y(0) by {gap:.3g}; refine the grid")
    return sol


# ------------------------------------------------------------ regression MC


@dataclass
class ForwardPaths:
    """Forward state ``x`` of shape ``(paths, K+1, q)`` with its driving increments."""

    x: np.ndarray
    dW: np.ndarray
    dWstar: Optional[np.ndarray] = None

    @property
    def paths(self):
        return self.x.shape[0]


def brownian_forward(grid: TimeGrid, paths: int, seed: int, dim: int = 1, agent: int = 0,
                     common_noise: bool = False) -> ForwardPaths:
    """The Brownian motion itself as forward state."""
    dW = brownian_increments(seed, "dW", agent, paths, grid.steps, dim, grid.dt)
    x = np.concatenate([np.zeros((paths, 1, dim)), np.cumsum(dW, axis=1)], axis=1)
    dWs = None
    if common_noise:
        dWs = brownian_increments(seed, "dWstar", 0, paths, grid.steps, 1, grid.dt)[..., 0]
    return ForwardPaths(x, dW, dWs)


def poly_basis(x: np.ndarray, degree: int) -> np.ndarray:
    """Monomials of total degree <= ``degree`` in the columns of ``x``."""
    cols = [np.ones(x.shape[0])]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(x.shape[1]), deg):
            cols.append(np.prod(x[:, combo], axis=1))
    return np.column_stack(cols)


class Regressor:
    """Least-squares projection on a polynomial basis, degree reduced when ill-conditioned."""

    def __init__(self, x: np.ndarray, degree: int, cond_limit: float = 1e10):
        if np.ptp(x, axis=0).max(initial=0.0) == 0.0:
            degree = 0                      # deterministic state: conditional mean is the mean
        while True:
            B = poly_basis(x, degree)
            # standardise columns so the conditioning test is scale-free
            scale = np.maximum(np.abs(B).max(axis=0), 1e-300)
            Bs = B / scale
            if degree == 0 or np.linalg.cond(Bs) <= cond_limit:
                break
            warnings.warn(f"regression basis ill-conditioned at degree {degree}; reducing",
                          RuntimeWarning, stacklevel=3)
            degree -= 1
        self.degree = degree
        self.B = Bs
        self._pinv = np.linalg.pinv(Bs)

    def fit(self, y: np.ndarray):
        coef = self._pinv @ y
        return coef, self.B @ coef


@dataclass
class LsmcResult:
    y0: float
    y0_stderr: float
    Y: np.ndarray                # (paths, K+1)
    Z: np.ndarray                # (paths, K, dim_z)
    Zstar: Optional[np.ndarray]  # (paths, K)
    coefficients: list           # per step, dict of regression coefficient vectors
    diagnostics: list            # per step dicts: step, Y_mean, Z_mean, residual, residual_se, passed
    picard_gaps: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "Y_mean", "Z_mean", "residual"])
            for row in self.diagnostics:
                w.writerow([row["step"], repr(row["Y_mean"]), repr(row["Z_mean"]), repr(row["residual"])])


def solve_bsde_lsmc(p: BsdeProblem, forward: ForwardPaths, basis_degree: int = 3,
                    picard_iters: int = 5, z_bound: Optional[float] = None,
                    seed: int = 0) -> LsmcResult:
    """Regression Monte Carlo with an outer Picard loop on the driver's Z argument.

    On every backward step ``Z_k`` regresses ``(Y_{k+1} - E_k[Y_{k+1}]) dW_k / dt``
    on the basis and ``Y_k`` regresses ``Y_{k+1} + f(t_k, Y_{k+1}, Zf_k, Zf*_k) dt``,
    where ``Zf`` is the control from the previous sweep (zero on the first).
    Centering before the ``Z`` regression removes a variance term and makes
    ``Z`` vanish identically when ``Y`` is deterministic.  ``seed`` is unused
    by the solver (paths come from ``forward``) and is kept for provenance.
    """
    if basis_degree < 1:
        raise ParameterError("basis_degree must be >= 1")
    grid = p.grid
    K, dt = grid.steps, grid.dt
    if forward.x.shape[1] != K + 1 or forward.dW.shape[1] != K:
        raise ParameterError("forward paths are not on the problem's grid")
    P = forward.paths
    bound = 10.0 * p.lipschitz_scale if z_bound is None else z_bound
    knots = grid.knots
    regs = [Regressor(forward.x[:, k, :], basis_degree) for k in range(K + 1)]
    XT = forward.x[:, K, :]
    YT = p.terminal(XT) if callable(p.terminal) else np.full(P, float(p.terminal))
    cs = p.common_noise and forward.dWstar is not None
    Zf = np.zeros((P, K, p.dim_z))
    Zsf = np.zeros((P, K))
    gaps, growth = [], 0
    for it in range(max(1, picard_iters)):
        Y = np.empty((P, K + 1))
        Z = np.empty((P, K, p.dim_z))
        Zs = np.empty((P, K)) if cs else np.zeros((P, K))
        F = np.empty((P, K))
        Y[:, K] = YT
        coefs = [None] * K
        for k in range(K - 1, -1, -1):
            reg = regs[k]
            _, cond = reg.fit(Y[:, k + 1])
            centred = Y[:, k + 1] - cond
            cz, Zk = reg.fit(centred[:, None] * forward.dW[:, k, :] / dt)
            Z[:, k] = np.clip(Zk, -bound, bound)
            entry = {"z": cz}
            if cs:
                czs, Zsk = reg.fit(centred * forward.dWstar[:, k] / dt)
                Zs[:, k] = np.clip(Zsk, -bound, bound)
                entry["z_star"] = czs
            F[:, k] = p.driver(knots[k], Y[:, k + 1], Zf[:, k], Zsf[:, k], forward.x[:, k, :])
            cy, Y[:, k] = reg.fit(Y[:, k + 1] + F[:, k] * dt)
            entry["y"] = cy
            coefs[k] = entry
        gap = float(np.sqrt(np.mean((Z - Zf) ** 2) + np.mean((Zs - Zsf) ** 2)))
        if gaps and gap > gaps[-1]:
            growth += 1
            if growth >= 3:
                raise ConvergenceError("Picard iterates diverge (3 consecutive increases)",
                                       residual=gap, iterations=it + 1)
        else:
            growth = 0
        gaps.append(gap)
        Zf, Zsf = Z, Zs
        if gap == 0.0:
            break
    diag = []
    for k in range(K):
        noise = (Z[:, k] * forward.dW[:, k, :]).sum(axis=1)
        if cs:
            noise = noise + Zs[:, k] * forward.dWstar[:, k]
        e = Y[:, k + 1] - Y[:, k] + F[:, k] * dt
        r = e - noise
        # e has zero sample mean by construction (the basis holds constants), so
        # its spread alone understates the error; count both sample means
        se_r = np.sqrt(e.var(ddof=1) + noise.var(ddof=1)) / np.sqrt(P)
        # deterministic drivers leave only rounding noise, which se_r cannot see
        floor = 64 * np.finfo(float).eps * max(1.0, float(np.abs(Y[:, k:k + 2]).max()))
        diag.append({"step": k, "Y_mean": float(Y[:, k].mean()), "Z_mean": float(Z[:, k].mean()),
                     "residual": float(r.mean()), "residual_se": float(se_r),
                     "passed": bool(abs(r.mean()) <= 3 * se_r + floor)})
    y0 = float(Y[:, 0].mean())
    # every regression keeps the sample mean, so Y_0 is the mean of Y_T + sum f dt
    target = YT + F.sum(axis=1) * dt
    se = float(target.std(ddof=1) / np.sqrt(P))
    log.debug("lsmc: y0=%.6g after %d sweeps", y0, len(gaps))
    return LsmcResult(y0, se, Y, Z, Zs if cs else None, coefs, diag, gaps)


# ------------------------------------------------------------ baseline BSDE


def baseline_driver(coeffs: AgentCoeffs, grid: TimeGrid, theta_fn: Optional[Callable] = None,
                    mean_field: Optional[np.ndarray] = None) -> Callable:
    """Driver of the no-competition BSDE,
    ``f = R(z + eta theta, z*)/(2 eta) - z.theta - eta |theta|^2 / 2``,
    with ``R`` the exact constrained residual.

    ``theta_fn(k, x)`` overrides theta with a state-dependent value and
    ``mean_field[k]`` (shape ``(K,)`` or ``(K, p)``) is added on interval k.
    """
    eta = coeffs.eta
    K = grid.steps
    trs = [coeffs.transforms(k) for k in range(K)]

    def driver(t, y, z, z_star, x):
        k = min(int(np.floor(t / grid.dt)), K - 1)
        s, ss, th = coeffs.at(k)
        z = np.atleast_2d(z)
        theta = np.broadcast_to(th if theta_fn is None else theta_fn(k, x), z.shape)
        zs = np.broadcast_to(np.asarray(z_star, float), z.shape[:1])
        R, _ = residual(trs[k], s, ss, coeffs.A, z + eta * theta, zs)
        f = R / (2 * eta) - np.sum(z * theta, axis=1) - 0.5 * eta * np.sum(theta ** 2, axis=1)
        if mean_field is not None:
            f = f + mean_field[k]
        return f

    return driver


def baseline_problem(coeffs: AgentCoeffs, grid: TimeGrid) -> BsdeProblem:
    coeffs.check_grid(grid)
    scale = float(np.max(np.abs(coeffs.theta))) + 1.0
    return BsdeProblem(grid, baseline_driver(coeffs, grid), 0.0, coeffs.d,
                       common_noise=bool(np.any(coeffs.sigma_star)),
                       quad_growth=1.0 / (2 * coeffs.eta), lipschitz_scale=scale)


def baseline_y0(coeffs: AgentCoeffs, grid: TimeGrid) -> float:
    """``Y_0`` of the no-competition BSDE with deterministic coefficients.

    The driver is constant on each interval, so RK4 is exact and no
    step-halving check is needed.
    """
    return solve_bsde_ode(baseline_problem(coeffs, grid), check=False).y0
