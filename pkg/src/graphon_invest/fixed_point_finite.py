"""n-agent equilibrium: H_alpha, phi, psi, the deterministic fixed point, values and a Nash oracle."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import CapabilityError, ConvergenceError, ParameterError
from .graphon import InteractionGraph, normalized_weights
from .market import (AgentCoeffs, FullSpace, TimeGrid, brownian_increments, common_increments,
                     project, residual)

log = logging.getLogger(__name__)


@dataclass
class Slice:
    """Every agent's coefficients and transforms on one time interval."""

    sigma: np.ndarray          # (n, d) diagonal entries
    sigma_star: np.ndarray     # (n, d)
    theta: np.ndarray          # (n, d)
    eta: np.ndarray            # (n,)
    varsigma: np.ndarray       # (n, d, d)
    varsigma_inv: np.ndarray
    sigma_tilde: np.ndarray    # (n, d, d)
    sst: np.ndarray            # (n, d) sigma-star-tilde
    sets: list
    transforms: list

    @property
    def n(self):
        return self.sigma.shape[0]

    @property
    def unconstrained(self):
        return all(isinstance(A, FullSpace) for A in self.sets)

    def project(self, W):
        """Project ``W[..., j, :]`` onto ``varsigma_j A_j`` for every agent j."""
        if self.unconstrained:
            return np.array(W, dtype=float)
        out = np.empty_like(W, dtype=float)
        for j, A in enumerate(self.sets):
            out[..., j, :] = project(A, self.varsigma[j], W[..., j, :])
        return out


def time_slice(coeffs, k: int) -> Slice:
    rows = [c.at(k) for c in coeffs]
    trs = [c.transforms(k) for c in coeffs]
    return Slice(
        sigma=np.array([r[0] for r in rows]), sigma_star=np.array([r[1] for r in rows]),
        theta=np.array([r[2] for r in rows]), eta=np.array([c.eta for c in coeffs]),
        varsigma=np.array([t.varsigma for t in trs]),
        varsigma_inv=np.array([t.varsigma_inv for t in trs]),
        sigma_tilde=np.array([t.sigma_tilde for t in trs]),
        sst=np.array([t.sigma_star_tilde for t in trs]),
        sets=[c.A for c in coeffs], transforms=trs)


def _weights(graph) -> np.ndarray:
    if isinstance(graph, InteractionGraph):
        return normalized_weights(graph)
    W = np.asarray(graph, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ParameterError("weights must be a square matrix")
    if np.any(np.diag(W)) or np.any(W < 0) or np.any(W.sum(axis=1) > 1.0 + 1e-12):
        raise ParameterError("weights need zero diagonal, nonnegative entries and row sums <= 1")
    return W


# ------------------------------------------------------------ H_alpha, phi, psi


def h_alpha_solve(alpha, sigma_star_tilde, n: int, y, A, scale, tol: float = 1e-13,
                  max_iter: int = 10_000, method: str = "picard"):
    """Solve ``x + sst . P(alpha + sst x) / (n-1) = y``.

    ``method="picard"`` iterates ``M^y(x) = y - sst . P(alpha + sst x)/(n-1)``,
    a contraction with modulus ``c = |sst|^2 / (n-1)``.  ``method="secant"``
    divides the same residual by a secant slope clipped to ``[1, 1 + c]``
    (the range of H'), which keeps the contraction and is exact on each
    linear piece of H.  ``y`` may be a 1-d batch with ``alpha`` one row per
    entry.
    """
    if n < 2:
        raise ParameterError("need n >= 2")
    sst = np.asarray(sigma_star_tilde, float)
    c = float(sst @ sst) / (n - 1)
    if sst @ sst >= 1.0:
        raise ParameterError("|sigma~*| must be < 1")
    y = np.asarray(y, float)
    alpha = np.asarray(alpha, float)
    def H(x, al):
        return x + project(A, scale, al + np.multiply.outer(x, sst)) @ sst / (n - 1)

    if y.ndim == 0:
        return float(h_alpha_solve(alpha[None], sst, n, y[None], A, scale, tol, max_iter, method)[0])
    alpha = np.broadcast_to(alpha, y.shape + sst.shape)
    x = y.copy()
    F = H(x, alpha) - y
    slope = np.ones_like(y)
    live = np.flatnonzero(np.abs(F) > tol)
    for it in range(1, max_iter + 1):
        if live.size == 0:
            log.debug("h_alpha_solve converged in %d iterations", it - 1)
            return x
        x_prev, F_prev = x[live], F[live]
        x[live] = x_prev - F_prev / slope[live]
        F[live] = H(x[live], alpha[live]) - y[live]
        if method == "secant":
            dx = x[live] - x_prev
            safe = np.abs(dx) > 0
            sl = np.ones_like(dx)
            sl[safe] = (F[live][safe] - F_prev[safe]) / dx[safe]
            slope[live] = np.clip(sl, 1.0, 1.0 + c)
        live = live[np.abs(F[live]) > tol]
    raise ConvergenceError("H_alpha inversion did not converge",
                           residual=float(np.max(np.abs(F))), iterations=max_iter)


def _alpha(sl: Slice, Z_diag):
    """``alpha_j = sigma~_j (Z^{jj} + eta_j theta_j)``; ``Z_diag`` is ``(..., n, d)``."""
    a = np.asarray(Z_diag, float) + sl.eta[:, None] * sl.theta
    return (sl.sigma_tilde * a[..., None, :]).sum(axis=-1)


def _g(sl: Slice, alpha, zeta):
    """``g_j = sst_j . P_j(alpha_j + sst_j zeta_j)`` for a batch ``(..., n)``."""
    W = alpha + zeta[..., None] * sl.sst
    return (sl.project(W) * sl.sst).sum(axis=-1)


def phi_map(zeta_star, Z_diag, coeffs, weights, k: int = 0):
    """``phi_i = zeta*_i - sum_j lambda_ij sst_j . P_j(alpha_j + sst_j zeta*_j)``."""
    sl = coeffs if isinstance(coeffs, Slice) else time_slice(coeffs, k)
    zeta = np.asarray(zeta_star, float)
    g = _g(sl, _alpha(sl, Z_diag), zeta)
    return zeta - g @ np.asarray(weights).T


def psi_map(Z_star, Z_diag, coeffs, weights, k: int = 0, tol: float = 1e-12,
            max_iter: int = 10_000):
    """Inverse of ``phi`` in its first argument.

    Iterates ``zeta_j <- H_{alpha_j}^{-1}(Z*_j + (Lambda v)_j + v_j/(n-1))`` with
    ``v = g(zeta)``; a fixed point has ``v_j = g_j(zeta_j)`` and hence
    ``phi(zeta) = Z*``.
    """
    sl = coeffs if isinstance(coeffs, Slice) else time_slice(coeffs, k)
    n = sl.n
    if n < 3:
        raise CapabilityError("psi needs n >= 3")
    L = np.asarray(weights, float)
    Zs = np.asarray(Z_star, float)
    alpha = _alpha(sl, Z_diag)
    alpha = np.broadcast_to(alpha, Zs.shape + (sl.sigma.shape[1],))
    zeta = Zs.copy()
    for it in range(1, max_iter + 1):
        v = _g(sl, alpha, zeta)
        target = Zs + v @ L.T + v / (n - 1)
        new = np.empty_like(zeta)
        for j in range(n):
            new[..., j] = h_alpha_solve(alpha[..., j, :], sl.sst[j], n, target[..., j],
                                        sl.sets[j], sl.varsigma[j], tol=tol * 1e-2,
                                        method="secant")
        step = np.max(np.abs(new - zeta), initial=0.0)
        zeta = new
        if step <= tol:
            res = np.max(np.abs(phi_map(zeta, Z_diag, sl, L) - Zs), initial=0.0)
            if res <= max(tol, 1e-11):
                return zeta
    raise ConvergenceError("psi iteration did not converge", residual=step, iterations=max_iter)


# ------------------------------------------------------------ equilibrium


@dataclass
class FiniteEquilibrium:
    n: int
    d: int
    grid: TimeGrid
    pi: np.ndarray              # (n, K, d)
    zeta_star: np.ndarray       # (n, K)
    weights: np.ndarray         # (n, n)
    gamma0: np.ndarray = None
    value0: np.ndarray = None
    xi_bar: np.ndarray = None
    residual: float = 0.0
    iterations: list = field(default_factory=list)
    residual_history: list = field(default_factory=list)

    def zeta_offdiag(self, k: int, sigma) -> np.ndarray:
        """``zeta^{ij} = lambda_ij sigma_j pi_j`` on interval k, shape ``(n, n, d)``."""
        return self.weights[:, :, None] * (np.asarray(sigma) * self.pi[:, k, :])[None, :, :]

    def to_dict(self) -> dict:
        return {"n": self.n, "d": self.d, "grid": self.grid.to_dict(),
                "pi": self.pi.tolist(), "zeta_star": self.zeta_star.tolist(),
                "weights": self.weights.tolist(),
                "gamma0": None if self.gamma0 is None else self.gamma0.tolist(),
                "value0": None if self.value0 is None else self.value0.tolist(),
                "xi_bar": None if self.xi_bar is None else self.xi_bar.tolist(),
                "residual": self.residual, "iterations": list(self.iterations)}

    @classmethod
    def from_dict(cls, data: dict) -> "FiniteEquilibrium":
        opt = lambda key: None if data.get(key) is None else np.array(data[key], float)
        return cls(int(data["n"]), int(data["d"]), TimeGrid(**data["grid"]),
                   np.array(data["pi"], float), np.array(data["zeta_star"], float),
                   np.array(data["weights"], float), opt("gamma0"), opt("value0"), opt("xi_bar"),
                   float(data["residual"]), list(data.get("iterations", [])))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_csv(self, path):
        knots = self.grid.knots
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["agent", "t"] + [f"pi_{c}" for c in range(self.d)])
            for i in range(self.n):
                for k in range(self.grid.steps):
                    w.writerow([i + 1, repr(float(knots[k]))] + [repr(float(v)) for v in self.pi[i, k]])


def _profile_map(sl: Slice, L, pi):
    zeta_star = L @ np.einsum("jd,jd->j", sl.sigma_star, pi)
    W = np.einsum("jkl,jl->jk", sl.sigma_tilde, sl.eta[:, None] * sl.theta) + zeta_star[:, None] * sl.sst
    return np.einsum("jkl,jl->jk", sl.varsigma_inv, sl.project(W)), zeta_star


def solve_equilibrium_det(graph, coeffs, grid: TimeGrid, tol: float = 1e-10,
                          max_iter: int = 10_000, init=None) -> FiniteEquilibrium:
    """Picard iteration on the strategy profile, interval by interval.

    With deterministic coefficients and deterministic strategies the terminal
    condition of agent i involves only the other agents' Brownian motions
    (lambda_ii = 0), so its own integrand zeta^{ii} vanishes and each
    interval reduces to the algebraic fixed point solved here.
    """
    L = _weights(graph)
    coeffs = list(coeffs)
    n, d = len(coeffs), coeffs[0].d
    if L.shape != (n, n):
        raise ParameterError("weights do not match the number of agents")
    for c in coeffs:
        c.check_grid(grid)
    K = grid.steps
    pi = np.zeros((n, K, d))
    zs = np.zeros((n, K))
    iters, hist, worst = [], [], 0.0
    for k in range(K):
        sl = time_slice(coeffs, k)
        p = np.zeros((n, d)) if init is None else np.array(init, float).reshape(n, d)
        damp, prev, h = 1.0, np.inf, []
        for it in range(1, max_iter + 1):
            new, z = _profile_map(sl, L, p)
            res = float(np.max(np.abs(new - p), initial=0.0))
            h.append(res)
            if res > prev and damp == 1.0:
                damp = 0.5
            p = p + damp * (new - p)
            prev = res
            if res <= tol:
                break
        else:
            raise ConvergenceError(f"profile iteration stalled on interval {k}", residual=res,
                                   iterations=max_iter)
        new, z = _profile_map(sl, L, p)
        pi[:, k], zs[:, k] = new, z
        iters.append(it)
        hist.append(h)
        worst = max(worst, res)
    eq = FiniteEquilibrium(n, d, grid, pi, zs, L, residual=worst, iterations=iters,
                           residual_history=hist)
    eq.gamma0, eq.value0, eq.xi_bar = gamma0_and_value(eq, coeffs, L, grid)
    return eq


def running_cost(sl: Slice, L, pi, zeta_star, idiosyncratic: bool = True):
    """Per-agent integrand of gamma on one interval (deterministic reduction).

    ``sum_j lambda_ij pi_j . sigma_j theta_j - eta|theta|^2/2
    + (|zeta^{i.}|^2 + R_i) / (2 eta)``, where ``R_i`` is the exact minimum of
    ``|eta theta - sigma pi|^2 + (zeta* - sigma*.pi)^2`` over the constraint set.
    In the continuum limit the competitors' own noise averages out, which is
    what ``idiosyncratic=False`` drops.
    """
    n = sl.n
    bench = L @ np.einsum("jd,jd->j", pi, sl.sigma * sl.theta)
    idio = (L ** 2) @ np.sum((sl.sigma * pi) ** 2, axis=1) if idiosyncratic else 0.0
    R = np.array([residual(sl.transforms[i], sl.sigma[i], sl.sigma_star[i], sl.sets[i],
                           sl.eta[i] * sl.theta[i], zeta_star[i])[0] for i in range(n)])
    return bench - 0.5 * sl.eta * np.sum(sl.theta ** 2, axis=1) + (idio + R) / (2.0 * sl.eta)


def gamma0_and_value(eq: FiniteEquilibrium, coeffs, weights, grid: TimeGrid):
    """Closed-form ``gamma_0``, ``V_0`` and the benchmark ``xi_bar`` per agent."""
    L = np.asarray(weights, float)
    coeffs = list(coeffs)
    g = np.zeros(eq.n)
    for k in range(grid.steps):
        sl = time_slice(coeffs, k)
        g += grid.dt * running_cost(sl, L, eq.pi[:, k], eq.zeta_star[:, k])
    xi = np.array([c.xi_mean for c in coeffs])
    eta = np.array([c.eta for c in coeffs])
    xi_bar = L @ xi
    value = -np.exp(-(xi - xi_bar - g) / eta)
    return g, value, xi_bar


# ------------------------------------------------------------ Nash oracle


@dataclass
class BestResponse:
    strategy: np.ndarray
    utility: float
    stderr: float
    eq_utility: float
    gain: float
    gain_stderr: float
    inconclusive: bool
    ci: tuple


def _game_noise(eq, coeffs, grid, i, paths, seed):
    """Own return sums ``S`` (paths, d) and the benchmark ``sum_j lambda_ij X^j_T``."""
    K, dt = grid.steps, grid.dt
    dWs = common_increments(seed, paths, K, dt)
    def returns(j):
        dW = brownian_increments(seed, "dW", j, paths, K, coeffs[j].d, dt)
        out = np.empty((paths, K, coeffs[j].d))
        for k in range(K):
            s, ss, th = coeffs[j].at(k)
            out[:, k] = s * th * dt + s * dW[:, k] + ss * dWs[:, k, None]
        return out
    bench = np.zeros(paths)
    for j in np.flatnonzero(eq.weights[i]):
        R = returns(j)
        bench += eq.weights[i, j] * (coeffs[j].xi_mean + np.einsum("pkd,kd->p", R, eq.pi[j]))
    return returns(i), bench


def best_response_oracle(i: int, eq: FiniteEquilibrium, coeffs, weights, grid: TimeGrid,
                         mc_paths: int = 100_000, seed: int = 0, rounds: int = 6,
                         points: int = 21) -> BestResponse:
    """Monte Carlo best constant response of agent ``i`` to the others' equilibrium play.

    Every candidate is scored on the same paths.  Grid refinement per
    coordinate, then a Nelder-Mead polish; among candidates whose paired
    difference to the leader is within one standard error the smallest-norm
    one is kept.
    """
    coeffs = list(coeffs)
    c = coeffs[i]
    Rk, bench = _game_noise(eq, coeffs, grid, i, mc_paths, seed)
    S = Rk.sum(axis=1)
    eta, xi = c.eta, c.xi_mean
    eye = np.eye(c.d)

    def samples(pi_path):
        x = xi + np.einsum("pkd,kd->p", Rk, pi_path)
        return -np.exp(np.clip(-(x - bench) / eta, -700, 700))

    def const_samples(pi):
        return -np.exp(np.clip(-(xi + S @ pi - bench) / eta, -700, 700))

    feas = lambda p: project(c.A, eye, p)
    u_eq = samples(eq.pi[i])
    best = feas(eq.pi[i].mean(axis=0))
    u_best = const_samples(best)
    half = max(1.0, 2.0 * float(np.max(np.abs(best))))
    spread = np.inf
    for _ in range(rounds):
        for coord in range(c.d):
            cand = np.repeat(best[None, :], points, axis=0)
            cand[:, coord] = best[coord] + np.linspace(-half, half, points)
            cand = np.unique(feas(cand), axis=0)
            U = np.array([const_samples(p) for p in cand])
            means = U.mean(axis=1)
            lead = int(np.argmax(means))
            diff = U[lead] - U
            se = diff.std(axis=1, ddof=1) / np.sqrt(mc_paths)
            tied = np.flatnonzero(means[lead] - means <= se)
            pick = tied[np.argmin(np.linalg.norm(cand[tied], axis=1))]
            best, u_best = cand[pick], U[pick]
            spread = means.max() - np.sort(means)[-2] if len(means) > 1 else 0.0
        half /= 4.0
    res = minimize(lambda p: -const_samples(feas(p)).mean(), best, method="Nelder-Mead",
                   options={"xatol": 1e-8, "fatol": 1e-14, "maxiter": 400})
    polished = feas(res.x)
    u_pol = const_samples(polished)
    if u_pol.mean() > u_best.mean():
        best, u_best = polished, u_pol
    d = u_best - u_eq
    gain = float(d.mean())
    gain_se = float(d.std(ddof=1) / np.sqrt(mc_paths))
    se = float(u_best.std(ddof=1) / np.sqrt(mc_paths))
    inconclusive = bool(spread < se)
    return BestResponse(best, float(u_best.mean()), se, float(u_eq.mean()), gain, gain_se,
                        inconclusive, (gain - 3 * gain_se, gain + 3 * gain_se))


def simulate_game_utility(eq: FiniteEquilibrium, coeffs, grid: TimeGrid, i: int,
                          paths: int, seed: int = 0):
    """Sample utilities of agent ``i`` when every agent plays ``eq``."""
    coeffs = list(coeffs)
    Rk, bench = _game_noise(eq, coeffs, grid, i, paths, seed)
    x = coeffs[i].xi_mean + np.einsum("pkd,kd->p", Rk, eq.pi[i])
    return -np.exp(np.clip(-(x - bench) / coeffs[i].eta, -700, 700))
