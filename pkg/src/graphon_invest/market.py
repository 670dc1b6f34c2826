"""Market coefficients, the varsigma transforms, constraint projections, wealth and utility."""
from __future__ import annotations

import csv
import functools
import itertools
import json
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import CapabilityError, DomainError, ParameterError
from .rng import stream

PATH_CHUNK = 4096
EXP_CLAMP = 700.0


# ------------------------------------------------------------ convex sets


@dataclass(frozen=True)
class FullSpace:
    def contains(self, a, tol=1e-9):
        return np.ones(np.shape(a)[:-1], dtype=bool)

    def to_dict(self):
        return {"kind": "full"}


@dataclass(frozen=True)
class Box:
    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo, hi = np.atleast_1d(np.asarray(self.lower, float)), np.atleast_1d(np.asarray(self.upper, float))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ParameterError("Box needs lower <= upper componentwise")
        object.__setattr__(self, "lower", tuple(lo.tolist()))
        object.__setattr__(self, "upper", tuple(hi.tolist()))

    def contains(self, a, tol=1e-9):
        a = np.asarray(a, float)
        return np.all((a >= np.array(self.lower) - tol) & (a <= np.array(self.upper) + tol), axis=-1)

    def to_dict(self):
        return {"kind": "box", "lower": list(self.lower), "upper": list(self.upper)}


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ParameterError("Ball radius must be positive")
        object.__setattr__(self, "center", tuple(np.atleast_1d(np.asarray(self.center, float)).tolist()))

    def contains(self, a, tol=1e-9):
        a = np.asarray(a, float)
        return np.linalg.norm(a - np.array(self.center), axis=-1) <= self.radius + tol

    def to_dict(self):
        return {"kind": "ball", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class HalfSpace:
    """``{a : normal . a <= offset}``."""

    normal: tuple
    offset: float

    def __post_init__(self):
        nv = np.atleast_1d(np.asarray(self.normal, float))
        if not np.any(nv):
            raise ParameterError("HalfSpace normal must be nonzero")
        object.__setattr__(self, "normal", tuple(nv.tolist()))

    def contains(self, a, tol=1e-9):
        return np.asarray(a, float) @ np.array(self.normal) <= self.offset + tol

    def to_dict(self):
        return {"kind": "halfspace", "normal": list(self.normal), "offset": self.offset}


@dataclass(frozen=True)
class Orthant:
    """Nonnegative orthant (no short selling)."""

    def contains(self, a, tol=1e-9):
        return np.all(np.asarray(a, float) >= -tol, axis=-1)

    def to_dict(self):
        return {"kind": "orthant"}


ConvexSet = Union[FullSpace, Box, Ball, HalfSpace, Orthant]


def convex_set_from_dict(data: dict) -> ConvexSet:
    kind = data.get("kind")
    if kind == "full":
        return FullSpace()
    if kind == "box":
        return Box(tuple(data["lower"]), tuple(data["upper"]))
    if kind == "ball":
        return Ball(tuple(data["center"]), float(data["radius"]))
    if kind == "halfspace":
        return HalfSpace(tuple(data["normal"]), float(data["offset"]))
    if kind == "orthant":
        return Orthant()
    raise ParameterError(f"unknown constraint kind {kind!r}")


# ------------------------------------------------------------ projections


def _as_matrix(scale, d):
    s = np.asarray(scale, dtype=float)
    if s.ndim == 0:
        return np.eye(d) * float(s)
    if s.ndim == 1:
        return np.diag(s)
    return s


def _is_diag(S):
    return not np.any(S - np.diag(np.diag(S)))


@functools.lru_cache(maxsize=256)
def _box_patterns(S_bytes, d, lo, hi):
    S = np.frombuffer(S_bytes).reshape(d, d)
    lo, hi = np.array(lo), np.array(hi)
    states = [(0, 1, 2) if np.isfinite(hi[k]) else (0, 1) for k in range(d)]
    Ms, cs, frees = [], [], []
    for pattern in itertools.product(*states):
        pattern = np.array(pattern)
        free = pattern == 0
        M = np.zeros((d, d))
        c = np.where(pattern == 1, lo, 0.0) + np.where(pattern == 2, np.where(np.isfinite(hi), hi, 0.0), 0.0)
        if free.any():
            SF = S[:, free]
            K = np.linalg.solve(SF.T @ SF, SF.T)
            M[free] = K
            c[free] = -K @ (S[:, ~free] @ c[~free])
        Ms.append(M)
        cs.append(c)
        frees.append(free)
    return np.array(Ms), np.array(cs), np.array(frees)


def _box_qp(S, lo, hi, x):
    """argmin_{lo <= a <= hi} |x - S a|^2 for a batch ``x``; returns ``S a``.

    Enumerates active sets (free / at lower / at upper per coordinate).  Each
    gives an affine candidate; the feasible one with the smallest objective
    is optimal because the true minimiser is among them.
    """
    d = S.shape[0]
    out = np.empty_like(x)
    a0 = np.linalg.solve(S, x.T).T
    inside = np.all((a0 >= lo) & (a0 <= hi), axis=1)
    out[inside] = x[inside]
    xo = x[~inside]
    if xo.shape[0]:
        Ms, cs, _ = _box_patterns(np.ascontiguousarray(S).tobytes(), d, tuple(lo), tuple(hi))
        P, B = len(cs), xo.shape[0]
        a = (xo @ Ms.transpose(2, 0, 1).reshape(d, P * d)).reshape(B, P, d) + cs
        ok = np.all((a >= lo - 1e-12) & (a <= hi + 1e-12), axis=2)
        np.clip(a, lo, hi, out=a)
        y = (a.reshape(-1, d) @ S.T).reshape(B, P, d)
        r = y - xo[:, None, :]
        val = (r * r).sum(axis=2)
        val[~ok] = np.inf
        out[~inside] = y[np.arange(B), val.argmin(axis=1)]
    return out


def _ellipsoid(S, c, r, x, tol=1e-12, max_iter=100):
    """Projection onto ``{S a : |a - c| <= r}`` for SPD ``S``; Newton on the multiplier."""
    lam, Q = np.linalg.eigh(S)
    y = (x - c @ S.T) @ Q           # rotated residual, b(mu) = Q diag(l / (l^2 + mu)) y
    b0 = y / lam
    inside = np.sum(b0 ** 2, axis=1) <= r * r
    mu = np.zeros(x.shape[0])
    out = ~inside
    if out.any():
        yo = y[out]
        m = np.zeros(yo.shape[0])
        for _ in range(max_iter):
            den = lam ** 2 + m[:, None]
            nb2 = np.sum((lam * yo / den) ** 2, axis=1)
            dnb2 = -2.0 * np.sum(lam ** 2 * yo ** 2 / den ** 3, axis=1)
            nb = np.sqrt(nb2)
            # secular function 1/|b| - 1/r is close to linear in mu
            f = 1.0 / nb - 1.0 / r
            df = -0.5 * dnb2 / nb2 ** 1.5
            step = f / df
            m = np.maximum(m - step, 0.0)
            if np.all(np.abs(step) <= tol * (1.0 + m)):
                break
        mu[out] = m
    b = (lam * y / (lam ** 2 + mu[:, None])) @ Q.T
    return (c + b) @ S.T


def project(A: ConvexSet, scale, x):
    """Euclidean projection of ``x`` (shape ``(d,)`` or ``(batch, d)``) onto ``scale . A``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if not np.all(np.isfinite(X)):
        raise DomainError("projection input must be finite")
    d = X.shape[1]
    S = _as_matrix(scale, d)
    if isinstance(A, FullSpace):
        out = X.copy()
    elif isinstance(A, (Box, Orthant)):
        if isinstance(A, Box):
            lo, hi = np.array(A.lower) * np.ones(d), np.array(A.upper) * np.ones(d)
        else:
            lo, hi = np.zeros(d), np.full(d, np.inf)
        if _is_diag(S):
            s = np.diag(S)
            out = np.clip(X, s * lo, s * hi)
        elif d <= 8:
            out = _box_qp(S, lo, hi, X)
        else:
            raise CapabilityError(f"box projection under a full {d}x{d} scale is not supported")
    elif isinstance(A, Ball):
        c = np.array(A.center) * np.ones(d)
        if _is_diag(S) and np.allclose(np.diag(S), S[0, 0], rtol=0, atol=0):
            s = S[0, 0]
            v = X - s * c
            nv = np.linalg.norm(v, axis=1, keepdims=True)
            R = s * A.radius
            out = s * c + v * np.minimum(1.0, R / np.maximum(nv, 1e-300))
        else:
            out = _ellipsoid(S, c, A.radius, X)
    elif isinstance(A, HalfSpace):
        m = np.linalg.solve(S, np.array(A.normal) * np.ones(d))
        excess = np.maximum(X @ m - A.offset, 0.0)
        out = X - np.outer(excess / (m @ m), m)
    else:
        raise CapabilityError(f"no projection for {type(A).__name__}")
    return out[0] if single else out


def distance(A: ConvexSet, scale, x):
    return np.linalg.norm(np.asarray(x, float) - project(A, scale, x), axis=-1)


# ------------------------------------------------------------ transforms


@dataclass(frozen=True)
class SigmaTransforms:
    varsigma: np.ndarray
    sigma_tilde: np.ndarray
    sigma_star_tilde: np.ndarray

    @property
    def varsigma_inv(self):
        return np.linalg.inv(self.varsigma)


def varsigma(sigma, sigma_star) -> SigmaTransforms:
    """Symmetric square root of ``sigma^2 + sigma* sigma*'`` and the rescaled volatilities.

    ``sigma`` is the diagonal of the (diagonal) volatility matrix.
    """
    s = np.atleast_1d(np.asarray(sigma, float))
    ss = np.atleast_1d(np.asarray(sigma_star, float))
    if s.ndim == 2:
        s = np.diag(s)
    C = np.diag(s ** 2) + np.outer(ss, ss)
    E, Q = np.linalg.eigh(C)
    if not np.all(E > 1e-14 * max(1.0, E.max())):
        raise DomainError("sigma^2 + sigma* sigma*' is not positive definite")
    root = (Q * np.sqrt(E)) @ Q.T
    root = 0.5 * (root + root.T)
    if np.linalg.norm(root @ root - C) > 1e-10 * max(1.0, np.linalg.norm(C)):
        raise DomainError("square-root reconstruction residual too large")
    inv = (Q / np.sqrt(E)) @ Q.T
    return SigmaTransforms(root, inv * s[None, :], inv @ ss)


def residual(tr: SigmaTransforms, sigma, sigma_star, A: ConvexSet, a, b):
    """``min_{pi in A} |a - sigma pi|^2 + (b - sigma*.pi)^2`` and its minimiser.

    Completing the square in varsigma coordinates gives
    ``|a|^2 + b^2 - |w|^2 + dist(w, varsigma A)^2`` with ``w = sigma~ a + sigma~* b``.
    ``a`` has shape ``(..., d)`` and ``b`` shape ``(...)``.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    w = a @ tr.sigma_tilde.T + b[..., None] * tr.sigma_star_tilde
    pw = project(A, tr.varsigma, w)
    R = np.sum(a * a, axis=-1) + b * b - np.sum(w * w, axis=-1) + np.sum((w - pw) ** 2, axis=-1)
    pi = pw @ np.linalg.inv(tr.varsigma).T
    return np.maximum(R, 0.0), pi


# ------------------------------------------------------------ coefficients


@dataclass(frozen=True)
class TimeGrid:
    T: float
    steps: int

    def __post_init__(self):
        if not self.T > 0 or int(self.steps) < 1:
            raise ParameterError("TimeGrid needs T > 0 and steps >= 1")

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def knots(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.steps + 1)

    def to_dict(self):
        return {"T": self.T, "steps": self.steps}


@dataclass(frozen=True)
class NormalXi:
    mean: float
    sd: float

    def __post_init__(self):
        if self.sd < 0:
            raise ParameterError("NormalXi sd must be nonnegative")


def _pieces(v, d, name):
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        arr = np.full((1, d), float(arr))
    elif arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != d:
        raise ParameterError(f"{name} must have {d} columns, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} must be finite")
    return arr


@dataclass
class AgentCoeffs:
    """One agent's market data, piecewise constant on a shared time grid.

    ``sigma`` holds the diagonal of the volatility matrix.  Each of ``sigma``,
    ``sigma_star``, ``theta`` is either one row (constant in time) or one row
    per grid interval.
    """

    d: int
    sigma: np.ndarray
    sigma_star: np.ndarray
    theta: np.ndarray
    eta: float
    xi: Union[float, NormalXi] = 0.0
    A: ConvexSet = field(default_factory=FullSpace)

    def __post_init__(self):
        self.sigma = _pieces(self.sigma, self.d, "sigma")
        self.sigma_star = _pieces(self.sigma_star, self.d, "sigma_star")
        self.theta = _pieces(self.theta, self.d, "theta")
        if np.any(self.sigma <= 0):
            raise ParameterError("sigma diagonal must be strictly positive")
        if not 0.0 < self.eta < 1.0:
            raise ParameterError(f"eta={self.eta} outside (0, 1)")
        if isinstance(self.xi, dict):
            self.xi = NormalXi(float(self.xi["mean"]), float(self.xi["sd"]))

    @property
    def n_pieces(self) -> int:
        return max(len(self.sigma), len(self.sigma_star), len(self.theta))

    def check_grid(self, grid: TimeGrid):
        for name in ("sigma", "sigma_star", "theta"):
            k = len(getattr(self, name))
            if k not in (1, grid.steps):
                raise ParameterError(f"{name} has {k} pieces for a grid of {grid.steps} steps")

    def at(self, k: int):
        """(sigma diag, sigma*, theta) on interval ``k``."""
        pick = lambda arr: arr[k if len(arr) > 1 else 0]
        return pick(self.sigma), pick(self.sigma_star), pick(self.theta)

    def transforms(self, k: int) -> SigmaTransforms:
        s, ss, _ = self.at(k)
        return varsigma(s, ss)

    @property
    def xi_mean(self) -> float:
        return self.xi.mean if isinstance(self.xi, NormalXi) else float(self.xi)

    def to_dict(self) -> dict:
        xi = {"mean": self.xi.mean, "sd": self.xi.sd} if isinstance(self.xi, NormalXi) else self.xi
        return {"d": self.d, "sigma": self.sigma.tolist(), "sigma_star": self.sigma_star.tolist(),
                "theta": self.theta.tolist(), "eta": self.eta, "xi": xi, "A": self.A.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "AgentCoeffs":
        return cls(int(data["d"]), data["sigma"], data["sigma_star"], data["theta"],
                   float(data["eta"]), data.get("xi", 0.0),
                   convex_set_from_dict(data.get("A", {"kind": "full"})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AgentCoeffs":
        return cls.from_dict(json.loads(text))


# ------------------------------------------------------------ simulation


def brownian_increments(seed, tag, agent, paths, steps, dim, dt):
    """``(paths, steps, dim)`` Gaussian increments; chunked by path so any
    partition of the paths across workers draws the same numbers."""
    out = np.empty((paths, steps, dim))
    for c, start in enumerate(range(0, paths, PATH_CHUNK)):
        stop = min(start + PATH_CHUNK, paths)
        g = stream(seed, tag, agent, c)
        out[start:stop] = g.standard_normal((PATH_CHUNK, steps, dim))[: stop - start]
    return out * np.sqrt(dt)


def common_increments(seed, paths, steps, dt):
    return brownian_increments(seed, "dWstar", 0, paths, steps, 1, dt)[..., 0]


def _strategy_pieces(strategy, steps, d):
    s = np.asarray(strategy, float)
    if s.ndim == 0:
        s = np.full((steps, d), float(s))
    elif s.ndim == 1:
        s = np.broadcast_to(s, (steps, d))
    if s.shape != (steps, d):
        raise ParameterError(f"strategy must have shape ({steps}, {d})")
    return s


@dataclass
class WealthSample:
    terminal: np.ndarray
    paths: np.ndarray | None
    grid: TimeGrid

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "t", "value"])
            if self.paths is None:
                for p, v in enumerate(self.terminal):
                    w.writerow([p, repr(self.grid.T), repr(float(v))])
            else:
                knots = self.grid.knots
                for p, row in enumerate(self.paths):
                    for t, v in zip(knots, row):
                        w.writerow([p, repr(float(t)), repr(float(v))])


def simulate_wealth(coeffs: AgentCoeffs, strategy, grid: TimeGrid, paths: int,
                    with_common_noise: bool = True, seed: int = 0, agent: int = 0,
                    keep_paths: bool = False, xi0=None, dWstar=None) -> WealthSample:
    """Euler scheme for the self-financing wealth of one agent.

    Idiosyncratic increments are keyed on ``agent``; common-noise increments
    are keyed on the seed alone so agents simulated with the same seed share
    them.  ``dWstar`` may be passed explicitly to share a precomputed stream.
    """
    if paths < 1:
        raise ParameterError("paths must be >= 1")
    coeffs.check_grid(grid)
    K, d, dt = grid.steps, coeffs.d, grid.dt
    pi = _strategy_pieces(strategy, K, d)
    for k in range(K):
        tr = coeffs.transforms(k)
        y = tr.varsigma @ pi[k]
        if np.linalg.norm(project(coeffs.A, tr.varsigma, y) - y) > 1e-9:
            raise ParameterError(f"strategy leaves the constraint set on interval {k}")
    dW = brownian_increments(seed, "dW", agent, paths, K, d, dt)
    if with_common_noise:
        dWs = common_increments(seed, paths, K, dt) if dWstar is None else dWstar
    X = np.empty((paths, K + 1))
    if xi0 is not None:
        X[:, 0] = xi0
    elif isinstance(coeffs.xi, NormalXi):
        X[:, 0] = coeffs.xi.mean + coeffs.xi.sd * stream(seed, "xi", agent).standard_normal(paths)
    else:
        X[:, 0] = coeffs.xi
    for k in range(K):
        s, ss, th = coeffs.at(k)
        inc = pi[k] @ (s * th) * dt + dW[:, k, :] @ (pi[k] * s)
        if with_common_noise:
            inc = inc + (pi[k] @ ss) * dWs[:, k]
        X[:, k + 1] = X[:, k] + inc
    return WealthSample(X[:, -1].copy(), X if keep_paths else None, grid)


def utility(x_T, benchmark, eta, with_flag: bool = False):
    """``-exp(-(x_T - benchmark) / eta)`` with the exponent clamped at +-700."""
    if not 0.0 < eta < 1.0:
        raise ParameterError(f"eta={eta} outside (0, 1)")
    e = -(np.asarray(x_T, float) - np.asarray(benchmark, float)) / eta
    saturated = bool(np.any(np.abs(e) > EXP_CLAMP))
    val = -np.exp(np.clip(e, -EXP_CLAMP, EXP_CLAMP))
    if np.ndim(val) == 0:
        val = float(val)
    return (val, saturated) if with_flag else val
