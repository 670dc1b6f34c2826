"""Graphons, step graphons, cut norms and Bernoulli interaction graphs."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import ConstraintViolation, DomainError, InfeasibleError, ParameterError
from .rng import derive_seed, stream

EXACT_CUT_LIMIT = 24
_CHUNK_BITS = 15


@dataclass(frozen=True)
class Constant:
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ParameterError(f"constant graphon value {self.p} outside [0, 1]")

    def kernel(self, u, v):
        return np.full(np.broadcast(u, v).shape, float(self.p))


@dataclass(frozen=True)
class Product:
    def kernel(self, u, v):
        return u * v


@dataclass(frozen=True)
class Min:
    def kernel(self, u, v):
        return np.minimum(u, v)


@dataclass(frozen=True)
class AffineMean:
    """``a * (u + v) / 2 + b``."""

    a: float
    b: float

    def __post_init__(self):
        # affine in t = (u+v)/2, so checking both ends of [0, 1] suffices
        lo, hi = sorted((self.b, self.a + self.b))
        if lo < 0.0 or hi > 1.0:
            raise ParameterError(f"AffineMean(a={self.a}, b={self.b}) leaves [0, 1]")

    def kernel(self, u, v):
        return self.a * (u + v) / 2.0 + self.b


@dataclass
class StepGraphon:
    """Piecewise-constant kernel on the uniform ``N x N`` block grid.

    Blocks are right-closed, ``((i-1)/N, i/N]``, with label 0 assigned to the
    first block.
    """

    weights: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] < 1:
            raise ParameterError(f"step graphon weights must be square, got shape {w.shape}")
        if not np.array_equal(w, w.T):
            raise ParameterError("step graphon weights must be symmetric")
        if w.min() < 0.0 or w.max() > 1.0:
            raise ParameterError("step graphon weights must lie in [0, 1]")
        self.weights = w

    @property
    def n_blocks(self) -> int:
        return self.weights.shape[0]

    def block_index(self, u):
        n = self.n_blocks
        return np.maximum(np.ceil(np.asarray(u, dtype=float) * n).astype(int), 1) - 1

    def kernel(self, u, v):
        return self.weights[self.block_index(u), self.block_index(v)]

    def to_dict(self) -> dict:
        return {"n_blocks": self.n_blocks, "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "StepGraphon":
        step = cls(np.array(data["weights"], dtype=float))
        if step.n_blocks != int(data["n_blocks"]):
            raise ParameterError("n_blocks does not match the weight matrix")
        return step

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StepGraphon":
        return cls.from_dict(json.loads(text))


Graphon = Union[Constant, Product, Min, AffineMean, StepGraphon]


def eval_graphon(G: Graphon, u, v):
    """Evaluate ``G(u, v)``; accepts scalars or broadcastable arrays."""
    u_arr = np.asarray(u, dtype=float)
    v_arr = np.asarray(v, dtype=float)
    for name, x in (("u", u_arr), ("v", v_arr)):
        if np.any(~np.isfinite(x)) or np.any(x < 0.0) or np.any(x > 1.0):
            raise DomainError(f"label {name} outside [0, 1]")
    out = G.kernel(u_arr, v_arr)
    if np.ndim(out) == 0:
        return float(out)
    return out


def grid_matrix(G: Graphon, rows, cols) -> np.ndarray:
    """``G`` evaluated on the outer grid ``rows x cols``."""
    r = np.asarray(rows, dtype=float)[:, None]
    c = np.asarray(cols, dtype=float)[None, :]
    return np.asarray(eval_graphon(G, r, c), dtype=float) * np.ones((r.shape[0], c.shape[1]))


def project_step(G: Graphon, n: int) -> StepGraphon:
    """n-block step graphon with ``W[i][j] = G(i/n, j/n)`` (upper grid corners)."""
    if n < 1:
        raise ParameterError("n must be a positive integer")
    pts = np.arange(1, n + 1) / n
    W = grid_matrix(G, pts, pts)
    # kernels are symmetric in exact arithmetic; remove rounding asymmetry
    W = 0.5 * (W + W.T)
    return StepGraphon(np.clip(W, 0.0, 1.0), meta={"projected_from": describe(G), "n": n,
                                                         "kappa": lipschitz_constant(G)})


def refine(step: StepGraphon, n_blocks: int) -> StepGraphon:
    """Same kernel on a finer grid; ``n_blocks`` must be a multiple of N."""
    N = step.n_blocks
    if n_blocks % N:
        raise ParameterError(f"cannot refine {N} blocks to {n_blocks}")
    k = n_blocks // N
    return StepGraphon(np.kron(step.weights, np.ones((k, k))), meta=dict(step.meta))


def lipschitz_constant(G: Graphon) -> float:
    """Piecewise Lipschitz constant in ``|u - u'| + |v - v'|``; recorded, never used."""
    if isinstance(G, (Product, Min)):
        return 1.0
    if isinstance(G, AffineMean):
        return abs(G.a) / 2.0
    return 0.0


def describe(G: Graphon) -> dict:
    if isinstance(G, Constant):
        return {"kind": "constant", "p": G.p}
    if isinstance(G, Product):
        return {"kind": "product"}
    if isinstance(G, Min):
        return {"kind": "min"}
    if isinstance(G, AffineMean):
        return {"kind": "affine_mean", "a": G.a, "b": G.b}
    return {"kind": "step", **G.to_dict()}


def graphon_from_dict(data: dict) -> Graphon:
    kind = data.get("kind")
    if kind == "constant":
        return Constant(float(data["p"]))
    if kind == "product":
        return Product()
    if kind == "min":
        return Min()
    if kind == "affine_mean":
        return AffineMean(float(data["a"]), float(data["b"]))
    if kind == "step":
        return StepGraphon.from_dict(data)
    raise ParameterError(f"unknown graphon kind {kind!r}")


# ---------------------------------------------------------------- cut norm


@dataclass(frozen=True)
class CutNormResult:
    value: float
    exact: bool
    rows: tuple
    cols: tuple

    def __float__(self):
        return self.value


def _common_grid(A: StepGraphon, B: StepGraphon):
    N = math.lcm(A.n_blocks, B.n_blocks)
    return refine(A, N).weights, refine(B, N).weights


def _best_response(r: np.ndarray):
    """For row sums ``r`` of x'M, the best 0/1 y for +x'My and for -x'My."""
    pos = np.where(r > 0, r, 0.0).sum(axis=-1)
    neg = -np.where(r < 0, r, 0.0).sum(axis=-1)
    return pos, neg


def _exact_cut(M: np.ndarray):
    N = M.shape[0]
    shifts = np.arange(N, dtype=np.int64)
    total = 1 << N
    chunk = 1 << min(N, _CHUNK_BITS)
    best, best_mask = -1.0, 0
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
        bits = ((idx[:, None] >> shifts) & 1).astype(float)
        pos, neg = _best_response(bits @ M)
        val = np.maximum(pos, neg)
        k = int(np.argmax(val))
        if val[k] > best:
            best, best_mask = float(val[k]), int(idx[k])
    x = np.array([(best_mask >> s) & 1 for s in range(N)], dtype=float)
    r = x @ M
    pos, neg = _best_response(r)
    y = (r > 0) if pos >= neg else (r < 0)
    return best, x.astype(bool), y


def _greedy_cut(M: np.ndarray, restarts: int = 64, seed: int = 0):
    """Alternating 0/1 best responses; a lower bound on the exact value."""
    N = M.shape[0]
    rng = stream(seed, "cut-heuristic", N)
    starts = [np.ones(N, bool)] + [np.eye(N, dtype=bool)[k] for k in range(N)]
    starts += [rng.random(N) < 0.5 for _ in range(restarts)]
    best = (-1.0, None, None)
    for sign in (1.0, -1.0):
        S = sign * M
        for x in starts:
            x = x.astype(float)
            prev = -np.inf
            for _ in range(200):
                y = (x @ S > 0).astype(float)
                x = (S @ y > 0).astype(float)
                val = float(x @ S @ y)
                if val <= prev + 1e-15:
                    break
                prev = val
            if prev > best[0]:
                best = (prev, x.astype(bool), y.astype(bool))
    return best


def cut_norm(A: StepGraphon, B: StepGraphon, heuristic: bool = False,
             exact_limit: int = EXACT_CUT_LIMIT) -> CutNormResult:
    """Cut distance ``sup_{E,E'} |int_{ExE'} (A - B)|`` between step graphons.

    For step kernels the supremum is a bilinear program over block-membership
    fractions and is attained at 0/1 vertices, so enumerating every row subset
    and answering greedily on the column side is exact.  Above ``exact_limit``
    blocks this refuses unless ``heuristic=True``, in which case an
    alternating-maximisation lower bound is returned with ``exact=False``.
    """
    WA, WB = _common_grid(A, B)
    N = WA.shape[0]
    M = (WA - WB) / (N * N)
    if not np.any(M):
        return CutNormResult(0.0, True, (), ())
    if N <= exact_limit:
        val, x, y = _exact_cut(M)
        exact = True
    elif heuristic:
        val, x, y = _greedy_cut(M)
        exact = False
    else:
        raise InfeasibleError(
            f"exact enumeration infeasible for {N} blocks (limit {exact_limit}); "
            "coarsen or pass heuristic=True")
    rows = tuple(int(i) + 1 for i in np.flatnonzero(x))
    cols = tuple(int(j) + 1 for j in np.flatnonzero(y))
    return CutNormResult(max(val, 0.0), exact, rows, cols)


def cut_norm_to_graphon(step: StepGraphon, G: Graphon, refinement: int = 8, **kw) -> CutNormResult:
    """Cut distance from ``step`` to ``G`` projected on ``refinement * N`` blocks."""
    fine = project_step(G, refinement * step.n_blocks)
    return cut_norm(step, fine, **kw)


# ------------------------------------------------------------ random graphs


@dataclass
class InteractionGraph:
    n: int
    beta_n: float
    adjacency: np.ndarray
    source_step: StepGraphon | None = None

    def __post_init__(self):
        A = np.asarray(self.adjacency).astype(bool)
        if A.shape != (self.n, self.n):
            raise ParameterError(f"adjacency shape {A.shape} does not match n={self.n}")
        if np.any(np.diag(A)) or not np.array_equal(A, A.T):
            raise ParameterError("adjacency must be symmetric with zero diagonal")
        if not 0.0 < self.beta_n <= 1.0:
            raise ParameterError(f"beta_n={self.beta_n} outside (0, 1]")
        self.adjacency = A

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def edges(self) -> list:
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return [[int(a) + 1, int(b) + 1] for a, b in zip(i, j)]

    def to_dict(self) -> dict:
        return {"n": self.n, "beta_n": self.beta_n, "edges": self.edges()}

    @classmethod
    def from_dict(cls, data: dict) -> "InteractionGraph":
        n = int(data["n"])
        A = np.zeros((n, n), dtype=bool)
        for i, j in data["edges"]:
            if not (1 <= i <= n and 1 <= j <= n) or i == j:
                raise ParameterError(f"bad edge {[i, j]} for n={n}")
            A[i - 1, j - 1] = A[j - 1, i - 1] = True
        return cls(n, float(data["beta_n"]), A)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "InteractionGraph":
        return cls.from_dict(json.loads(text))


def complete_graph(n: int, beta_n: float = 1.0) -> InteractionGraph:
    return InteractionGraph(n, beta_n, ~np.eye(n, dtype=bool))


def empty_graph(n: int, beta_n: float = 1.0) -> InteractionGraph:
    return InteractionGraph(n, beta_n, np.zeros((n, n), dtype=bool))


def edge_probabilities(Gn: Graphon, n: int, beta_n: float) -> np.ndarray:
    pts = np.arange(1, n + 1) / n
    P = beta_n * grid_matrix(Gn, pts, pts)
    np.fill_diagonal(P, 0.0)
    return P


def sample_interaction_graph(Gn: Graphon, n: int, beta_n: float, seed: int) -> InteractionGraph:
    """Bernoulli(beta_n * Gn(i/n, j/n)) edge for every unordered pair.

    Uniform for pair (i, j), i < j, is the j-th draw of the stream keyed on
    (seed, i), so the graph does not depend on generation order.
    """
    if n < 3:
        raise ParameterError("need at least 3 agents")
    if not 0.0 < beta_n <= 1.0:
        raise ParameterError(f"beta_n={beta_n} outside (0, 1]")
    P = edge_probabilities(Gn, n, beta_n)
    if P.max(initial=0.0) > 1.0 + 1e-12:
        raise ParameterError(f"beta_n * max G = {P.max():.6g} exceeds 1")
    U = np.stack([stream(seed, "edge", i).random(n) for i in range(n)])
    upper = np.triu(U < P, 1)
    source = Gn if isinstance(Gn, StepGraphon) else None
    return InteractionGraph(n, float(beta_n), upper | upper.T, source)


def normalized_weights(g: InteractionGraph, tol: float = 1e-12) -> np.ndarray:
    """``lambda^n_ij = a_ij / ((n - 1) beta_n)``; raises if a row sum exceeds 1."""
    W = g.adjacency.astype(float) / ((g.n - 1) * g.beta_n)
    sums = W.sum(axis=1)
    bad = np.flatnonzero(sums > 1.0 + tol)
    if bad.size:
        i = int(bad[0])
        raise ConstraintViolation(
            f"row {i + 1} of the interaction weights sums to {sums[i]:.6g} > 1", row=i + 1)
    return W


def sample_admissible_graph(Gn: Graphon, n: int, beta_n: float, seed: int, max_retries: int = 100):
    """Resample until the row-sum condition holds; returns (graph, weights, rejections)."""
    for attempt in range(max_retries + 1):
        g = sample_interaction_graph(Gn, n, beta_n, seed if attempt == 0 else derive_seed(seed, "resample", attempt))
        try:
            return g, normalized_weights(g), attempt
        except ConstraintViolation:
            continue
    raise ConstraintViolation(f"no admissible graph after {max_retries} resamples")

