import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize

from graphon_invest.errors import DomainError, ParameterError
from graphon_invest.market import (AgentCoeffs, Ball, Box, FullSpace, HalfSpace, NormalXi, Orthant,
                                   TimeGrid, convex_set_from_dict, distance, project, residual,
                                   simulate_wealth, utility, varsigma)


def test_varsigma_examples():
    tr = varsigma([1.0], [1.0])
    assert tr.varsigma[0, 0] == pytest.approx(np.sqrt(2), abs=1e-14)
    assert tr.sigma_tilde[0, 0] == pytest.approx(1 / np.sqrt(2), abs=1e-14)
    assert tr.sigma_star_tilde[0] == pytest.approx(1 / np.sqrt(2), abs=1e-14)
    tr = varsigma([1.0, 3.0], [0.0, 0.0])
    assert np.allclose(tr.varsigma, np.diag([1, 3])) and np.allclose(tr.sigma_tilde, np.eye(2))
    assert not tr.sigma_star_tilde.any()
    tr = varsigma([1.0, 2.0], [1.0, 0.0])
    assert np.allclose(tr.varsigma, np.diag([np.sqrt(2), 2.0]), atol=1e-14)


def test_varsigma_rejects_degenerate():
    with pytest.raises(DomainError):
        varsigma([0.0, 1.0], [0.0, 0.0])


def test_sigma_star_tilde_norm_below_one():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        d = int(rng.integers(1, 5))
        s, ss = rng.uniform(0.2, 2, d), rng.uniform(-2, 2, d)
        tr = varsigma(s, ss)
        assert np.linalg.norm(tr.sigma_star_tilde) < 1
        assert np.abs(tr.varsigma @ tr.varsigma - np.diag(s ** 2) - np.outer(ss, ss)).max() <= 1e-10


def test_projection_examples():
    assert np.array_equal(project(FullSpace(), np.diag([2.0, 0.5]), [3.0, -1.0]), [3.0, -1.0])
    assert project(Box((0,), (0.05,)), 1.0, [0.1]) == pytest.approx([0.05])
    assert np.allclose(project(Ball((0, 0), 1.0), np.eye(2), [3.0, 4.0]), [0.6, 0.8])


def _oracle(A, S, x):
    """Direct minimisation of |x - S a|^2 over a in A with scipy."""
    d = len(x)
    f = lambda a: np.sum((x - S @ a) ** 2)
    jac = lambda a: -2 * S.T @ (x - S @ a)
    if isinstance(A, Box):
        r = minimize(f, np.clip(np.zeros(d), A.lower, A.upper), jac=jac, method="L-BFGS-B",
                     bounds=list(zip(A.lower, A.upper)), options={"ftol": 1e-15, "gtol": 1e-12})
    else:
        cons = {"type": "ineq", "fun": lambda a: A.radius ** 2 - np.sum((a - np.array(A.center)) ** 2)}
        r = minimize(f, np.array(A.center), jac=jac, method="SLSQP", constraints=[cons],
                     options={"ftol": 1e-15, "maxiter": 500})
    return S @ r.x


@pytest.mark.parametrize("A", [Box((-0.3, 0.0, -1.0), (0.3, 0.2, 0.5)), Ball((0.1, -0.2, 0.0), 0.4)],
                         ids=["box", "ellipsoid"])
def test_projection_full_scale_matches_scipy(A):
    rng = np.random.default_rng(1)
    for _ in range(20):
        tr = varsigma(rng.uniform(0.5, 1.5, 3), rng.uniform(-1, 1, 3))
        x = rng.normal(size=3) * 2
        assert np.allclose(project(A, tr.varsigma, x), _oracle(A, tr.varsigma, x), atol=1e-6)


SETS = [FullSpace(), Box((-0.3, 0.0), (0.3, 0.2)), Ball((0.1, -0.2), 0.4), HalfSpace((1.0, -2.0), 0.3),
        Orthant()]


def _sample_in(A, S, rng, k):
    # points of S.A by projecting a cloud
    return project(A, S, rng.normal(size=(k, 2)) * 2)


@pytest.mark.parametrize("A", SETS, ids=lambda a: type(a).__name__)
@pytest.mark.parametrize("kind", ["scalar", "diag", "full"])
def test_projection_properties(A, kind):
    rng = np.random.default_rng(7)
    S = {"scalar": 1.7 * np.eye(2), "diag": np.diag([0.7, 1.9]),
         "full": varsigma([0.8, 1.2], [0.6, -0.9]).varsigma}[kind]
    x, y = rng.normal(size=(10_000, 2)) * 2, rng.normal(size=(10_000, 2)) * 2
    px, py = project(A, S, x), project(A, S, y)
    assert np.all(np.linalg.norm(px - py, axis=1) <= np.linalg.norm(x - y, axis=1) + 1e-10)
    assert np.allclose(project(A, S, px), px, atol=1e-10)
    a = np.linalg.solve(S, px.T).T
    assert np.all(A.contains(a, tol=1e-8))
    pts = _sample_in(A, S, rng, 200)
    vi = np.einsum("bd,bkd->bk", (x - px)[:500], pts[None] - px[:500, None])
    assert vi.max() <= 1e-10 * max(1.0, np.abs(vi).max())


def test_distance_and_residual():
    assert distance(Box((0,), (0.05,)), 1.0, [0.1]) == pytest.approx(0.05)
    tr = varsigma([1.0], [0.0])
    R, pi = residual(tr, [1.0], [0.0], Box((0,), (0.05,)), np.array([0.1]), np.array(0.0))
    assert R == pytest.approx(0.0025) and pi == pytest.approx([0.05])


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.3, 2), st.floats(-1.5, 1.5))
def test_residual_is_a_minimum(a, b, s, ss):
    """Exact residual equals a brute-force minimum over a fine grid of pi."""
    tr = varsigma([s], [ss])
    A = Box((-0.5,), (0.5,))
    R, pi = residual(tr, [s], [ss], A, np.array([a]), np.array(b))
    grid = np.linspace(-0.5, 0.5, 20001)
    brute = np.min((a - s * grid) ** 2 + (b - ss * grid) ** 2)
    assert R <= brute + 1e-12
    assert R >= brute - 1e-6


def test_set_validation_and_json():
    with pytest.raises(ParameterError):
        Box((1.0,), (0.0,))
    with pytest.raises(ParameterError):
        Ball((0.0,), 0.0)
    with pytest.raises(ParameterError):
        HalfSpace((0.0, 0.0), 1.0)
    for A in SETS:
        assert convex_set_from_dict(A.to_dict()) == A


def test_coeffs_validation_and_roundtrip():
    with pytest.raises(ParameterError):
        AgentCoeffs(1, 1.0, 0.0, 0.2, 1.0)
    with pytest.raises(ParameterError):
        AgentCoeffs(1, -1.0, 0.0, 0.2, 0.5)
    with pytest.raises(ParameterError):
        AgentCoeffs(2, [1.0], 0.0, 0.2, 0.5)
    c = AgentCoeffs(2, [[1.0, 2.0], [1.5, 0.5]], [0.3, 0.1], 0.2, 0.4, NormalXi(1.0, 0.2),
                    Box((0, 0), (1, 1)))
    back = AgentCoeffs.from_json(c.to_json())
    assert back.to_json() == c.to_json()
    c.check_grid(TimeGrid(1.0, 2))
    with pytest.raises(ParameterError):
        c.check_grid(TimeGrid(1.0, 3))


def test_wealth_examples():
    c = AgentCoeffs(1, 1.0, 0.0, 0.2, 0.5, 2.0)
    g = TimeGrid(1.0, 10)
    assert np.all(simulate_wealth(c, 0.0, g, 100).terminal == 2.0)
    c0 = AgentCoeffs(1, 1.0, 0.0, 0.0, 0.5, 0.0)
    x = simulate_wealth(c0, 1.0, g, 20_000, seed=1).terminal
    assert abs(x.mean()) <= 3 / np.sqrt(20_000)
    c1 = AgentCoeffs(1, 1.0, 1.0, 0.2, 0.5, 0.0)
    x = simulate_wealth(c1, 0.1, TimeGrid(1.0, 4), 50_000, seed=2).terminal
    se = x.std(ddof=1) / np.sqrt(len(x))
    assert abs(x.mean() - 0.02) <= 3 * se


def test_wealth_rejects_infeasible_strategy():
    c = AgentCoeffs(1, 1.0, 0.0, 0.2, 0.5, 0.0, Box((0,), (0.05,)))
    with pytest.raises(ParameterError):
        simulate_wealth(c, 0.1, TimeGrid(1.0, 2), 10)


def test_wealth_euler_mean_unbiased_on_every_grid():
    # piecewise-constant coefficients make Euler exact in mean, so there is no bias to halve
    c = AgentCoeffs(1, [[1.0], [0.5]], 0.0, [[0.2], [0.4]], 0.5, 0.0)
    for steps in (2, 4, 8):
        g = TimeGrid(1.0, steps)
        cc = AgentCoeffs(1, np.repeat(c.sigma, steps // 2, 0), 0.0, np.repeat(c.theta, steps // 2, 0), 0.5)
        x = simulate_wealth(cc, 0.1, g, 40_000, seed=steps).terminal
        exact = 0.1 * (1.0 * 0.2 + 0.5 * 0.4) / 2
        assert abs(x.mean() - exact) <= 3 * x.std(ddof=1) / np.sqrt(len(x))


def test_wealth_chunking_and_shared_common_noise(tmp_path):
    c = AgentCoeffs(1, 1.0, 1.0, 0.2, 0.5, 0.0)
    g = TimeGrid(1.0, 3)
    a = simulate_wealth(c, 0.1, g, 5000, seed=9, agent=0, keep_paths=True)
    b = simulate_wealth(c, 0.1, g, 5000, seed=9, agent=0)
    assert np.array_equal(a.terminal, b.terminal)
    # the first 100 paths do not depend on how many are drawn
    assert np.array_equal(simulate_wealth(c, 0.1, g, 100, seed=9).terminal, a.terminal[:100])
    a.to_csv(tmp_path / "w.csv")
    assert (tmp_path / "w.csv").read_text().splitlines()[0] == "path_id,t,value"


def test_utility_examples():
    assert utility(1.0, 1.0, 0.3) == -1.0
    assert utility(0.5, 0.0, 0.5) == pytest.approx(-np.exp(-1))
    assert utility(-0.015, 0.0, 0.5) == pytest.approx(-1.030454534, abs=1e-9)
    val, flag = utility(-1e6, 0.0, 0.5, with_flag=True)
    assert flag and np.isfinite(val)
