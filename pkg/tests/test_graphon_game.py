import numpy as np
import pytest

from graphon_invest.bsde import BsdeProblem, baseline_driver, brownian_forward, solve_bsde_lsmc
from graphon_invest.errors import ParameterError
from graphon_invest.graphon import AffineMean, Constant, Product
from graphon_invest.graphon_game import (GraphonEquilibrium, LabelGrid, graphon_value,
                                         picard_graphon_bsde, picard_graphon_fbsde_small_time,
                                         solve_graphon_equilibrium_det)
from graphon_invest.market import AgentCoeffs, Box, TimeGrid

TG = TimeGrid(1.0, 1)


def test_label_grid():
    g = LabelGrid(4)
    assert np.allclose(g.labels, [0.125, 0.375, 0.625, 0.875]) and g.weights.sum() == 1
    assert list(g.index_of([0.0, 0.25, 0.26, 1.0])) == [0, 0, 1, 3]
    with pytest.raises(ParameterError):
        LabelGrid(0)


def test_no_common_noise_decouples():
    c = AgentCoeffs(1, 2.0, 0.0, 0.2, 0.5, 0.0, Box((0,), (0.03,)))
    eq = solve_graphon_equilibrium_det(Product(), LabelGrid(8), TG, c)
    assert np.all(eq.pi == 0.03)


def test_half_graphon_example(standing):
    eq = solve_graphon_equilibrium_det(Constant(0.5), LabelGrid(16), TG, standing)
    assert np.abs(eq.pi - 1 / 15).max() <= 1e-10
    assert np.allclose(eq.benchmark, 0.5)


def test_full_graphon_matches_complete_graph(standing):
    eq = solve_graphon_equilibrium_det(Constant(1.0), LabelGrid(8), TG, standing)
    assert np.abs(eq.pi - 0.1).max() <= 1e-10


def test_zero_graphon_is_baseline(no_common):
    eq = solve_graphon_equilibrium_det(Constant(0.0), LabelGrid(8), TG, no_common)
    assert np.allclose(eq.y0, -0.01, atol=1e-15)


def test_value_hand_integral_without_common_noise():
    c = AgentCoeffs(1, 1.0, 0.0, 0.2, 0.5, 1.0, Box((0,), (0.05,)))
    G = Constant(0.4)
    eq = solve_graphon_equilibrium_det(G, LabelGrid(8), TimeGrid(2.0, 3), c)
    # pi = 0.05 everywhere: 0.4 * 0.05 * 0.2 - 0.01 + (0.1 - 0.05)^2 / (2 * 0.5), times T = 2
    assert np.allclose(eq.y0, 2 * (0.4 * 0.01 - 0.01 + 0.0025), atol=1e-12)


def test_label_refinement_is_first_order(standing):
    G = AffineMean(0.6, 0.2)
    prof = {}
    for M in (8, 16, 32, 64):
        eq = solve_graphon_equilibrium_det(G, LabelGrid(M), TG, standing)
        prof[M] = eq
    # compare on a common set of labels via nearest-label lookup
    u = np.array([0.1, 0.3, 0.55, 0.8, 0.95])
    at = lambda M: prof[M].pi[LabelGrid(M).index_of(u), 0, 0]
    diffs = [np.abs(at(M) - at(2 * M)).max() for M in (8, 16, 32)]
    assert all(d * M <= 0.05 for d, M in zip(diffs, (8, 16, 32)))


def test_symmetry_under_constant_graphon(standing):
    eq = solve_graphon_equilibrium_det(Constant(0.3), LabelGrid(10), TG, standing)
    assert np.ptp(eq.pi) == 0 and np.ptp(eq.y0) == 0


def test_random_starts_reach_one_fixed_point(standing):
    G = AffineMean(0.6, 0.2)
    grid = LabelGrid(12)
    ref = solve_graphon_equilibrium_det(G, grid, TG, standing)
    rng = np.random.default_rng(3)
    for _ in range(10):
        eq = solve_graphon_equilibrium_det(G, grid, TG, standing, init=rng.normal(size=12))
        assert np.abs(eq.pi - ref.pi).max() <= 1e-8


def test_json_roundtrip(standing, tmp_path):
    eq = solve_graphon_equilibrium_det(Constant(0.5), LabelGrid(4), TG, standing)
    back = GraphonEquilibrium.from_dict(eq.to_dict())
    assert back.to_json() == eq.to_json()
    eq.to_csv(tmp_path / "g.csv")
    assert (tmp_path / "g.csv").read_text().splitlines()[0] == "label,t,pi_0,z_star"


def test_heterogeneous_labels():
    coeffs = lambda u: AgentCoeffs(1, 1.0 + u, 1.0, 0.2, 0.5, 1.0)
    eq = solve_graphon_equilibrium_det(Constant(0.5), LabelGrid(6), TG, coeffs)
    assert np.all(np.diff(eq.pi[:, 0, 0]) < 0)


def test_small_time_agrees_with_direct_solver(standing):
    G, grid = AffineMean(0.5, 0.2), LabelGrid(8)
    tg = TimeGrid(0.1, 4)
    r = picard_graphon_fbsde_small_time(G, grid, tg, standing)
    eq = solve_graphon_equilibrium_det(G, grid, tg, standing)
    assert r.converged and not r.horizon_too_large
    assert max(r.factors) < 1
    assert np.abs(r.pi - eq.pi).max() <= 1e-8


def test_small_time_zero_graphon_one_iteration(standing):
    r = picard_graphon_fbsde_small_time(Constant(0.0), LabelGrid(8), TimeGrid(0.1, 4), standing)
    assert r.iterations == 1


def test_small_time_factor_sweep(standing):
    # in the deterministic reduction every interval solves the same algebraic map, so the
    # factor does not move with T; the sweep is nondecreasing only with equality
    G, grid = AffineMean(0.5, 0.2), LabelGrid(8)
    f = [picard_graphon_fbsde_small_time(G, grid, TimeGrid(T, 4), standing).factors[0]
         for T in (0.1, 0.5, 1.0, 2.0)]
    assert all(b >= a - 1e-12 for a, b in zip(f, f[1:]))
    assert np.ptp(f) <= 1e-12


def test_picard_bsde_kappa_zero_matches_det(no_common):
    tg = TimeGrid(1.0, 10)
    grid = LabelGrid(4)
    r = picard_graphon_bsde(Constant(0.5), grid, tg, no_common, kappa=0.0, paths=2000, picard_iters=3)
    eq = solve_graphon_equilibrium_det(Constant(0.5), grid, tg, no_common)
    assert r.gaps[0] == 0.0
    assert np.allclose(r.y0, eq.y0, atol=1e-12)


def test_picard_bsde_zero_graphon_is_single_agent(no_common):
    tg = TimeGrid(1.0, 10)
    c = AgentCoeffs(1, 1.0, 0.0, 0.2, 0.5, 1.0)
    r = picard_graphon_bsde(Constant(0.0), LabelGrid(3), tg, c, kappa=0.1, paths=4000, picard_iters=3)
    th = lambda k, x: 0.2 + 0.1 * np.asarray(x)
    single = solve_bsde_lsmc(BsdeProblem(tg, baseline_driver(c, tg, theta_fn=th, mean_field=np.zeros(10)), 0.0),
                             brownian_forward(tg, 4000, 0), picard_iters=3)
    assert np.allclose(r.y0, single.y0, atol=1e-12)


def test_picard_bsde_contracts(no_common):
    r = picard_graphon_bsde(Constant(0.5), LabelGrid(8), TimeGrid(1.0, 20), no_common, kappa=0.1,
                            paths=4000, picard_iters=6)
    assert not r.diverged
    assert r.ratios and all(x < 1 for x in r.ratios)


def test_picard_bsde_rejects_common_noise(standing):
    with pytest.raises(ParameterError):
        picard_graphon_bsde(Constant(0.5), LabelGrid(2), TimeGrid(1.0, 2), standing)
