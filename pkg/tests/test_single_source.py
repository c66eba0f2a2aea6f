import numpy as np
import pytest

from conftest import make_pair
from lagrange_aoi.model import SourceSpec, SystemSpec, stage_overhead
from lagrange_aoi.single_source import (
    activation_fraction,
    bellman_residual,
    compute_f_tables,
    dominant_competitor,
    index_values,
    min_table_horizon,
    q_values,
    solve_threshold,
    threshold_argument,
    threshold_from_theta,
    write_tables,
)


def test_dominant_competitor_smallest_L_then_index():
    s = SystemSpec.from_lists([3, 5, 2, 2], [1, 1, 1, 1], 0.5)
    assert dominant_competitor(s, 0) == 2
    assert dominant_competitor(s, 2) == 3
    assert dominant_competitor(s, 3) == 2


def test_threshold_from_theta_clamps_and_snaps():
    # argument = theta/alpha - (Lm-1)/(2p) - Li/p
    assert threshold_from_theta(0.0, 1.0, 3, 2, 0.5) == 3
    theta = 4.5 + 1.0 + 4.0  # argument exactly 4.5
    assert threshold_argument(theta, 1.0, 2, 2, 0.5) == pytest.approx(4.5)
    assert threshold_from_theta(theta, 1.0, 2, 2, 0.5) == 5
    exact = 6.0 + 1.0 + 4.0
    assert threshold_from_theta(exact * (1 + 1e-12), 1.0, 2, 2, 0.5) == 6


def test_solution_converges_with_small_residual(grid_case):
    (Li, Lm), a, p, lam = grid_case
    s, m = make_pair(Li, Lm, a)
    sol = solve_threshold(s, m, p, lam)
    assert sol.converged
    assert sol.T >= Li
    assert np.abs(bellman_residual(sol)).max() < 1e-8


def test_index_sign_changes_once_at_threshold(grid_case):
    (Li, Lm), a, p, lam = grid_case
    s, m = make_pair(Li, Lm, a)
    sol = solve_threshold(s, m, p, lam)
    v = np.arange(Li, sol.v_max + 30)
    g = index_values(sol, v)
    scale = 1e-9 * max(1.0, np.abs(g).max())
    assert np.all(g[v >= sol.T] <= scale)
    assert np.all(g[v < sol.T] > -scale)


def test_affine_region_closed_form():
    s, m = make_pair(2, 3, 2.0)
    p = 0.7
    sol = solve_threshold(s, m, p, 4.0)
    v = np.arange(sol.T, sol.T + 15)
    expected = m.L * (sol.theta - s.alpha * v - s.alpha * (m.L - 1) / (2 * p) - s.alpha * s.L / p)
    assert np.allclose(index_values(sol, v), expected, rtol=1e-9, atol=1e-9)


def test_h_affine_beyond_table():
    s, m = make_pair(2, 2, 1.0)
    sol = solve_threshold(s, m, 0.5, 3.0)
    v = np.array([sol.v_max - 1, sol.v_max, sol.v_max + 1, sol.v_max + 50])
    h = sol.h(v)
    slope = s.alpha * s.L / 0.5
    assert np.allclose(np.diff(h) / np.diff(v), slope)


def test_scalar_and_array_queries_agree():
    s, m = make_pair(5, 2, 1.0)
    sol = solve_threshold(s, m, 0.7, 2.0)
    qi, qm = q_values(sol, 9)
    arr_i, arr_m = q_values(sol, np.array([9]))
    assert isinstance(qi, float)
    assert qi == arr_i[0] and qm == arr_m[0]
    assert sol.h(1) == sol.h(s.L)  # ages below L_i are clamped


def test_lambda_zero_serves_always():
    s, m = make_pair(3, 2, 2.0)
    sol = solve_threshold(s, m, 0.6, 0.0)
    assert sol.T == s.L
    assert activation_fraction(sol).mu == pytest.approx(1.0)


def test_equal_sources_equal_solutions():
    a0, a1 = SourceSpec(0, 3, 2.0), SourceSpec(1, 3, 2.0)
    s0 = solve_threshold(a0, a1, 0.6, 7.0)
    s1 = solve_threshold(a1, a0, 0.6, 7.0)
    assert (s0.T, s0.theta) == (s1.T, s1.theta)


def test_activation_fraction_bounds(grid_case):
    (Li, Lm), a, p, lam = grid_case
    s, m = make_pair(Li, Lm, a)
    act = activation_fraction(solve_threshold(s, m, p, lam))
    assert 0.0 <= act.mu <= 1.0


def test_activation_reliable_channel_closed_form():
    # p = 1: deterministic cycle of one own stage and k competitor stages
    s, m = make_pair(2, 3, 1.0)
    sol = solve_threshold(s, m, 1.0, 5.0)
    k = max(0, -(-(sol.T - s.L) // m.L))
    assert activation_fraction(sol).mu == pytest.approx(s.L / (s.L + k * m.L))


def test_tables_reject_short_horizon():
    s, m = make_pair(2, 2, 1.0)
    sol = solve_threshold(s, m, 0.5, 3.0)
    need = min_table_horizon(sol.T, sol.own_pmf, sol.comp_pmf)
    with pytest.raises(ValueError):
        compute_f_tables(s, m, 0.5, sol.T, v_max=need - 1)


def test_bad_arguments():
    s, m = make_pair(2, 2, 1.0)
    with pytest.raises(ValueError):
        solve_threshold(s, m, 0.5, 1.0, beta=1.0)
    with pytest.raises(ValueError):
        solve_threshold(s, m, 0.5, 1.0, eps=0.0)


def test_initial_guess_does_not_matter():
    s, m = make_pair(5, 2, 1.0)
    a = solve_threshold(s, m, 0.7, 5.0)
    b = solve_threshold(s, m, 0.7, 5.0, theta0=1000.0)
    c = solve_threshold(s, m, 0.7, 5.0, theta0=0.0)
    assert a.T == b.T == c.T
    assert a.theta == pytest.approx(b.theta, rel=1e-12)
    assert a.theta == pytest.approx(c.theta, rel=1e-12)


def test_always_serve_cost_closed_form():
    # T = L_i: cost per slot of always serving i is lam + alpha * E[per-slot age]
    s, m = make_pair(2, 2, 3.0)
    sol = solve_threshold(s, m, 0.5, 0.0)
    assert sol.T == 2
    p, L = 0.5, 2
    # stationary mean age at decision instants solves E[v] = (1-p)(E[v]+1) + p E[X]
    Ev = ((1 - p) + p * (L - (1 - p)) / p) / p
    assert sol.theta == pytest.approx(s.alpha * (Ev * L + stage_overhead(L, p)) / L, rel=1e-9)


def test_write_tables(tmp_path):
    s, m = make_pair(2, 3, 1.0)
    sol = solve_threshold(s, m, 0.7, 2.0)
    path = tmp_path / "t.txt"
    write_tables(path, sol)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# id=0 lambda=2.0 T=")
    assert lines[1] == "v f1 f2 A1 A2"
    assert int(lines[2].split()[0]) == s.L
