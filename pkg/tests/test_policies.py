import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lagrange_aoi.dual import solve_lambda
from lagrange_aoi.model import SystemSpec
from lagrange_aoi.policies import (
    GreedyPolicy,
    LagrangePolicy,
    RandomizedBudget,
    RandomizedPolicy,
    ScaledGreedyPolicy,
    TablePolicy,
    make_policy,
    optimize_randomized,
    parse_policy_name,
    source_classes,
)


def test_greedy_examples():
    assert GreedyPolicy(2).decide([3, 9]) == 1
    assert ScaledGreedyPolicy([5, 1]).decide([3, 9]) == 0
    assert GreedyPolicy(3).decide([4, 4, 4]) == 0
    assert ScaledGreedyPolicy([2, 2, 2]).decide([4, 4, 4]) == 0


@settings(max_examples=60, deadline=None)
@given(
    ages=st.lists(st.integers(1, 500), min_size=2, max_size=6),
    c=st.floats(0.01, 100.0),
    seed=st.integers(0, 2**32 - 1),
)
def test_greedy_scale_invariance(ages, c, seed):
    alpha = np.random.default_rng(seed).uniform(0.1, 10.0, len(ages))
    assert ScaledGreedyPolicy(alpha).decide(ages) == ScaledGreedyPolicy(c * alpha).decide(ages)
    assert GreedyPolicy(len(ages)).decide(ages) == ScaledGreedyPolicy(np.ones(len(ages))).decide(ages)


def test_lagrange_symmetric_examples():
    # two symmetric sources with threshold 6 each: ages (10, 4) -> source 0
    table = np.vstack([6.0 - np.arange(1, 30)] * 2)
    pol = LagrangePolicy(table)
    assert pol.decide([10, 4]) == 0
    assert pol.decide([7, 7]) == 0
    assert pol.decide([3, 8]) == 1


def test_lagrange_linear_extension():
    table = np.array([[5.0, 3.0, 1.0, -1.0], [0.0, 0.0, 0.0, 0.0]])
    pol = LagrangePolicy(table)
    assert pol.index(0, 10) == pytest.approx(-1.0 - 2.0 * 6)
    assert pol.decide([10, 1]) == 0


def test_lagrange_from_dual_picks_negative_index():
    system = SystemSpec.from_lists([2, 25], [5, 1], 0.7)
    d = solve_lambda(system)
    pol = LagrangePolicy.from_dual(d)
    T0, T1 = d.thresholds
    assert pol.decide([T0, T1 - 1]) == 0
    assert pol.decide([T0 - 1, T1]) == 1
    for ages in ([2, 25], [40, 40], [500, 3000]):
        assert pol.decide(ages) in (0, 1)


def test_randomized_validation():
    with pytest.raises(ValueError):
        RandomizedPolicy([0.5, 0.3])
    with pytest.raises(ValueError):
        RandomizedPolicy([1.2, -0.2])


def test_randomized_one_hot():
    rng = np.random.default_rng(0)
    pol = RandomizedPolicy([0.0, 1.0, 0.0])
    assert all(pol.decide([1, 1, 1], rng) == 1 for _ in range(200))


def test_randomized_frequencies():
    rng = np.random.default_rng(1)
    pol = RandomizedPolicy([0.5, 0.5])
    picks = np.array([pol.decide([1, 1], rng) for _ in range(1_000_000)])
    assert abs(picks.mean() - 0.5) < 0.002


def test_table_policy_clamps():
    tab = np.array([[0, 1], [1, 0]])
    pol = TablePolicy(tab, [2, 3])
    assert pol.decide([2, 3]) == 0
    assert pol.decide([1, 100]) == 1
    assert pol.decide([50, 50]) == 0


def test_source_classes():
    s = SystemSpec.from_classes([2, 50], [5, 1], [2, 3], 0.5)
    assert source_classes(s) == [[0, 1], [2, 3, 4]]


def test_optimize_symmetric_uniform():
    s = SystemSpec.from_lists([3, 3, 3], [2, 2, 2], 0.5)
    assert np.allclose(optimize_randomized(s, seed=3), 1 / 3)


def test_optimize_prefers_short_heavy_class():
    s = SystemSpec.from_lists([2, 50], [5, 1], 0.5)
    pmf = optimize_randomized(s, RandomizedBudget(horizon=50_000, seeds=2), seed=7)
    assert pmf[0] > pmf[1] > 0
    assert pmf.sum() == pytest.approx(1.0)


def test_optimize_deterministic():
    s = SystemSpec.from_classes([2, 15], [12, 3], [2, 2], 0.7)
    b = RandomizedBudget(horizon=20_000, seeds=2)
    assert np.array_equal(optimize_randomized(s, b, seed=5), optimize_randomized(s, b, seed=5))


def test_parse_policy_names():
    assert parse_policy_name("lagrange") == ("lagrange", None)
    assert parse_policy_name("fixed-randomized(pmf=0.25,0.75)") == ("fixed-randomized", [0.25, 0.75])
    with pytest.raises(ValueError):
        parse_policy_name("whittle")


def test_make_policy():
    s = SystemSpec.from_lists([2, 3], [1, 4], 0.5)
    assert make_policy("greedy", s).name == "greedy"
    assert np.array_equal(make_policy("scaled-greedy", s).weights, [1, 4])
    assert make_policy("fixed-randomized(pmf=0.5,0.5)", s).name == "fixed-randomized(pmf=0.5,0.5)"
    with pytest.raises(ValueError):
        make_policy("fixed-randomized(pmf=1)", s)
    with pytest.raises(ValueError):
        make_policy("lagrange", s)
