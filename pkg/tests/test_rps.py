import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridfurn.policy import assemble_joint
from gridfurn.rps import (
    adversary_value,
    best_response,
    optimal_rank_one_search,
    payoff,
    point_mass_sync_policy,
    rank_one_optimum,
    run_rps_experiment,
)

TARGET = 5 - 4 * math.sqrt(2)


def _brute_value(joint):
    return min(sum(joint[a, b] * payoff(a, b, e) for a in range(3) for b in range(3)) for e in range(3))


def test_payoff_examples():
    assert payoff("R", "R", "S") == 1
    assert payoff("P", "P", "R") == 1
    assert payoff("S", "S", "P") == 1
    assert payoff("R", "P", "R") == -1
    assert payoff("S", "S", "S") == 0
    assert payoff("R", "R", "P") == -1


def test_payoff_is_symmetric_in_the_team():
    for a, b, e in itertools.product(range(3), repeat=3):
        assert payoff(a, b, e) == payoff(b, a, e)


def test_adversary_value_examples():
    assert adversary_value(np.eye(3) / 3) == pytest.approx(0.0, abs=1e-15)
    point = np.zeros((3, 3))
    point[0, 0] = 1
    assert adversary_value(point) == -1.0
    assert best_response(point) == 1  # paper beats rock
    p, v = rank_one_optimum()
    assert adversary_value(np.outer(p, p)) == pytest.approx(TARGET, abs=1e-12)
    assert v == pytest.approx(-0.6569, abs=1e-4)


def test_adversary_value_bounds_exhaustive_grid():
    k = 6
    count = 0
    for combo in itertools.product(range(k + 1), repeat=8):
        if sum(combo) > k:
            continue
        joint = np.array(list(combo) + [k - sum(combo)], dtype=float).reshape(3, 3) / k
        v = adversary_value(joint)
        assert -1.0 <= v <= 1e-15
        count += 1
    assert count == math.comb(k + 8, 8)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6))
def test_adversary_value_matches_brute_force(seed):
    joint = np.random.default_rng(seed).dirichlet(np.full(9, 0.5)).reshape(3, 3)
    v = adversary_value(joint)
    assert v == pytest.approx(_brute_value(joint), abs=1e-12)
    assert -1.0 <= v <= 1e-15


def test_rank_one_search_reproduces_optimum():
    p, q, v = optimal_rank_one_search(1e-3)
    assert abs(v - TARGET) <= 1e-3
    assert abs(p[0] - (2 - math.sqrt(2))) <= 1e-2 and p[1] <= 1e-2
    assert adversary_value(np.outer(p, q)) == pytest.approx(v, abs=1e-12)


def test_symmetric_search_matches():
    p, q, v = optimal_rank_one_search(1e-3, symmetric=True)
    assert np.array_equal(p, q)
    assert abs(v - TARGET) <= 1e-3
    # Independent fine grid over p = q.
    k = 600
    i, j = np.meshgrid(np.arange(k + 1), np.arange(k + 1), indexing="ij")
    keep = i + j <= k
    P = np.stack([i[keep], j[keep], k - i[keep] - j[keep]], 1) / k
    u = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]], dtype=float)  # common action vs adversary
    vals = np.min((P**2) @ (u + 1) - 1, axis=1)
    assert abs(v - vals.max()) <= 1e-3


def test_search_rejects_bad_resolution():
    with pytest.raises(ValueError):
        optimal_rank_one_search(0)


def test_search_is_monotone_in_resolution():
    values = [optimal_rank_one_search(r, refine_rounds=0)[2] for r in (0.1, 0.05, 0.025, 0.0125)]
    assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))
    refined = [optimal_rank_one_search(r)[2] for r in (0.1, 0.01, 0.001)]
    assert all(b >= a - 1e-9 for a, b in zip(refined, refined[1:]))
    assert all(v <= TARGET + 1e-9 for v in values + refined)


def test_point_mass_mixture_is_optimal():
    assert adversary_value(assemble_joint(point_mass_sync_policy())) == 0.0


def test_point_mass_initialised_training_starts_near_zero():
    run = run_rps_experiment("sync", 3, iterations=5, seed=0, init="point-mass")
    assert run.values[0] >= -0.01


def test_marginal_training_plateaus_at_rank_one_optimum():
    run = run_rps_experiment("marginal", 1, iterations=2000, seed=0)
    assert abs(run.plateau() - TARGET) <= 0.05
    assert run.m == 1 and len(run.values) == 2001


def test_sync_training_escapes_rank_one_bound():
    run = run_rps_experiment("sync", 3, iterations=2000, seed=1)
    assert run.plateau() >= -0.05


def test_experiment_errors():
    with pytest.raises(ValueError):
        run_rps_experiment("central", 3, iterations=1)
    with pytest.raises(ValueError):
        run_rps_experiment("sync", 2, iterations=1, init="point-mass")
