import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridfurn.actions import Heading, build_coordination_tensor
from gridfurn.policy import (
    CentralPolicy,
    MarginalPolicy,
    SharedRandomStream,
    StreamDesyncError,
    SyncPolicy,
    assemble_joint,
    best_rank_one,
    invalid_prob,
    joint_from_csv,
    joint_log_prob,
    joint_to_csv,
    mixture_from_joint,
    product_of_marginals,
    sample_mixture,
    sync_sample,
    sync_sample_many,
    tvd,
)

R, P, S = np.eye(3)


def _tv(a, b):
    return 0.5 * np.abs(a - b).sum()


def _random_sync(rng, n=2, m=3, a=13):
    return SyncPolicy(rng.dirichlet(np.ones(m)), rng.dirichlet(np.ones(a), size=(n, m)))


# -- assemble_joint ----------------------------------------------------------------


def test_single_component_is_outer_product():
    rng = np.random.default_rng(0)
    p, q = rng.dirichlet(np.ones(13), size=2)
    joint = assemble_joint(SyncPolicy(np.ones(1), np.stack([p[None], q[None]])))
    np.testing.assert_allclose(joint, np.outer(p, q), atol=1e-15)
    np.testing.assert_allclose(assemble_joint(MarginalPolicy(np.stack([p, q]))), np.outer(p, q), atol=1e-15)


def test_two_point_mass_components():
    pol = SyncPolicy([0.5, 0.5], np.stack([np.stack([R, P]), np.stack([R, P])]))
    np.testing.assert_array_equal(assemble_joint(pol), np.diag([0.5, 0.5, 0.0]))


def test_three_point_mass_components_give_scaled_identity():
    pol = SyncPolicy(np.full(3, 1 / 3), np.stack([np.eye(3), np.eye(3)]))
    np.testing.assert_allclose(assemble_joint(pol), np.eye(3) / 3, atol=1e-15)


def test_central_is_identity():
    rng = np.random.default_rng(1)
    J = rng.dirichlet(np.ones(169)).reshape(13, 13)
    np.testing.assert_array_equal(assemble_joint(CentralPolicy(J)), J)


def test_invalid_simplex_rejected():
    with pytest.raises(ValueError):
        MarginalPolicy(np.full((2, 13), 0.1))
    with pytest.raises(ValueError):
        SyncPolicy(np.array([0.7, 0.7]), np.full((2, 2, 13), 1 / 13))
    with pytest.raises(ValueError):
        CentralPolicy(np.full((13, 13), 0.1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 6), st.sampled_from([2, 3]))
def test_assembled_joint_is_a_distribution(seed, m, n):
    J = assemble_joint(_random_sync(np.random.default_rng(seed), n=n, m=m))
    assert J.shape == (13,) * n
    assert J.min() >= 0 and abs(J.sum() - 1) <= 1e-8


# -- sampling ----------------------------------------------------------------------


def test_streams_with_equal_state_agree():
    a, b = SharedRandomStream(42, 7), SharedRandomStream(42, 7)
    assert a.shared_uniform() == b.shared_uniform()
    assert a.private_uniform(1) == b.private_uniform(1)
    a.advance()
    assert a.shared_uniform() != b.shared_uniform()
    b.advance()
    assert a.shared_uniform() == b.shared_uniform()


def test_m1_reduces_to_independent_marginals():
    rng = np.random.default_rng(2)
    probs = rng.dirichlet(np.ones(13), size=2)
    pol = SyncPolicy(np.ones(1), probs[:, None, :])
    marg = MarginalPolicy(probs)
    for t in range(50):
        s1 = [SharedRandomStream(9, t) for _ in range(2)]
        s2 = [SharedRandomStream(9, t) for _ in range(2)]
        assert sync_sample(pol, s1)[0] == sync_sample(marg, s2)[0]


def test_degenerate_mixing_always_picks_first_component():
    rng = np.random.default_rng(3)
    pol = SyncPolicy(np.array([1.0, 0.0, 0.0]), rng.dirichlet(np.ones(13), size=(2, 3)))
    actions, comps = sync_sample_many(pol, seed=5, n=20000)
    assert np.all(comps == 0)
    emp = np.zeros((13, 13))
    np.add.at(emp, (actions[:, 0], actions[:, 1]), 1)
    assert _tv(emp / emp.sum(), np.outer(pol.probs[0, 0], pol.probs[1, 0])) < 3 * math.sqrt(169 / 20000)


def test_monte_carlo_matches_assembled_joint():
    pol = SyncPolicy([0.5, 0.5], np.stack([np.stack([R, P]), np.stack([R, P])]))
    n = 10**6
    actions, comps = sync_sample_many(pol, seed=2024, n=n)
    assert np.all(comps[0] == comps[1])
    emp = np.zeros((3, 3))
    np.add.at(emp, (actions[:, 0], actions[:, 1]), 1)
    assert _tv(emp / n, assemble_joint(pol)) <= 0.01


def test_monte_carlo_general_policy():
    pol = _random_sync(np.random.default_rng(4), m=4)
    n = 10**6
    actions, comps = sync_sample_many(pol, seed=11, n=n)
    assert np.all(comps[0] == comps[1])
    emp = np.zeros((13, 13))
    np.add.at(emp, (actions[:, 0], actions[:, 1]), 1)
    assert _tv(emp / n, assemble_joint(pol)) <= min(0.01, 3 * math.sqrt(169 / n))


def test_scalar_and_vectorised_samplers_agree():
    pol = _random_sync(np.random.default_rng(5), m=3)
    actions, comps = sync_sample_many(pol, seed=77, n=40)
    for t in range(40):
        streams = [SharedRandomStream(77, t) for _ in range(2)]
        ma, j, logps = sync_sample(pol, streams)
        assert ma == tuple(actions[t]) and j == comps[0, t]
        assert all(s.index == t + 1 for s in streams)
        np.testing.assert_allclose(logps, [np.log(pol.probs[i, j, ma[i]]) for i in range(2)])


def test_desynchronised_streams_are_detected():
    pol = _random_sync(np.random.default_rng(6), m=13)
    for seed in range(50):
        streams = [SharedRandomStream(seed, 0), SharedRandomStream(seed, 1)]
        with pytest.raises(StreamDesyncError):
            sync_sample(pol, streams)


def test_sample_mixture_rejects_wrong_stream_count():
    with pytest.raises(ValueError):
        sample_mixture(np.ones(1), np.full((2, 1, 13), 1 / 13), [SharedRandomStream(0)])


# -- invalid_prob ------------------------------------------------------------------


S2 = build_coordination_tensor((Heading.NORTH, Heading.EAST))


def test_invalid_prob_of_uniform():
    assert invalid_prob(np.full((13, 13), 1 / 169), S2) == pytest.approx(153 / 169, abs=1e-12)


def test_invalid_prob_extremes():
    on = S2.mask / S2.mask.sum()
    assert invalid_prob(on, S2) == 0.0
    off = np.zeros((13, 13))
    off[tuple(np.argwhere(~S2.mask)[0])] = 1.0
    assert invalid_prob(off, S2) == 1.0
    with pytest.raises(ValueError):
        invalid_prob(np.ones((3, 3)) / 9, S2)


# -- rank-one approximation ------------------------------------------------------------


def _grid_tv_2x2(P, resolution=1e-3):
    a = np.linspace(0, 1, int(round(1 / resolution)) + 1)
    p = np.stack([a, 1 - a], 1)
    Rk = p[:, None, :, None] * p[None, :, None, :]
    return float((0.5 * np.abs(Rk - P).sum(axis=(2, 3))).min())


def _grid_tv_3x3(P, n=60):
    pts = np.array([(i, j, n - i - j) for i in range(n + 1) for j in range(n + 1 - i)]) / n
    best = np.inf
    for chunk in np.array_split(pts, 20):
        Rk = chunk[:, None, :, None] * pts[None, :, None, :]
        best = min(best, float((0.5 * np.abs(Rk - P).sum(axis=(2, 3))).min()))
    return best


def test_rank_one_input_has_zero_tv():
    rng = np.random.default_rng(7)
    J = np.outer(rng.dirichlet(np.ones(13)), rng.dirichlet(np.ones(13)))
    assert best_rank_one(J)[1] <= 1e-9
    assert tvd(J) <= 1e-9


def test_half_identity_against_grid_oracle():
    P = np.eye(2) / 2
    oracle = _grid_tv_2x2(P)
    assert oracle == pytest.approx(math.sqrt(2) - 1, abs=1e-3)
    approx, tv = best_rank_one(P)
    assert abs(tv - oracle) <= 0.02
    assert abs(tv - (math.sqrt(2) - 1)) <= 0.02
    assert _tv(P, approx) == pytest.approx(tv)
    assert tvd(P, method="marginals") == pytest.approx(0.5)


def test_third_identity_against_grid_oracle():
    P = np.eye(3) / 3
    assert abs(best_rank_one(P)[1] - _grid_tv_3x3(P)) <= 0.02


def test_tvd_of_marginal_policy_is_zero():
    rng = np.random.default_rng(8)
    J = assemble_joint(MarginalPolicy(rng.dirichlet(np.ones(13), size=2)))
    assert tvd(J) <= 1e-9 and tvd(J, method="marginals") <= 1e-12


def test_tvd_errors():
    with pytest.raises(ValueError):
        tvd(np.full((3, 3, 3), 1 / 27))
    assert tvd(np.full((3, 3, 3), 1 / 27), method="marginals") == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        tvd(np.eye(2) / 2, method="svd")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_optimizer_never_worse_than_marginals(seed):
    J = assemble_joint(_random_sync(np.random.default_rng(seed), m=3))
    assert tvd(J) <= tvd(J, method="marginals") + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.permutations(range(13)))
def test_tvd_invariant_under_common_permutation(seed, perm):
    J = assemble_joint(_random_sync(np.random.default_rng(seed), m=2))
    Jp = J[np.ix_(perm, perm)]
    assert tvd(Jp, method="marginals") == pytest.approx(tvd(J, method="marginals"), abs=1e-12)
    # The optimizer uses random restarts; its value agrees up to its own convergence tolerance.
    assert tvd(Jp) == pytest.approx(tvd(J), abs=0.02)


# -- log-probabilities -------------------------------------------------------------


def test_joint_log_prob_examples():
    assert joint_log_prob(CentralPolicy(np.full((13, 13), 1 / 169)), (3, 5)) == pytest.approx(math.log(1 / 169))
    point = np.zeros((13, 13))
    point[2, 4] = 1
    assert joint_log_prob(CentralPolicy(point), (2, 4)) == 0.0
    assert joint_log_prob(CentralPolicy(point), (0, 0)) == -math.inf
    pol = SyncPolicy([0.5, 0.5], np.stack([np.stack([R, P]), np.stack([R, P])]))
    assert joint_log_prob(pol, (0, 0)) == pytest.approx(math.log(0.5))


# -- expressivity --------------------------------------------------------------------


def test_thirteen_components_represent_any_joint():
    rng = np.random.default_rng(9)
    for _ in range(20):
        J = rng.dirichlet(np.full(169, 0.3)).reshape(13, 13)
        mix = mixture_from_joint(J)
        assert mix.m == 13
        assert _tv(assemble_joint(mix), J) <= 0.02


def test_product_of_marginals_shapes():
    J = np.full((13, 13, 13), 1 / 2197)
    np.testing.assert_allclose(product_of_marginals(J), J)


# -- CSV -----------------------------------------------------------------------------


def test_csv_round_trip():
    rng = np.random.default_rng(10)
    J = rng.dirichlet(np.ones(169)).reshape(13, 13)
    assert np.array_equal(joint_from_csv(joint_to_csv(J)), J)
    labels = [f"a{i}" for i in range(13)]
    text = joint_to_csv(J, labels)
    assert text.splitlines()[0].startswith(",a0,a1")
    assert np.array_equal(joint_from_csv(text), J)
