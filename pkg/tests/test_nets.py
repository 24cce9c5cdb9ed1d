import numpy as np
import pytest

from gridfurn import diffmath as dm
from gridfurn.actions import Heading, build_coordination_tensor
from gridfurn.nets import (
    CentralModel,
    TboneConfig,
    TboneModel,
    agent_marginals,
    alpha_head,
    assemble_joint_tensor,
    build_model,
)
from gridfurn.policy import SyncPolicy, assemble_joint
from gridfurn.trainer import RolloutBuffer, TrainConfig, _chosen_log_prob, a3c_loss, advantages_of

SMALL = dict(obs_shape=(5, 3, 3), hidden=6, encoder_hidden=5)


def _inputs(rng, b=3, n=2, shape=(5, 3, 3)):
    return rng.random((b, n) + shape), rng.integers(0, 4, (b, n))


def test_output_shapes():
    cfg = TboneConfig(m=4, **SMALL)
    model = TboneModel(cfg)
    obs, hs = _inputs(np.random.default_rng(0))
    out = model.forward(obs, hs, model.initial_state(3))
    assert out.state.hidden.shape == (3, 2, 6)
    assert [m.shape for m in out.state.messages] == [(3, 2, 16), (3, 2, 16)]
    assert out.log_probs.shape == (3, 2, 4, 13)
    assert out.log_alpha.shape == (3, 4)
    assert out.values.shape == (3, 2)


def test_agent_swap_symmetry():
    cfg = TboneConfig(m=3, **SMALL)
    model = TboneModel(cfg)
    swapped = TboneModel(cfg)
    swapped.params["embed"].data[...] = model.params["embed"].data[::-1]
    obs, hs = _inputs(np.random.default_rng(1))
    a = model.forward(obs, hs, model.initial_state(3))
    b = swapped.forward(obs[:, ::-1], hs[:, ::-1], swapped.initial_state(3))
    np.testing.assert_allclose(b.state.hidden.numpy(), a.state.hidden.numpy()[:, ::-1], atol=1e-13)
    for ra, rb in zip(a.state.messages, b.state.messages):
        np.testing.assert_allclose(rb.numpy(), ra.numpy()[:, ::-1], atol=1e-13)
    np.testing.assert_allclose(b.log_probs.numpy(), a.log_probs.numpy()[:, ::-1], atol=1e-13)
    np.testing.assert_allclose(b.values.numpy(), a.values.numpy()[:, ::-1], atol=1e-13)


def test_alpha_head_zero_weights_is_uniform():
    rng = np.random.default_rng(2)
    params = {
        "alpha_w1": dm.parameter(np.zeros((32, 64))),
        "alpha_b1": dm.parameter(rng.normal(size=64)),
        "alpha_w2": dm.parameter(np.zeros((64, 64))),
        "alpha_b2": dm.parameter(rng.normal(size=64)),
        "alpha_w3": dm.parameter(np.zeros((64, 5))),
        "alpha_b3": dm.parameter(np.zeros(5)),
    }
    logits = alpha_head(dm.Tensor(rng.normal(size=(4, 32))), params)
    np.testing.assert_allclose(dm.softmax(logits).numpy(), 0.2, atol=1e-15)


def test_alpha_shapes_and_bias_width():
    model = TboneModel(TboneConfig(m=4, **SMALL))
    shapes = {k: model.params[k].shape for k in model.names if k.startswith("alpha")}
    assert shapes == {
        "alpha_w1": (32, 64),
        "alpha_b1": (64,),
        "alpha_w2": (64, 64),
        "alpha_b2": (64,),
        "alpha_w3": (64, 4),
        "alpha_b3": (4,),
    }


def test_each_agent_computes_the_same_alpha():
    model = TboneModel(TboneConfig(m=4, **SMALL))
    obs, hs = _inputs(np.random.default_rng(3))
    out = model.forward(obs, hs, model.initial_state(3))
    msgs = out.state.messages[1].numpy().reshape(3, -1)
    local = [dm.log_softmax(alpha_head(dm.Tensor(msgs.copy()), model.params)).numpy() for _ in range(2)]
    assert np.array_equal(local[0], local[1])
    assert np.array_equal(local[0], out.log_alpha.numpy())


def test_single_component_has_no_alpha():
    model = TboneModel(TboneConfig(m=1, **SMALL))
    obs, hs = _inputs(np.random.default_rng(4))
    out = model.forward(obs, hs, model.initial_state(3))
    assert out.log_alpha is None
    assert not any(k.startswith("alpha") for k in model.names)


def test_m1_sync_equals_marginal():
    sync = TboneModel(TboneConfig(m=1, policy="sync", **SMALL))
    marg = TboneModel(TboneConfig(m=1, policy="marginal", **SMALL))
    assert sync.names == marg.names
    marg.set_flat(sync.get_flat())
    obs, hs = _inputs(np.random.default_rng(5))
    a = sync.forward(obs, hs, sync.initial_state(3))
    b = marg.forward(obs, hs, marg.initial_state(3))
    assert np.array_equal(a.log_probs.numpy(), b.log_probs.numpy())
    assert np.array_equal(a.values.numpy(), b.values.numpy())


@pytest.mark.parametrize("policy, m", [("sync", 4), ("marginal", 1), ("marginal-no-comm", 1)])
def test_heads_are_distributions(policy, m):
    model = build_model(TboneConfig(m=m, policy=policy, **SMALL))
    obs, hs = _inputs(np.random.default_rng(6))
    out = model.forward(obs, hs, model.initial_state(3))
    probs = np.exp(out.log_probs.numpy())
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-9)
    if out.log_alpha is not None:
        np.testing.assert_allclose(np.exp(out.log_alpha.numpy()).sum(-1), 1.0, atol=1e-9)
    joint = assemble_joint_tensor(out, 2).numpy()
    np.testing.assert_allclose(joint.reshape(3, -1).sum(-1), 1.0, atol=1e-8)
    assert joint.min() >= 0


def test_differentiable_joint_matches_policy_algebra():
    model = TboneModel(TboneConfig(m=3, **SMALL))
    obs, hs = _inputs(np.random.default_rng(7))
    out = model.forward(obs, hs, model.initial_state(3))
    joint = assemble_joint_tensor(out, 2).numpy()
    for b in range(3):
        pol = SyncPolicy(np.exp(out.log_alpha.numpy()[b]), np.exp(out.log_probs.numpy()[b]))
        np.testing.assert_allclose(joint[b], assemble_joint(pol), atol=1e-14)
    margs = agent_marginals(assemble_joint_tensor(out, 2)).numpy()
    np.testing.assert_allclose(margs[:, 0], joint.sum(axis=2), atol=1e-15)


@pytest.mark.parametrize("n, size", [(2, 169), (3, 2197)])
def test_central_shapes(n, size):
    model = CentralModel(TboneConfig(n_agents=n, policy="central", **SMALL))
    rng = np.random.default_rng(8)
    obs, hs = _inputs(rng, n=n)
    out = model.forward(obs, hs, model.initial_state(3))
    assert out.log_probs.shape == (3, size)
    assert out.values.shape == (3, 1)
    joint = assemble_joint_tensor(out, n).numpy()
    assert joint.shape == (3,) + (13,) * n
    np.testing.assert_allclose(joint.reshape(3, -1).sum(-1), 1.0, atol=1e-8)
    assert model.n_params == CentralModel.count_params(model.config)


@pytest.mark.parametrize("n", [2, 3])
@pytest.mark.parametrize("m", [1, 2, 4, 13])
def test_sync_never_larger_than_central_at_default_width(n, m):
    sync = TboneModel(TboneConfig(n_agents=n, m=m))
    central = TboneConfig(n_agents=n, policy="central")
    assert sync.n_params <= CentralModel.count_params(central)


def test_oversized_mixture_is_rejected():
    with pytest.raises(ValueError):
        TboneModel(TboneConfig(n_agents=2, m=14, **SMALL))


def test_config_validation():
    with pytest.raises(ValueError):
        TboneConfig(m=0)
    with pytest.raises(ValueError):
        TboneConfig(rounds=3)
    with pytest.raises(ValueError):
        TboneConfig(policy="marginal", m=2)


def test_encoder_gradient_check():
    model = TboneModel(TboneConfig(m=2, seed=3, **SMALL))
    rng = np.random.default_rng(9)
    for p in model.parameters():
        p.data += rng.normal(0, 0.3, p.shape)
    obs, hs = _inputs(rng)
    w = rng.normal(size=(3, 2, 6))

    def f():
        out = model.forward(obs, hs, model.initial_state(3))
        return dm.tsum(dm.mul(out.state.hidden, w)) + dm.tsum(dm.mul(out.state.messages[1], 0.5))

    assert dm.grad_check(f, [model.params["enc_w1"], model.params["enc_b2"]]) <= 1e-4


@pytest.mark.parametrize(
    "policy, m, loss",
    [("sync", 3, "cordial"), ("marginal", 1, "entropy"), ("central", 1, "cordial"), ("sync", 2, "entropy"), ("marginal-no-comm", 1, "cordial")],
)
def test_end_to_end_gradient_check(policy, m, loss):
    model = build_model(TboneConfig(m=m, policy=policy, seed=1, hidden=5, encoder_hidden=4, alpha_hidden=6, obs_shape=(5, 3, 3)))
    rng = np.random.default_rng(0)
    # Jitter away from relu kinks at the zero-initialised biases.
    for p in model.parameters():
        p.data += rng.normal(0, 0.3, p.shape)
    B, T = 2, 3
    obs = rng.random((T, B, 2, 5, 3, 3))
    heads = rng.integers(0, 4, (T, B, 2))
    ma = rng.integers(0, 13, (T, B, 2))
    comps = rng.integers(0, m, (T, B))
    rew = rng.normal(size=(T, B, 2))
    done = rng.random((T, B)) < 0.3
    tc = TrainConfig(loss=loss, policy=policy, m=m)
    boot = np.array([0.1, -0.2])

    def rollout():
        st = model.initial_state(B)
        buf = RolloutBuffer(T)
        for t in range(T):
            out = model.forward(obs[t], heads[t], st)
            J = assemble_joint_tensor(out, 2)
            S = np.stack([build_coordination_tensor([Heading(h) for h in heads[t, b]]).mask for b in range(B)]).astype(float)
            buf.add(_chosen_log_prob(out, ma[t], comps[t]), out.values, rew[t], done[t], J, S, np.array([0.7, 0.3]))
            st = out.state
        return buf

    # The advantage is a constant of the policy-gradient surrogate, so hold it fixed.
    adv = advantages_of(rollout(), boot, 0.99)
    err = dm.grad_check(lambda: a3c_loss(rollout(), boot, tc, advantages=adv), model.parameters(), mode="tensor")
    assert err <= 1e-4
