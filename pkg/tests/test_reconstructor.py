import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsgn import diffcore as dc
from rsgn import generator as gen
from rsgn import reconstructor as rec
from rsgn.diffcore import Tensor


def params_for(e=3, s=4, seed=0, mode="dot"):
    cfg = gen.GeneratorConfig(input_dim=s, hidden=2, embed_dim=e, relation_dim=e, encoder="g", edge_mode=mode)
    return cfg, rec.init_reconstructor(cfg, seed)


def test_content_vector_examples():
    s = np.array([[2.0, -1.0]])
    assert rec.content_vector(s, [1.0], 1).tolist() == [2.0, -1.0]
    assert rec.content_vector(np.ones((3, 2)), [0, 0, 0], 3).tolist() == [0.0, 0.0]
    assert rec.content_vector(np.eye(2), [0.5, 1.0], 2).tolist() == [0.25, 0.5]
    with pytest.raises(ValueError):
        rec.content_vector(np.zeros((0, 2)), [], 1)
    with pytest.raises(ValueError):
        rec.content_vector(np.eye(2), [1.0], 2)


def test_content_reward_examples():
    assert rec.content_reward([0.3, 0.1], [0.3, 0.1]) == 1.0
    assert rec.content_reward([math.sqrt(math.log(2))], [0.0]) == pytest.approx(0.5, abs=1e-15)
    assert rec.content_reward([1.0, 0.0], [0.0, 0.0]) == pytest.approx(math.exp(-1), abs=1e-15)
    with pytest.raises(ValueError):
        rec.content_reward([1.0], [1.0, 2.0])


def test_dependency_reward_examples():
    R = np.array([[1.0, 2.0], [0.0, 3.0]])
    assert rec.dependency_reward(R, R.copy()).item() == 1.0
    one = rec.dependency_reward([[math.sqrt(math.log(4))]], [[0.0]]).item()
    assert one == pytest.approx(0.25, abs=1e-15)
    two = rec.dependency_reward([[0.0, 0.0], [1.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]).item()
    assert two == pytest.approx((1 + math.exp(-1)) / 2, abs=1e-15)
    with pytest.raises(dc.DimensionError):
        rec.dependency_reward(np.zeros((2, 2)), np.zeros((1, 2)))


def test_summary_graph_single_shot_scalar_expansion(rng):
    _, params = params_for()
    s = rng.normal(size=(1, 4))
    R = rec.summary_graph_encode(Tensor(s), params, "dot").data
    e11 = -float((s @ params.w_phi.data @ (s @ params.w_psi.data).T)[0, 0])
    expected = np.maximum(e11 * (s @ params.w_tau.data) @ params.w_g.data, 0.0)
    np.testing.assert_allclose(R, expected, atol=1e-12)


def test_summary_graph_zero_params_and_empty(rng):
    _, params = params_for()
    for t in params.tensors():
        t.data[...] = 0.0
    assert np.all(rec.summary_graph_encode(Tensor(rng.normal(size=(3, 4))), params, "gaussian").data == 0.0)
    with pytest.raises(ValueError):
        rec.summary_graph_encode(Tensor(np.zeros((0, 4))), params, "dot")


def test_summary_graph_two_shot_hand_matrix(rng):
    _, params = params_for(mode="gaussian")
    s = rng.normal(size=(2, 4))
    phi, psi = s @ params.w_phi.data, s @ params.w_psi.data
    E = np.array([[math.exp(-phi[i] @ psi[j]) for j in range(2)] for i in range(2)])
    expected = np.maximum(E @ (s @ params.w_tau.data) @ params.w_g.data, 0.0)
    np.testing.assert_allclose(rec.summary_graph_encode(Tensor(s), params, "gaussian").data, expected, atol=1e-12)


def test_primed_params_are_separate_storage():
    cfg = gen.GeneratorConfig(input_dim=4, hidden=3)
    g, r = gen.init_generator(cfg, 0), rec.init_reconstructor(cfg, 0)
    assert r.w_g.shape == g.w_g.shape
    assert all(not np.shares_memory(a.data, b.data) for a in r.tensors() for b in g.tensors())


@settings(max_examples=25)
@given(st.integers(0, 2**31), st.sampled_from(gen.EDGE_MODES))
def test_reward_ranges(seed, mode):
    rng = np.random.default_rng(seed)
    _, params = params_for(seed=seed, mode=mode)
    for _ in range(40):
        m = int(rng.integers(1, 8))
        shots = rng.normal(size=(m, 4)) * rng.uniform(0.1, 3)
        R = np.abs(rng.normal(size=(m, 3)))
        K = np.flatnonzero(rng.random(m) < 0.5)
        if K.size == 0:
            K = np.array([0])
        bundle, _ = rec.episode_reward(shots, R, rng.random(m), K, params, mode)
        assert 0.0 < bundle.content <= 1.0
        assert 0.0 < bundle.dependency <= 1.0


def test_full_selection_with_predicted_weights_gives_unit_content(rng):
    _, params = params_for()
    shots, p = rng.normal(size=(5, 4)), rng.random(5)
    bundle, _ = rec.episode_reward(shots, np.zeros((5, 3)), p, np.arange(5), params, "dot", "content")
    assert bundle.content == 1.0 and bundle.dependency == 0.0


def test_reward_is_order_invariant(rng):
    _, params = params_for(seed=4)
    shots, R, w = rng.normal(size=(6, 4)), np.abs(rng.normal(size=(6, 3))), rng.random(6)
    K = np.array([1, 3, 4])
    perm = np.array([4, 0, 5, 2, 1, 3])
    inv = np.argsort(perm)
    a, _ = rec.episode_reward(shots, R, w, K, params, "dot")
    b, _ = rec.episode_reward(shots[perm], R[perm], w[perm], np.sort(inv[K]), params, "dot")
    assert a.content == pytest.approx(b.content, abs=1e-14)
    assert a.dependency == pytest.approx(b.dependency, abs=1e-14)


def test_component_switches(rng):
    _, params = params_for()
    shots, R = rng.normal(size=(3, 4)), np.abs(rng.normal(size=(3, 3)))
    none, t = rec.episode_reward(shots, R, np.ones(3), [0], params, "dot", "none")
    assert none.total == 0.0 and t is None
    dep, t = rec.episode_reward(shots, R, np.ones(3), [0, 2], params, "dot", "dep")
    assert dep.content == 0.0 and t.item() == dep.dependency
    with pytest.raises(ValueError):
        rec.episode_reward(shots, R, np.ones(3), [0], params, "dot", "bogus")


def test_dependency_tensor_reaches_only_primed_params(rng):
    cfg, params = params_for()
    shots, R = rng.normal(size=(4, 4)), np.abs(rng.normal(size=(4, 3)))
    with dc.Tape() as tape:
        _, ld = rec.episode_reward(shots, R, np.ones(4), [0, 1, 3], params, "dot", "dep")
    tape.backward(ld)
    assert any(np.any(t.grad != 0) for t in params.tensors())
