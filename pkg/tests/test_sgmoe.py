import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spheremoe import grad as G
from spheremoe.config import MoeConfig
from spheremoe.errors import ConfigError
from spheremoe.grad import Tape, Tensor, backward, grad_check
from spheremoe.sgmoe import (
    SGMoE, GateDecision, expert_entropy, load_balance_loss, top_k_indices,
)


def make(n_routed=6, top_k=3, n_shared=1, variant="anatomy", dim=4, ds=3, seed=0, **kw):
    cfg = MoeConfig(n_routed=n_routed, top_k=top_k, n_shared=n_shared, hidden=5,
                    router_hidden=4, variant=variant, **kw)
    return SGMoE(dim, cfg, ds, np.random.default_rng(seed), "f64")


def test_top_k_ties_go_to_lower_index():
    s = np.array([[1.0, 3.0, 3.0, 0.0], [2.0, 2.0, 2.0, 2.0]])
    assert top_k_indices(s, 2).tolist() == [[1, 2], [0, 1]]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 12), st.sampled_from(["softmax_topk", "sigmoid_norm"]),
       st.integers(0, 1000))
def test_topk_distinct_and_weights_normalized(n, k, N, norm, seed):
    k = min(k, n)
    layer = make(n_routed=n, top_k=k, seed=seed, gate_norm=norm)
    rng = np.random.default_rng(seed)
    gate = layer.route(Tensor(rng.normal(size=(N, 4))), Tensor(rng.normal(size=(N, 3))))
    assert gate.expert_indices.shape == (N, k)
    for row in gate.expert_indices:
        assert len(set(row.tolist())) == k
    assert np.all(np.abs(gate.weights.sum(axis=1) - 1.0) <= 1e-6)
    assert np.all(gate.weights >= 0)


def test_two_expert_top1_hand_oracle():
    layer = make(n_routed=2, top_k=1, n_shared=0, dim=2, ds=1)
    e = Tensor(np.array([[0.5, -1.0], [2.0, 0.3], [-0.7, 0.1]]))
    s = Tensor(np.array([[1.0], [-1.0], [0.0]]))
    out, gate = layer(e, s)
    scores = gate.raw_scores
    for t in range(3):
        j = 0 if scores[t, 0] >= scores[t, 1] else 1
        assert gate.expert_indices[t, 0] == j
        assert gate.weights[t, 0] == 1.0
        ref = layer.experts[j](Tensor(e.data[t:t + 1])).data[0]
        assert np.allclose(out.data[t], ref, atol=1e-12)


def test_shared_experts_always_apply():
    layer = make(n_routed=3, top_k=1, n_shared=2, dim=2, ds=1)
    e = Tensor(np.random.default_rng(1).normal(size=(4, 2)))
    s = Tensor(np.zeros((4, 1)))
    out, gate = layer(e, s)
    ref = np.zeros((4, 2))
    for t in range(4):
        x = Tensor(e.data[t:t + 1])
        ref[t] = layer.experts[gate.expert_indices[t, 0]](x).data[0]
        ref[t] += sum(sh(x).data[0] for sh in layer.shared)
    assert np.allclose(out.data, ref, atol=1e-12)


def test_unselected_experts_get_exactly_zero_gradient():
    layer = make(n_routed=8, top_k=2, n_shared=1, seed=3)
    rng = np.random.default_rng(3)
    e = Tensor(rng.normal(size=(3, 4)))
    s = Tensor(rng.normal(size=(3, 3)))
    with Tape() as tape:
        out, gate = layer(e, s)
        loss = G.sum(G.mul(out, out))
    used = set(gate.expert_indices.reshape(-1).tolist())
    assert len(used) < 8
    for i, ex in enumerate(layer.experts):
        grads = backward(loss, tape, ex.parameters())
        if i in used:
            assert any(np.any(g != 0) for g in grads)
        else:
            assert all(np.all(g == 0) for g in grads)


def test_token_permutation_equivariance():
    layer = make(seed=4)
    rng = np.random.default_rng(4)
    e, s = rng.normal(size=(7, 4)), rng.normal(size=(7, 3))
    perm = rng.permutation(7)
    out, gate = layer(Tensor(e), Tensor(s))
    out_p, gate_p = layer(Tensor(e[perm]), Tensor(s[perm]))
    assert np.array_equal(gate_p.expert_indices, gate.expert_indices[perm])
    assert np.allclose(out_p.data, out.data[perm], atol=1e-12)


def test_routing_depends_on_structure_only_when_used():
    rng = np.random.default_rng(5)
    e = Tensor(rng.normal(size=(20, 4)))
    s1, s2 = Tensor(rng.normal(size=(20, 3))), Tensor(rng.normal(size=(20, 3)))
    none = make(variant="none", seed=5)
    assert none.route(e, s1).same_routing(none.route(e, s2))
    assert none.route(e, None).same_routing(none.route(e, s1))
    anat = make(variant="anatomy", seed=5)
    assert not anat.route(e, s1).same_routing(anat.route(e, s2))
    with pytest.raises(ConfigError):
        anat.route(e, None)
    only = make(variant="anatomy", router_input="struct_only", seed=5)
    e2 = Tensor(rng.normal(size=(20, 4)))
    assert only.route(e, s1).same_routing(only.route(e2, s1))


def test_config_errors():
    with pytest.raises(ConfigError):
        make(n_routed=2, top_k=3)
    layer = make()
    e = Tensor(np.zeros((2, 4)))
    with pytest.raises(ConfigError):
        layer.route(e, Tensor(np.zeros((2, 3))), frozen=np.zeros((2, 2), dtype=int))


def _gate(indices, raw):
    indices = np.asarray(indices)
    return GateDecision(indices, np.full(indices.shape, 1.0 / indices.shape[1]), np.asarray(raw, float))


def test_load_balance_uniform_is_one():
    n = 4
    idx = np.array([[0, 1], [2, 3], [1, 0], [3, 2]])
    g = _gate(idx, np.zeros((4, n)))
    assert load_balance_loss([g]).item() == pytest.approx(1.0, abs=1e-12)


def test_load_balance_collapse_equals_n():
    idx = np.zeros((5, 1), dtype=int)
    raw = np.zeros((5, 4))
    raw[:, 0] = 50.0  # softmax mass all on expert 0
    g = _gate(idx, raw)
    assert load_balance_loss([g]).item() == pytest.approx(4.0, rel=1e-9)
    assert load_balance_loss([g], n_routed=4).item() == pytest.approx(4.0, rel=1e-9)
    with pytest.raises(ConfigError):
        load_balance_loss([g], n_routed=2)
    with pytest.raises(ConfigError):
        load_balance_loss([])


def test_expert_entropy():
    g = _gate(np.array([[0, 1], [2, 3]]), np.zeros((2, 4)))
    assert expert_entropy([g], 4) == pytest.approx(np.log(4))
    g = _gate(np.zeros((3, 1), dtype=int), np.zeros((3, 4)))
    assert expert_entropy([g], 4) == 0.0


@pytest.mark.parametrize("norm", ["softmax_topk", "sigmoid_norm"])
def test_grad_check_frozen_routing_f64(norm):
    layer = make(n_routed=5, top_k=2, n_shared=1, seed=6, gate_norm=norm)
    rng = np.random.default_rng(6)
    e = G.parameter(rng.normal(size=(4, 4)))
    s = G.parameter(rng.normal(size=(4, 3)))
    frozen = layer.route(e, s).expert_indices
    target = Tensor(rng.normal(size=(4, 4)))

    def f():
        out, gate = layer(e, s, frozen=frozen)
        return G.add(G.mse(out, target), G.scale(load_balance_loss([gate]), 0.1))

    res = grad_check(f, [e, s] + layer.parameters())
    assert res.max_rel_err < 1e-5
