import numpy as np
import pytest

from sparsecomm import numerics as nm
from sparsecomm.agents import (AgentState, Message, ModelConfig, VocabMask,
                               act_and_decode, aggregate, apply_vocab_mask,
                               encode, gate, init_params, initial_state,
                               make_message, recipients_of, step_team)
from sparsecomm.numerics import ConfigurationError


def small_cfg(**kw):
    defaults = dict(obs_dim=4, n_actions=3, n_agents=3, hidden=8, d_m=4,
                    n_prototypes=4, message_mode="discrete")
    defaults.update(kw)
    return ModelConfig(**defaults)


def zero_params(cfg):
    p = init_params(cfg, 0)
    for name, t in p.items():
        if name != "proto.bank":
            t.data[:] = 0.0
    return p


# ---------------------------------------------------------------------------
# encode


def test_encode_zero_params_zero_state_gives_zero_hidden():
    cfg = small_cfg()
    p = zero_params(cfg)
    h = encode(np.zeros(4), initial_state(cfg), p, cfg)
    assert np.array_equal(h.data, np.zeros(8))


def test_encode_deterministic():
    cfg = small_cfg()
    p = init_params(cfg, 1)
    obs_seq = np.random.default_rng(0).normal(size=(5, 4))
    outs = []
    for _ in range(2):
        state = initial_state(cfg)
        for obs in obs_seq:
            state = AgentState(h=encode(obs, state, p, cfg), ht=state.ht)
        outs.append(state.h.data.copy())
    assert np.array_equal(outs[0], outs[1])


def test_encode_dim_mismatch_fatal():
    cfg = small_cfg()
    p = init_params(cfg, 1)
    with pytest.raises(ConfigurationError):
        encode(np.zeros(5), initial_state(cfg), p, cfg)


# ---------------------------------------------------------------------------
# messages


def test_discrete_message_is_bank_member():
    cfg = small_cfg()
    p = init_params(cfg, 2)
    h = encode(np.ones(4), initial_state(cfg), p, cfg)
    msg = make_message(h, p, cfg)
    assert msg.mode == "discrete"
    assert any(np.array_equal(msg.vector.data, row) for row in p["proto.bank"].data)
    assert np.array_equal(msg.vector.data, p["proto.bank"].data[msg.token_id])


def test_continuous_message_zero_projection():
    cfg = small_cfg(message_mode="continuous")
    p = init_params(cfg, 2)
    p["msg.W"].data[:] = 0.0
    h = encode(np.ones(4), initial_state(cfg), p, cfg)
    msg = make_message(h, p, cfg)
    assert msg.token_id is None
    assert np.array_equal(msg.vector.data, np.zeros(4))


def test_same_hidden_same_message():
    cfg = small_cfg()
    p = init_params(cfg, 3)
    h = encode(np.ones(4), initial_state(cfg), p, cfg)
    m1, m2 = make_message(h, p, cfg), make_message(h, p, cfg)
    assert m1.token_id == m2.token_id
    assert np.array_equal(m1.vector.data, m2.vector.data)


# ---------------------------------------------------------------------------
# gating


def test_gate_all_open_probability_one():
    cfg = small_cfg()
    p = init_params(cfg, 4)
    p["gate.W"].data[:] = 0.0
    p["gate.b"].data[:] = 50.0  # sigmoid saturates to 1
    h = encode(np.ones(4), initial_state(cfg), p, cfg)
    g = gate(h, p, cfg, rng=np.random.default_rng(0))
    assert g.bits.tolist() == [1, 1]


def test_gate_all_closed_probability_zero():
    cfg = small_cfg()
    p = init_params(cfg, 4)
    p["gate.W"].data[:] = 0.0
    p["gate.b"].data[:] = -50.0
    h = encode(np.ones(4), initial_state(cfg), p, cfg)
    g = gate(h, p, cfg, rng=np.random.default_rng(0))
    assert g.bits.tolist() == [0, 0]


def test_gate_forced_open_bypasses_head():
    cfg = small_cfg()
    p = init_params(cfg, 4)
    p["gate.b"].data[:] = -50.0  # head says closed; bypass wins
    h = encode(np.ones(4), initial_state(cfg), p, cfg)
    g = gate(h, p, cfg, force_open=True)
    assert g.bits.tolist() == [1, 1]
    assert g.probs is None and g.logits is None  # no gradient path


def test_open_gate_edge_count_is_n_times_n_minus_1():
    cfg = small_cfg()
    p = init_params(cfg, 5)
    states = [initial_state(cfg) for _ in range(3)]
    obs = [np.ones(4)] * 3
    out = step_team(p, cfg, states, obs, [True] * 3, force_open=True,
                    greedy=True)
    assert out.emitted.sum() == 3 * 2
    assert out.opportunities.sum() == 3 * 2


# ---------------------------------------------------------------------------
# vocabulary mask


def test_empty_mask_passes_message_unchanged():
    msg = Message("discrete", nm.constant([1.0, 2.0]), 3)
    assert apply_vocab_mask(msg, 1, VocabMask()) is msg
    assert apply_vocab_mask(msg, 1, None) is msg


def test_full_mask_suppresses_everything():
    cfg = small_cfg()
    p = init_params(cfg, 6)
    mask = VocabMask((t, -1) for t in range(cfg.n_prototypes))
    states = [initial_state(cfg) for _ in range(3)]
    out = step_team(p, cfg, states, [np.ones(4)] * 3, [True] * 3,
                    force_open=True, vocab_mask=mask, greedy=True)
    assert out.emitted.sum() == 0


def test_mask_is_per_recipient():
    msg = Message("discrete", nm.constant([0.0]), 3)
    mask = VocabMask([(3, 2)])
    assert apply_vocab_mask(msg, 2, mask) is None
    assert apply_vocab_mask(msg, 1, mask) is msg


def test_mask_idempotent_and_content_preserving():
    msg = Message("discrete", nm.constant([1.0, -1.0]), 0)
    mask = VocabMask([(5, 1)])
    once = apply_vocab_mask(msg, 1, mask)
    twice = apply_vocab_mask(once, 1, mask)
    assert once is msg and twice is msg
    assert np.array_equal(msg.vector.data, [1.0, -1.0])


def test_mask_continuous_without_table_fatal():
    msg = Message("continuous", nm.constant([0.5, 0.5]), None)
    with pytest.raises(ConfigurationError):
        apply_vocab_mask(msg, 0, VocabMask([(0, 0)]))


def test_monotone_suppression():
    # M1 subset of M2: deliveries under M2 are a subset of those under M1
    cfg = small_cfg()
    p = init_params(cfg, 7)
    rng = np.random.default_rng(0)
    m1 = VocabMask([(0, 1)])
    m2 = VocabMask([(0, 1), (1, 2), (2, -1)])
    assert m1.issubset(m2)
    for trial in range(20):
        obs = [rng.normal(size=4) for _ in range(3)]
        states = [initial_state(cfg) for _ in range(3)]
        d1 = step_team(p, cfg, states, obs, [True] * 3, force_open=True,
                       vocab_mask=m1, greedy=True).delivered
        d2 = step_team(p, cfg, states, obs, [True] * 3, force_open=True,
                       vocab_mask=m2, greedy=True).delivered
        assert set(d2) <= set(d1)


def test_mask_file_round_trip(tmp_path):
    mask = VocabMask([(0, 1), (3, -1), (2, 0)], checkpoint_hash="ab12")
    path = tmp_path / "mask.txt"
    mask.save(path)
    back = VocabMask.load(path)
    assert back.entries == mask.entries
    assert back.checkpoint_hash == "ab12"
    with pytest.raises(ConfigurationError):
        bad = tmp_path / "bad.txt"
        bad.write_text("0,1\n")
        VocabMask.load(bad)


# ---------------------------------------------------------------------------
# aggregation


def test_aggregate_mean():
    out = aggregate([nm.constant([1.0, 0.0]), nm.constant([0.0, 1.0])], 2)
    assert np.allclose(out.data, [0.5, 0.5])


def test_aggregate_empty_is_zero():
    assert np.array_equal(aggregate([], 2).data, [0.0, 0.0])


def test_aggregate_single_is_identity():
    out = aggregate([nm.constant([0.3, -0.7])], 2)
    assert np.allclose(out.data, [0.3, -0.7])


def test_aggregate_permutation_invariant():
    rng = np.random.default_rng(1)
    vecs = [rng.normal(size=4) for _ in range(5)]
    a = aggregate([nm.constant(v) for v in vecs], 4).data
    order = rng.permutation(5)
    b = aggregate([nm.constant(vecs[i]) for i in order], 4).data
    assert np.allclose(a, b)


# ---------------------------------------------------------------------------
# policy / value / decoder heads


def test_policy_softmax_sums_to_one_and_decoder_shape():
    cfg = small_cfg()
    p = init_params(cfg, 8)
    state = initial_state(cfg)
    h = encode(np.ones(4), state, p, cfg)
    logits, value, decoded, ht = act_and_decode(state, h, nm.zeros(4), p, cfg)
    probs = nm.softmax(logits)
    assert abs(probs.data.sum() - 1.0) <= 1e-9
    assert decoded.data.shape == (3 * 4,)
    assert value.data.shape == ()
    assert ht.data.shape == (8,)


def test_decoder_sum_variant_requires_matching_dims():
    with pytest.raises(ConfigurationError):
        small_cfg(decoder_input="sum")  # d_m != hidden
    cfg = small_cfg(decoder_input="sum", d_m=8)
    p = init_params(cfg, 9)
    state = initial_state(cfg)
    h = encode(np.ones(4), state, p, cfg)
    _logits, _value, decoded, _ht = act_and_decode(state, h, nm.zeros(8), p, cfg)
    assert decoded.data.shape == (3 * 4,)


def test_step_team_inactive_agents_skip_everything():
    cfg = small_cfg()
    p = init_params(cfg, 10)
    states = [initial_state(cfg) for _ in range(3)]
    obs = [np.ones(4), np.zeros(4), np.ones(4)]
    out = step_team(p, cfg, states, obs, [True, False, True],
                    force_open=True, greedy=True)
    assert out.actions[1] is None
    assert out.messages[1] is None
    assert out.emitted[1] == 0
    # two live agents exchange only with each other
    assert out.emitted.sum() == 2
    assert {(s, r) for s, r, _ in out.delivered} == {(0, 2), (2, 0)}


def test_parameter_init_bounds_and_prototype_distinctness():
    cfg = small_cfg(hidden=16, n_prototypes=8)
    p = init_params(cfg, 11)
    w = p["embed.W"].data
    assert np.abs(w).max() <= 1.0 / np.sqrt(cfg.obs_dim) + 1e-12
    bank = p["proto.bank"].data
    assert len({row.tobytes() for row in bank}) == 8


def test_recipients_ordering():
    assert recipients_of(1, 4) == [0, 2, 3]
