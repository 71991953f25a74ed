import numpy as np
import pytest

import straightline as sl
from advnav import diffcore as dc
from advnav import instruct as ins
from advnav import trainer as tr
from advnav import world as w
from advnav.attacker import Attacker
from advnav.checkpoint import params_digest
from advnav.diffcore import Tape
from advnav.navigator import ModelDims, Navigator

DIMS = ModelDims(d_w=16, d_v=32, d_p=16, d_h=16)


def make_items(n_worlds=2, episodes=4, seed=0):
    rng = np.random.default_rng(seed)
    items = []
    for ws in range(n_worlds):
        g = w.generate_world(w.WorldConfig(seed=ws))
        for e in range(episodes):
            while True:
                a, b = rng.choice(g.n_nodes, size=2, replace=False)
                if 2 <= len(w.shortest_path(g, int(a), int(b))) <= 4:
                    break
            ep = w.make_episode(g, int(a), int(b))
            instr = ins.generate_instruction(g, ep, seed=1000 * ws + e)
            items.append(tr.TrainItem(g, ep, instr))
    return items


def make_models(seed=0):
    vocab_size = len(ins.build_vocabulary())
    rng = np.random.default_rng(seed)
    nav = Navigator.create(rng, ins.build_vocabulary(), DIMS)
    att = Attacker.create(rng, ins.build_vocabulary(), DIMS)
    nav_val = tr.ValueNet.create(rng, DIMS.d_v)
    att_val = tr.ValueNet.create(rng, DIMS.d_v)
    return nav, att, nav_val, att_val


def buf_of(rewards, values=None, bootstrap=0.0):
    b = tr.RolloutBuffer(bootstrap=bootstrap)
    for i, r in enumerate(rewards):
        b.transitions.append(tr.Transition(state=np.zeros(2), action=0, reward=r,
                                           value=0.0 if values is None else values[i]))
    return b


def test_returns_single_step():
    returns, advs = tr.compute_returns(buf_of([1.0], values=[0.25]), gamma=0.9)
    assert returns == [1.0]
    assert advs == [0.75]


def test_returns_two_steps():
    returns, _ = tr.compute_returns(buf_of([1.0, 1.0]), gamma=0.9)
    assert returns == pytest.approx([1.9, 1.0])


def test_returns_gamma_zero():
    returns, _ = tr.compute_returns(buf_of([2.0, -1.0, 3.0]), gamma=0.0)
    assert returns == [2.0, -1.0, 3.0]


def test_returns_bootstrap_uses_final_step_convention():
    returns, _ = tr.compute_returns(buf_of([1.0, 1.0], bootstrap=0.5), gamma=0.9)
    # bootstrap enters at gamma^(N-t): undamped at the last step
    assert returns == pytest.approx([1.0 + 0.9 * 1.5, 1.5])


@pytest.mark.parametrize("seed", range(8))
def test_returns_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    rewards = [float(r) for r in rng.choice([-3, -1, 1, 3], size=rng.integers(1, 9))]
    gamma = float(rng.uniform(0, 0.99))
    bootstrap = float(rng.normal())
    returns, _ = tr.compute_returns(buf_of(rewards, bootstrap=bootstrap), gamma)
    expect = sl.discounted_returns(rewards, gamma, bootstrap)
    np.testing.assert_allclose(returns, expect, atol=1e-6)


def test_advantage_identity():
    rng = np.random.default_rng(3)
    values = [float(v) for v in rng.normal(size=4)]
    buf = buf_of([1.0, -1.0, 1.0, 3.0], values=values)
    returns, advs = tr.compute_returns(buf, gamma=0.9)
    for r, v, a in zip(returns, values, advs):
        assert a == r - v


def test_returns_reject_empty_buffer():
    with pytest.raises(ValueError):
        tr.compute_returns(tr.RolloutBuffer(), 0.9)


def test_value_net_matches_oracle():
    rng = np.random.default_rng(0)
    vn = tr.ValueNet.create(rng, 6, dtype=np.float64)
    s = rng.normal(size=6)
    got = vn.forward(None, s).item()
    assert got == pytest.approx(sl.value(sl.np_params(vn.params), s.reshape(1, -1)))


def _bandit_update(reward_for, cfg, steps=1, seed=0):
    """One-state two-action bandit built from a tiny softmax policy."""
    rng = np.random.default_rng(seed)
    logits = dc.Tensor(np.zeros((2, 1)))
    vn = tr.ValueNet.create(rng, 2)
    history = []
    for _ in range(steps):
        t = Tape()
        p = dc.softmax(t, dc.tanh(t, logits))
        a = int(rng.integers(2))
        buf = tr.RolloutBuffer()
        trn = tr.Transition(state=np.ones(2), action=a, reward=reward_for(a),
                            dist=p, dist_index=a)
        trn.value_out = vn.forward(t, trn.state)
        trn.value = trn.value_out.item()
        buf.transitions.append(trn)
        returns, advs = tr.compute_returns(buf, cfg.gamma)
        tr.a2c_update(t, buf, returns, advs, {"w": logits}, vn.params, cfg)
        history.append(dc.softmax(None, dc.tanh(None, logits)).values.reshape(-1))
    return logits, vn, history


def test_bandit_reinforces_rewarded_action():
    cfg = tr.TrainConfig(lr=0.2, entropy_weight=0.0, value_weight=0.0, il_weight=0.0)
    rng = np.random.default_rng(1)
    logits = dc.Tensor(np.zeros((2, 1)))
    vn = tr.ValueNet.create(rng, 2)
    t = Tape()
    p = dc.softmax(t, dc.tanh(t, logits))
    before = p.values[0, 0]
    buf = tr.RolloutBuffer()
    trn = tr.Transition(state=np.ones(2), action=0, reward=1.0, dist=p, dist_index=0)
    buf.transitions.append(trn)
    returns, advs = tr.compute_returns(buf, cfg.gamma)
    assert advs == [1.0]
    tr.a2c_update(t, buf, returns, advs, {"w": logits}, vn.params, cfg)
    after = dc.softmax(None, dc.tanh(None, logits)).values[0, 0]
    assert after > before


def test_entropy_term_alone_moves_policy_toward_uniform():
    cfg = tr.TrainConfig(lr=0.5, entropy_weight=0.1, value_weight=0.0, il_weight=0.0)
    logits = dc.Tensor(np.array([[1.5], [-1.5]]))
    vn = tr.ValueNet.create(np.random.default_rng(0), 2)

    def entropy(vals):
        v = vals.reshape(-1)
        return float(-(v * np.log(v)).sum())

    ents = []
    for _ in range(20):
        t = Tape()
        p = dc.softmax(t, logits)
        ents.append(entropy(p.values))
        buf = tr.RolloutBuffer()
        # zero advantage, zero value error: only the entropy term acts
        trn = tr.Transition(state=np.ones(2), action=0, reward=0.0,
                            dist=p, dist_index=0, value=0.0)
        buf.transitions.append(trn)
        returns, advs = tr.compute_returns(buf, cfg.gamma)
        tr.a2c_update(t, buf, returns, advs, {"w": logits}, vn.params, cfg)
    final = dc.softmax(None, logits)
    ents.append(entropy(final.values))
    assert ents[-1] > ents[0]
    assert abs(final.values[0, 0] - 0.5) < abs(1.0 / (1 + np.exp(-3.0)) - 0.5)


def test_value_regression_converges_on_constant_reward():
    cfg = tr.TrainConfig(lr=0.05, entropy_weight=0.0, value_weight=1.0, il_weight=0.0)
    rng = np.random.default_rng(2)
    logits = dc.Tensor(np.zeros((2, 1)))
    vn = tr.ValueNet.create(rng, 2)
    s = np.ones(2)
    for _ in range(500):
        t = Tape()
        p = dc.softmax(t, dc.tanh(t, logits))
        buf = tr.RolloutBuffer()
        trn = tr.Transition(state=s, action=0, reward=1.0, dist=p, dist_index=0)
        trn.value_out = vn.forward(t, s)
        trn.value = trn.value_out.item()
        buf.transitions.append(trn)
        returns, advs = tr.compute_returns(buf, cfg.gamma)
        tr.a2c_update(t, buf, returns, advs, {"w": logits}, vn.params, cfg)
    assert abs(vn.forward(None, s).item() - 1.0) < 1e-2


def test_nan_gradient_aborts_update():
    cfg = tr.TrainConfig(lr=0.1)
    logits = dc.Tensor(np.zeros((2, 1)))
    vn = tr.ValueNet.create(np.random.default_rng(0), 2)
    t = Tape()
    p = dc.softmax(t, logits)
    buf = tr.RolloutBuffer()
    trn = tr.Transition(state=np.ones(2), action=0, reward=1.0, dist=p, dist_index=0)
    trn.value_out = vn.forward(t, np.ones(2))
    buf.transitions.append(trn)
    before = logits.values.copy()
    diag = tr.a2c_update(t, buf, [float("nan")], [float("nan")],
                         {"w": logits}, vn.params, cfg)
    assert diag["aborted"]
    np.testing.assert_array_equal(logits.values, before)


def test_rollout_clean_buffers_and_zero_sum():
    items = make_items()
    nav, att, nav_val, att_val = make_models()
    cfg = tr.TrainConfig()
    rng = np.random.default_rng(0)
    res = tr.rollout_episode(items[0], nav, None, "clean", rng, cfg,
                             nav_value=nav_val)
    assert res.att_buffer is None
    assert all(t.reward in (-3.0, -1.0, 1.0, 3.0) for t in res.nav_buffer.transitions)

    res = tr.rollout_episode(items[0], nav, att, "att_learn", rng, cfg,
                             att_value=att_val)
    nav_r = [t.reward for t in res.nav_buffer.transitions]
    att_r = [t.reward for t in res.att_buffer.transitions]
    assert [a + n for a, n in zip(att_r, nav_r)] == [0.0] * len(nav_r)


def test_rollout_perturbs_at_most_one_token_per_step():
    items = [it for it in make_items() if it.instruction.attackable]
    nav, att, nav_val, att_val = make_models()
    cfg = tr.TrainConfig()
    rng = np.random.default_rng(1)
    res = tr.rollout_episode(items[0], nav, att, "nav_learn", rng, cfg,
                             nav_value=nav_val, record_trace=True)
    for row in res.trace:
        assert "attacked_position" in row
        assert row["substitute_token"] != items[0].instruction.tokens[row["attacked_position"]]


def test_rollout_trace_prediction_matches_p_c():
    items = [it for it in make_items() if it.instruction.attackable]
    nav, att, nav_val, att_val = make_models()
    rng = np.random.default_rng(2)
    res = tr.rollout_episode(items[0], nav, att, "eval", rng, tr.TrainConfig(),
                             record_trace=True)
    for row in res.trace:
        assert row["predicted_target"] == int(np.argmax(row["p_c"]))


def test_aux_labels_equal_attacker_actions():
    items = [it for it in make_items() if it.instruction.attackable]
    nav, att, nav_val, att_val = make_models()
    rng = np.random.default_rng(3)
    res = tr.rollout_episode(items[0], nav, att, "nav_learn", rng,
                             tr.TrainConfig(), nav_value=nav_val,
                             record_trace=True)
    for trn, row in zip(res.nav_buffer.transitions, res.trace):
        assert trn.attacked_target == row["attacked_target"]


def test_alternation_log_matches_schedule():
    items = make_items(n_worlds=1, episodes=2)
    nav, att, nav_val, att_val = make_models()
    cfg = tr.TrainConfig(n_eta=3, n_pi=2, n_iter=2, lr=0.01)
    rng = np.random.default_rng(0)
    log = tr.adversarial_train(items, nav, att, nav_val, att_val, cfg, rng)
    assert log == ["eta", "eta", "eta", "pi", "pi", "eta", "eta", "eta", "pi", "pi"]


def test_frozen_player_bit_identical():
    items = make_items(n_worlds=1, episodes=2)
    nav, att, nav_val, att_val = make_models()
    cfg = tr.TrainConfig(lr=0.05)
    rng = np.random.default_rng(0)
    nav_digest = params_digest(nav.params)
    tr.train_attacker(items, nav, att, att_val, cfg, rng, iters=5)
    assert params_digest(nav.params) == nav_digest

    att_digest = params_digest(att.params)
    tr.train_navigator(items, nav, nav_val, cfg, rng, iters=5, att=att)
    assert params_digest(att.params) == att_digest


def test_attacker_reward_improves_against_frozen_navigator():
    items = make_items(n_worlds=2, episodes=6, seed=5)
    nav, att, nav_val, att_val = make_models(seed=5)
    cfg = tr.TrainConfig(lr=0.05)
    rng = np.random.default_rng(5)
    # give the navigator a short clean warm-up so attacks have signal
    tr.train_navigator(items, nav, nav_val, cfg, rng, iters=150)
    rewards = []
    tr.train_attacker(items, nav, att, att_val, cfg, rng, iters=120,
                      log_fn=lambda rec: rewards.append(rec["reward"]))
    first = np.mean(rewards[:30])
    last = np.mean(rewards[-30:])
    assert last > first


def test_training_is_deterministic_for_fixed_seed():
    def run():
        items = make_items(n_worlds=1, episodes=3)
        nav, att, nav_val, att_val = make_models(seed=7)
        rng = np.random.default_rng(42)
        tr.train_navigator(items, nav, nav_val, tr.TrainConfig(), rng, iters=10)
        return params_digest(nav.params)

    assert run() == run()
