import numpy as np
import pytest

import straightline as sl
from advnav import diffcore as dc
from advnav.diffcore import Tape, Tensor, backward, max_rel_error, numeric_gradient
from advnav.navigator import (ModelDims, Navigator, greedy_action, sample_action)

DIMS = ModelDims(d_w=8, d_v=6, d_p=5, d_h=7)
VOCAB = 12


def make_nav(seed=0, dims=DIMS, dtype=np.float32):
    return Navigator.create(np.random.default_rng(seed), VOCAB, dims, dtype=dtype)


def test_encode_shapes():
    nav = make_nav()
    enc = nav.encode(None, (1, 2, 3, 4, 5), target_set=(1, 3))
    assert enc.u.values.shape == (5, DIMS.d_w)
    assert enc.f_w.values.shape == (2, DIMS.d_w)
    np.testing.assert_array_equal(enc.f_w.values[0], enc.u.values[1])


def test_encode_rejects_empty():
    with pytest.raises(ValueError):
        make_nav().encode(None, ())


def test_swapping_identical_tokens_leaves_encoding_unchanged():
    nav = make_nav(3)
    tokens = (2, 7, 4, 7, 5)
    swapped = (2, 7, 4, 7, 5)  # positions 1 and 3 hold the same token
    a = nav.encode(None, tokens).u.values
    b = nav.encode(None, swapped).u.values
    assert np.array_equal(a, b)


def test_zero_language_attention_weights_give_uniform_alpha_w():
    nav = make_nav(1)
    nav.params["w_u"] = Tensor(np.zeros((DIMS.d_w, DIMS.d_h)))
    enc = nav.encode(None, (1, 2, 3, 4, 5), target_set=(0, 2))
    views = dc.constant(np.random.default_rng(0).normal(size=(4, DIMS.d_v)))
    out, _ = nav.decode_step(None, enc, views, nav.initial_state())
    np.testing.assert_allclose(out.alpha_w.values, np.full((5, 1), 0.2), atol=1e-6)


def test_zero_action_head_gives_uniform_policy():
    nav = make_nav(1)
    nav.params["w_a"] = Tensor(np.zeros((DIMS.d_v, DIMS.d_h)))
    enc = nav.encode(None, (1, 2, 3), target_set=(0,))
    views = dc.constant(np.random.default_rng(0).normal(size=(4, DIMS.d_v)))
    out, _ = nav.decode_step(None, enc, views, nav.initial_state())
    np.testing.assert_allclose(out.p_n.values, np.full((4, 1), 0.25), atol=1e-6)


def test_zero_reasoning_head_gives_uniform_p_c():
    nav = make_nav(1)
    nav.params["w_e"] = Tensor(np.zeros((DIMS.d_w, DIMS.d_p)))
    enc = nav.encode(None, (1, 2, 3, 4), target_set=(0, 2, 3))
    h_tilde = dc.constant(np.random.default_rng(2).normal(size=(1, DIMS.d_h)))
    p_c = nav.predict_attacked_word(None, h_tilde, enc.f_w)
    np.testing.assert_allclose(p_c.values, np.full((3, 1), 1 / 3), atol=1e-6)


def test_single_target_p_c_is_one():
    nav = make_nav(1)
    enc = nav.encode(None, (1, 2, 3), target_set=(1,))
    h_tilde = dc.constant(np.random.default_rng(2).normal(size=(1, DIMS.d_h)))
    p_c = nav.predict_attacked_word(None, h_tilde, enc.f_w)
    np.testing.assert_allclose(p_c.values, [[1.0]], atol=1e-7)


def test_decode_rejects_empty_views():
    nav = make_nav()
    enc = nav.encode(None, (1, 2))
    with pytest.raises(ValueError):
        nav.decode_step(None, enc, dc.constant(np.zeros((0, DIMS.d_v))),
                        nav.initial_state())


@pytest.mark.parametrize("seed", range(5))
def test_full_step_matches_straight_line_oracle(seed):
    rng = np.random.default_rng(seed)
    nav = make_nav(seed, dtype=np.float64)
    tokens = tuple(rng.integers(0, VOCAB, size=6))
    targets = (1, 3, 4)
    enc = nav.encode(None, tokens, target_set=targets)
    views = dc.constant(rng.normal(size=(5, DIMS.d_v)), dtype=np.float64)
    state = nav.initial_state()

    p = sl.np_params(nav.params)
    u, f_w = sl.encode(p, tokens, targets, DIMS.d_w)
    np.testing.assert_allclose(enc.u.values, u, atol=1e-6)

    h_tilde = np.zeros((1, DIMS.d_h))
    cell = np.zeros((1, DIMS.d_h))
    prev_a = p["a0"]
    for step in range(3):
        out, new_state = nav.decode_step(None, enc, views, state)
        ref = sl.nav_step(p, u, f_w, views.values, h_tilde, cell, prev_a)
        np.testing.assert_allclose(out.alpha_v.values.reshape(-1), ref["alpha_v"], atol=1e-6)
        np.testing.assert_allclose(out.f_v.values, ref["f_v"], atol=1e-6)
        np.testing.assert_allclose(out.alpha_w.values.reshape(-1), ref["alpha_w"], atol=1e-6)
        np.testing.assert_allclose(out.h_tilde.values, ref["h_tilde"], atol=1e-6)
        np.testing.assert_allclose(out.p_n.values, ref["p_n"].reshape(-1, 1), atol=1e-6)
        np.testing.assert_allclose(out.p_c.values, ref["p_c"].reshape(-1, 1), atol=1e-6)
        action = 1 + (step % (views.values.shape[0] - 1))
        state = nav.with_action(new_state, views, action)
        h_tilde, cell = ref["h_tilde"], ref["cell"]
        prev_a = views.values[action:action + 1]


def test_distributions_are_simplexes():
    rng = np.random.default_rng(9)
    nav = make_nav(9)
    enc = nav.encode(None, tuple(rng.integers(0, VOCAB, size=7)), target_set=(0, 2, 5))
    views = dc.constant(rng.normal(size=(4, DIMS.d_v)))
    out, _ = nav.decode_step(None, enc, views, nav.initial_state())
    for dist in (out.alpha_v, out.alpha_w, out.p_n, out.p_c):
        vals = dist.values.reshape(-1)
        assert abs(vals.sum() - 1.0) < 1e-6
        assert np.all(vals >= 0)


def test_argmax_invariant_to_positive_scaling_of_fused_state():
    rng = np.random.default_rng(4)
    nav = make_nav(4)
    views = dc.constant(rng.normal(size=(5, DIMS.d_v)))
    h_tilde = rng.normal(size=(1, DIMS.d_h))
    logits = views.values @ nav.params["w_a"].values @ h_tilde.T
    for c in (0.1, 2.0, 17.0):
        scaled = views.values @ nav.params["w_a"].values @ (c * h_tilde).T
        assert np.argmax(scaled) == np.argmax(logits)


def test_encoder_gradients_match_finite_differences():
    nav = make_nav(11, dims=ModelDims(d_w=4, d_v=4, d_p=3, d_h=4), dtype=np.float64)
    tokens = (1, 5, 2)

    def run():
        t = Tape()
        enc = nav.encode(t, tokens, target_set=(0, 2))
        return t, dc.sum_reduce(t, enc.u)

    t, loss = run()
    backward(t, loss)
    emb = nav.params["embed"]
    analytic = emb.grad.copy()
    numeric = numeric_gradient(lambda: run()[1].item(), [emb])[0]
    assert max_rel_error(analytic, numeric) < 1e-4


def test_step_gradients_match_finite_differences():
    dims = ModelDims(d_w=4, d_v=4, d_p=3, d_h=4)
    nav = make_nav(13, dims=dims, dtype=np.float64)
    rng = np.random.default_rng(13)
    tokens = (1, 5, 2, 7)
    views = Tensor(rng.normal(size=(3, dims.d_v)), dtype=np.float64)

    def run():
        t = Tape()
        enc = nav.encode(t, tokens, target_set=(1, 3))
        out, _ = nav.decode_step(t, enc, views, nav.initial_state())
        loss = dc.add(t, dc.cross_entropy(t, out.p_n, 1),
                      dc.cross_entropy(t, out.p_c, 0))
        return t, loss

    t, loss = run()
    backward(t, loss)
    names = sorted(nav.params)
    analytic = {n: nav.params[n].grad.copy() for n in names}
    numeric = numeric_gradient(lambda: run()[1].item(),
                               [nav.params[n] for n in names])
    for n, num in zip(names, numeric):
        assert max_rel_error(analytic[n], num) < 1e-4, n


def test_greedy_and_sample_action():
    p = dc.constant([[0.1], [0.7], [0.2]])
    assert greedy_action(p) == 1
    rng = np.random.default_rng(0)
    draws = [sample_action(p, rng) for _ in range(2000)]
    freq = np.bincount(draws, minlength=3) / len(draws)
    np.testing.assert_allclose(freq, [0.1, 0.7, 0.2], atol=0.04)


def test_imitation_loss_strictly_decreases_when_overfitting():
    from advnav import world as w
    from advnav import instruct as ins
    g = w.generate_world(w.WorldConfig(seed=1))
    ep0 = w.make_episode(g, 0, int(np.argmax([w.geodesic_distance(g, 0, i)
                                              for i in range(g.n_nodes)])))
    instr = ins.generate_instruction(g, ep0, seed=0)
    nav = Navigator.create(np.random.default_rng(0), len(ins.build_vocabulary()),
                           ModelDims(d_w=16, d_v=g.config.d_v, d_p=16, d_h=16))

    losses = []
    for _ in range(50):
        t = Tape()
        enc = nav.encode(t, instr.tokens, target_set=instr.target_set)
        state = nav.initial_state()
        ep = ep0
        terms = []
        while not ep.done:
            views = dc.constant(g.candidate_views(ep.current))
            out, proto = nav.decode_step(t, enc, views, state)
            teach = w.teacher_action(ep)
            terms.append(dc.cross_entropy(t, out.p_n, teach))
            state = nav.with_action(proto, views, teach)
            ep = w.step(ep, teach)  # teacher forcing
        loss = terms[0]
        for term in terms[1:]:
            loss = dc.add(t, loss, term)
        losses.append(loss.item())
        backward(t, loss)
        for p in nav.params.values():
            p.values = (p.values - 0.05 * p.grad).astype(p.values.dtype)
        dc.zero_grads(nav.params)
    assert all(b < a for a, b in zip(losses, losses[1:])), losses
