"""Advantage actor-critic training for both players, plus the alternating
adversarial schedule.

Per episode one rollout is collected and one gradient step taken.  A rollout
walks the navigator step by step: visual attention first (its output is the
shared RL state), then the attacking player may substitute one word of the
original instruction, the navigator encodes whatever token sequence it
receives and finishes the step, and the environment moves.  Rewards are
framed zero-sum: whatever the attacker gains the navigator loses.

Returns follow the discounted accumulation with a terminal bootstrap term,
advantages are returns minus the critic's estimate, and the update ascends
the advantage-weighted log-likelihood and the policy entropy while
regressing the critic onto the returns.  The navigator additionally mixes
an imitation term against a shortest-path teacher and, on attacked steps, a
cross-entropy term asking it to name the attacked word.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import diffcore as dc
from . import world as wd
from .attacker import Attacker, AttackerEncoding, select_attack
from .checkpoint import params_digest
from .diffcore import Tape, Tensor
from .instruct import AttackAction, Instruction, apply_perturbation
from .navigator import Navigator, greedy_action, sample_action


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.9
    lr: float = 0.03
    momentum: float = 0.9
    rl_weight: float = 0.05
    entropy_weight: float = 0.01
    value_weight: float = 0.05
    il_weight: float = 1.0
    aux_weight: float = 0.5
    att_lr: float = 0.5            # the attacker learns from rewards alone,
    att_rl_weight: float = 1.0     # so its terms carry full weight
    att_value_weight: float = 0.5
    att_entropy_weight: float = 0.01
    att_gamma: float = 0.5         # short-horizon credit for substitutions
    attacked_fraction: float = 0.5 # share of attacked episodes in hardening
    harden_random: float = 0.3     # share of those using random substitutions
    iters_pretrain_nav: int = 2000
    iters_pretrain_att: int = 500
    iters_adversarial: int = 1500
    iters_finetune: int = 1500
    n_eta: int = 30             # navigator updates per alternation round
    n_pi: int = 10              # attacker updates per alternation round
    n_iter: int = 0             # alternation rounds; 0 derives from iters_adversarial
    grad_clip: float = 5.0
    nav_reward: str = "zero_sum"   # or "progress_delta"
    value_hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        for name in ("lr", "rl_weight", "entropy_weight", "value_weight",
                     "il_weight", "aux_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def rounds(self) -> int:
        if self.n_iter:
            return self.n_iter
        return max(1, round(self.iters_adversarial / (self.n_eta + self.n_pi)))

    def for_attacker(self) -> "TrainConfig":
        from dataclasses import replace
        return replace(self, lr=self.att_lr, rl_weight=self.att_rl_weight,
                       value_weight=self.att_value_weight,
                       entropy_weight=self.att_entropy_weight,
                       gamma=self.att_gamma, il_weight=0.0, aux_weight=0.0)

    def to_json(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, d):
        return cls(**d)


class ValueNet:
    """Two affine layers with a tanh between, mapping the state to a scalar."""

    def __init__(self, params):
        self.params = params

    @classmethod
    def create(cls, rng, d_in, hidden=32, dtype=np.float32):
        return cls({
            "v1": dc.init_uniform(rng, (d_in, hidden), dtype=dtype),
            "b1": dc.init_uniform(rng, (1, hidden), fan_in=d_in, dtype=dtype),
            "v2": dc.init_uniform(rng, (hidden, 1), dtype=dtype),
            "b2": dc.init_uniform(rng, (1, 1), fan_in=hidden, dtype=dtype),
        })

    def forward(self, tape, state_values) -> Tensor:
        s = Tensor(np.asarray(state_values).reshape(1, -1),
                   dtype=self.params["v1"].dtype)
        hidden = dc.tanh(tape, dc.affine(tape, s, self.params["v1"], self.params["b1"]))
        return dc.affine(tape, hidden, self.params["v2"], self.params["b2"])


@dataclass
class Transition:
    state: np.ndarray
    action: object
    reward: float
    value: float = 0.0
    log_prob: float = 0.0
    entropy: float = 0.0
    dist: Optional[Tensor] = None        # taped distribution for the learner
    dist_index: int = 0
    value_out: Optional[Tensor] = None
    p_c: Optional[Tensor] = None
    attacked_target: Optional[int] = None
    teacher: Optional[int] = None
    use_rl: bool = True                  # False on teacher-forced transitions


@dataclass
class RolloutBuffer:
    transitions: list = field(default_factory=list)
    bootstrap: float = 0.0
    success: bool = False

    def __len__(self):
        return len(self.transitions)

    @property
    def rewards(self):
        return [t.reward for t in self.transitions]


@dataclass
class RolloutResult:
    nav_buffer: RolloutBuffer
    att_buffer: Optional[RolloutBuffer]
    episode: wd.Episode
    tape: Optional[Tape]
    trace: list


class AttackProbe(NamedTuple):
    """Everything a baseline attack policy may inspect at one timestep."""
    instruction: Instruction
    timestep: int
    visual_state: np.ndarray
    clean_alpha_w: Callable      # () -> attention over tokens, clean encoding
    policy_probe: Callable       # tokens -> action distribution from this state
    rng: object


def rollout_episode(item, nav: Navigator, att: Optional[Attacker], mode: str,
                    rng, cfg: TrainConfig,
                    nav_value: Optional[ValueNet] = None,
                    att_value: Optional[ValueNet] = None,
                    attack_fn: Optional[Callable] = None,
                    record_trace: bool = False,
                    tape: Optional[Tape] = None) -> RolloutResult:
    """Play one episode.

    mode selects the learner: 'nav_learn' tapes and samples the navigator
    (the attacker, when present, is frozen and greedy), 'nav_teacher' tapes
    the navigator but follows and supervises the shortest-path teacher,
    'att_learn' tapes and samples the attacker (navigator frozen and
    greedy), 'eval' freezes both, and 'clean' runs without any attack.
    ``attack_fn`` overrides the attack policy in eval mode (baseline
    mechanisms).  Passing ``tape`` lets several rollouts share one update.
    """
    graph, ep, instr = item.world, item.episode, item.instruction
    nav_teacher = mode == "nav_teacher"
    nav_learn = mode == "nav_learn" or nav_teacher
    att_learn = mode == "att_learn"
    if mode not in ("clean", "eval", "nav_learn", "nav_teacher", "att_learn"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    attacking = mode != "clean" and (att is not None or attack_fn is not None) \
        and instr.attackable

    if tape is None and (nav_learn or att_learn):
        tape = Tape()
    nav_tape = tape if nav_learn else None
    att_tape = tape if att_learn else None

    att_enc: Optional[AttackerEncoding] = None
    if attacking and att is not None:
        att_enc = att.encode(att_tape, instr)

    clean_enc_cache = {}

    def clean_encoding():
        # frozen re-encode of the original tokens for baseline probes
        if "enc" not in clean_enc_cache:
            clean_enc_cache["enc"] = nav.encode(None, instr.tokens, instr.target_set)
        return clean_enc_cache["enc"]

    nav_buf = RolloutBuffer()
    att_buf = RolloutBuffer() if attacking else None
    trace = []
    state = nav.initial_state()
    enc_cache = {}
    t = 0
    while not ep.done:
        views = Tensor(graph.candidate_views(ep.current))
        alpha_v, f_v = nav.visual_attention(nav_tape, views, state)
        s_t = f_v.values.reshape(-1).copy()

        action_att, att_dist, att_row = None, None, 0
        if attacking:
            if attack_fn is not None:
                probe = _make_probe(nav, instr, t, s_t, views, alpha_v, f_v,
                                    state, clean_encoding, rng)
                action_att = attack_fn(probe)
            else:
                score = att.attack_score(att_tape, att_enc, s_t)
                if att_learn:
                    action_att = select_attack(score, "sample", rng)
                    att_dist = score.p_flat
                    att_row = score.index_map.index(tuple(action_att))
                else:
                    action_att = select_attack(score, "greedy")

        if action_att is not None:
            pert = apply_perturbation(instr, action_att, t)
            tokens_t = pert.tokens
        else:
            tokens_t = instr.tokens

        enc = enc_cache.get(tokens_t)
        if enc is None:
            # token sequences repeat across steps; reuse their encodings
            enc = nav.encode(nav_tape, tokens_t, instr.target_set)
            enc_cache[tokens_t] = enc
        out, proto = nav.decode_with_visual(nav_tape, enc, views, alpha_v, f_v, state)

        teacher = wd.teacher_action(ep)
        if nav_teacher:
            action_nav = teacher
        elif nav_learn:
            action_nav = sample_action(out.p_n, rng)
        else:
            action_nav = greedy_action(out.p_n)
        if action_nav != wd.STOP_ACTION:
            state = nav.with_action(proto, views, action_nav)

        ep_next = wd.step(ep, action_nav)
        r_att = wd.attacker_reward(ep, ep_next)
        if cfg.nav_reward == "progress_delta":
            r_nav = wd.progress_reward(ep, ep_next)
        else:
            r_nav = -r_att

        nav_tr = Transition(state=s_t, action=action_nav, reward=r_nav,
                            teacher=teacher, use_rl=not nav_teacher)
        if nav_learn:
            nav_tr.dist = out.p_n
            nav_tr.dist_index = action_nav
            pn = out.p_n.values.reshape(-1)
            nav_tr.log_prob = float(np.log(max(pn[action_nav], 1e-30)))
            nav_tr.entropy = float(-(pn * np.log(np.maximum(pn, 1e-30))).sum())
            if not nav_teacher:
                nav_tr.value_out = nav_value.forward(nav_tape, s_t)
                nav_tr.value = nav_tr.value_out.item()
            if action_att is not None and out.p_c is not None:
                nav_tr.p_c = out.p_c
        if action_att is not None:
            nav_tr.attacked_target = action_att.target_index
        nav_buf.transitions.append(nav_tr)

        if att_buf is not None:
            att_tr = Transition(state=s_t, action=action_att, reward=r_att)
            if att_learn and att_dist is not None:
                att_tr.dist = att_dist
                att_tr.dist_index = att_row
                pa = att_dist.values.reshape(-1)
                att_tr.log_prob = float(np.log(max(pa[att_row], 1e-30)))
                att_tr.entropy = float(-(pa * np.log(np.maximum(pa, 1e-30))).sum())
                att_tr.value_out = att_value.forward(att_tape, s_t)
                att_tr.value = att_tr.value_out.item()
            att_buf.transitions.append(att_tr)

        if record_trace:
            trace.append(_trace_row(instr, t, action_att, out, action_nav, r_nav))
        ep = ep_next
        t += 1

    success = wd.geodesic_distance(graph, ep.current, ep.goal) \
        <= graph.config.success_radius
    nav_buf.success = success
    if att_buf is not None:
        att_buf.success = success
    return RolloutResult(nav_buffer=nav_buf, att_buffer=att_buf, episode=ep,
                         tape=tape, trace=trace)


def _make_probe(nav, instr, t, s_t, views, alpha_v, f_v, state, clean_encoding, rng):
    frozen_alpha = Tensor(alpha_v.values.copy())
    frozen_fv = Tensor(f_v.values.copy())

    def clean_alpha_w():
        out, _ = nav.decode_with_visual(None, clean_encoding(), views,
                                        frozen_alpha, frozen_fv, state)
        return out.alpha_w.values.reshape(-1).copy()

    def policy_probe(tokens):
        enc = nav.encode(None, tuple(tokens), instr.target_set)
        out, _ = nav.decode_with_visual(None, enc, views, frozen_alpha,
                                        frozen_fv, state)
        return out.p_n.values.reshape(-1).copy()

    return AttackProbe(instruction=instr, timestep=t, visual_state=s_t,
                       clean_alpha_w=clean_alpha_w, policy_probe=policy_probe,
                       rng=rng)


def _trace_row(instr, t, action_att, out, action_nav, r_nav):
    row = {"t": t, "action": int(action_nav), "reward": r_nav,
           "alpha_w": out.alpha_w.values.reshape(-1).copy()}
    if action_att is not None:
        row["attacked_position"] = instr.target_set[action_att.target_index]
        row["attacked_target"] = action_att.target_index
        cand = instr.candidates[action_att.target_index][action_att.candidate_index]
        row["substitute_token"] = cand.token_id
    if out.p_c is not None:
        row["p_c"] = out.p_c.values.reshape(-1).copy()
        row["predicted_target"] = int(np.argmax(row["p_c"]))
    return row


# ---------------------------------------------------------------------------
# returns and updates

def compute_returns(buf: RolloutBuffer, gamma: float):
    """Discounted returns with the bootstrap discounted by gamma^(N-t), plus
    advantages against the stored value estimates."""
    if not buf.transitions:
        raise ValueError("empty rollout buffer")
    rewards = buf.rewards
    returns = [0.0] * len(rewards)
    returns[-1] = rewards[-1] + buf.bootstrap
    for t in range(len(rewards) - 2, -1, -1):
        returns[t] = rewards[t] + gamma * returns[t + 1]
    advantages = [r - tr.value for r, tr in zip(returns, buf.transitions)]
    return returns, advantages


def a2c_update(tape: Tape, buf: RolloutBuffer, returns, advantages,
               policy_params: dict, value_params: dict, cfg: TrainConfig,
               opt_state: Optional[dict] = None):
    """One gradient step on the episode loss; returns diagnostics.

    The scalar loss descends the value error and ascends the advantage-
    weighted log-likelihood, the policy entropy, and (for the navigator)
    the imitation and attacked-word terms.  ``opt_state`` carries momentum
    velocities across calls; omit it for plain steps.
    """
    terms = []
    diag = {"pg": 0.0, "value": 0.0, "entropy": 0.0, "il": 0.0, "aux": 0.0}
    for tr, ret, adv in zip(buf.transitions, returns, advantages):
        if tr.dist is None:
            continue
        if tr.use_rl:
            pg = dc.scale(tape, dc.cross_entropy(tape, tr.dist, tr.dist_index),
                          cfg.rl_weight * adv)
            terms.append(pg)
            diag["pg"] += pg.item()
            if cfg.entropy_weight:
                ent = dc.cross_entropy(tape, tr.dist, tr.dist)
                terms.append(dc.scale(tape, ent, -cfg.entropy_weight))
                diag["entropy"] += ent.item()
            if tr.value_out is not None and cfg.value_weight:
                err = dc.add(tape, tr.value_out,
                             dc.constant([[-ret]], dtype=tr.value_out.dtype))
                sq = dc.multiply(tape, err, err)
                terms.append(dc.scale(tape, sq, cfg.value_weight))
                diag["value"] += sq.item()
        if tr.teacher is not None and cfg.il_weight:
            il = dc.cross_entropy(tape, tr.dist, tr.teacher)
            terms.append(dc.scale(tape, il, cfg.il_weight))
            diag["il"] += il.item()
        if tr.p_c is not None and tr.attacked_target is not None and cfg.aux_weight:
            aux = dc.cross_entropy(tape, tr.p_c, tr.attacked_target)
            terms.append(dc.scale(tape, aux, cfg.aux_weight))
            diag["aux"] += aux.item()
    if not terms:
        raise ValueError("no learnable transitions in buffer")
    loss = terms[0]
    for term in terms[1:]:
        loss = dc.add(tape, loss, term)
    dc.backward(tape, loss)

    groups = [("pol.", policy_params), ("val.", value_params)]
    updated, clips = [], {}
    for prefix, params in groups:
        live = [(prefix + k, p) for k, p in params.items() if p.grad is not None]
        norm = math.sqrt(sum(float(np.sum(np.asarray(p.grad, dtype=np.float64) ** 2))
                             for _, p in live))
        diag["grad_norm" if prefix == "pol." else "value_grad_norm"] = norm
        if not math.isfinite(norm):
            dc.zero_grads([p for _, p in live] + [p for _, p in updated])
            diag["aborted"] = True
            diag["loss"] = loss.item()
            return diag
        # policy and value losses live on different scales; clip per group
        clips[prefix] = 1.0 if not cfg.grad_clip or norm <= cfg.grad_clip \
            else cfg.grad_clip / norm
        updated.extend(live)
    diag["loss"] = loss.item()
    for key, p in updated:
        g = clips[key[:4]] * p.grad
        if cfg.momentum and opt_state is not None:
            v = opt_state.get(key)
            v = g if v is None else cfg.momentum * v + g
            opt_state[key] = v
            g = v
        p.values = (p.values - cfg.lr * g).astype(p.values.dtype)
    dc.zero_grads([p for _, p in updated])
    diag["aborted"] = False
    return diag


# ---------------------------------------------------------------------------
# stage loops

class TrainItem(NamedTuple):
    world: wd.WorldGraph
    episode: wd.Episode
    instruction: Instruction


def _pick(items, rng):
    return items[int(rng.integers(len(items)))]


def _random_attack_fn(probe):
    acts = probe.instruction.valid_actions()
    return acts[int(probe.rng.integers(len(acts)))]


def _snapshot(params):
    return {k: p.values.copy() for k, p in params.items()}


def _restore(params, snap):
    for k, p in params.items():
        p.values = snap[k].copy()


def evaluate_success(items, nav, cfg, att=None, attack_fn=None, seed=0):
    """Greedy success rate over items with per-episode seeding."""
    succ = 0
    for i, item in enumerate(items):
        erng = np.random.default_rng([seed, i])
        res = rollout_episode(item, nav, att, "eval", erng, cfg,
                              attack_fn=attack_fn)
        succ += res.nav_buffer.success
    return succ / max(len(items), 1)


def validate_navigator(items, nav, cfg, att=None, seed=0):
    """Clean SR, attacked SR, and attacked-word prediction accuracy."""
    out = {"clean": evaluate_success(items, nav, cfg, seed=seed)}
    if att is None:
        return out
    succ = hits = total = 0
    for i, item in enumerate(items):
        erng = np.random.default_rng([seed, i])
        res = rollout_episode(item, nav, att, "eval", erng, cfg,
                              record_trace=True)
        succ += res.nav_buffer.success
        for row in res.trace:
            if "attacked_target" in row and "predicted_target" in row:
                total += 1
                hits += row["predicted_target"] == row["attacked_target"]
    out["attacked"] = succ / max(len(items), 1)
    out["aux_acc"] = hits / max(total, 1)
    return out


def _nav_selection_score(items, nav, cfg, att, seed=0):
    v = validate_navigator(items, nav, cfg, att=att, seed=seed)
    return v["clean"] + v.get("attacked", 0.0) + 0.5 * v.get("aux_acc", 0.0)


def navigator_update(item, nav, nav_value, cfg, rng, att=None, opt_state=None,
                     attack_fn=None):
    """One mixed update: a teacher-forced rollout supplies the imitation
    terms, a sampled rollout the policy-gradient terms, on a shared tape."""
    tape = Tape()
    res_il = rollout_episode(item, nav, att, "nav_teacher", rng, cfg, tape=tape,
                             attack_fn=attack_fn)
    res_rl = rollout_episode(item, nav, att, "nav_learn", rng, cfg,
                             nav_value=nav_value, tape=tape, attack_fn=attack_fn)
    returns, advs = compute_returns(res_rl.nav_buffer, cfg.gamma)
    buf = RolloutBuffer(transitions=res_il.nav_buffer.transitions
                        + res_rl.nav_buffer.transitions,
                        success=res_rl.nav_buffer.success)
    n_il = len(res_il.nav_buffer.transitions)
    diag = a2c_update(tape, buf, [0.0] * n_il + returns, [0.0] * n_il + advs,
                      nav.params, nav_value.params, cfg, opt_state=opt_state)
    return diag, res_rl


def train_navigator(items, nav, nav_value, cfg, rng, iters, att=None,
                    stage="pretrain_nav", log_fn=None, val_items=None,
                    val_every=500, val_att=None):
    """Clean navigator training, or training under a frozen attacker.

    With ``val_items`` the clean success rate is checked periodically and
    the best-scoring parameters win at the end; with ``val_att`` the score
    adds the success rate under that frozen attacker, selecting for
    robustness as well."""
    opt_state = {}
    best_snap, best_score = None, -1.0

    def score_now():
        return _nav_selection_score(val_items, nav, cfg, val_att)

    for it in range(iters):
        item = _pick(items, rng)
        diag, res = navigator_update(item, nav, nav_value, cfg, rng, att=att,
                                     opt_state=opt_state)
        if log_fn:
            log_fn({"stage": stage, "iteration": it, "player": "nav",
                    "reward": sum(res.nav_buffer.rewards),
                    "success": int(res.nav_buffer.success), **_round(diag)})
        if val_items and (it + 1) % val_every == 0:
            score = score_now()
            if log_fn:
                log_fn({"stage": stage, "iteration": it, "player": "nav",
                        "val_sr": round(score, 4)})
            if score >= best_score:
                best_score, best_snap = score, _snapshot(nav.params)
    if best_snap is not None:
        if score_now() < best_score:
            _restore(nav.params, best_snap)


def train_attacker(items, nav, att, att_value, cfg, rng, iters,
                   stage="pretrain_att", log_fn=None, val_items=None,
                   val_every=500):
    """Attacker training against a frozen navigator.

    With ``val_items`` the greedy attack is scored periodically (lower
    navigator success is better) and the best parameters win at the end."""
    nav_digest = params_digest(nav.params)
    acfg = cfg.for_attacker()
    opt_state = {}
    best_snap, best_score = None, 2.0
    for it in range(iters):
        item = _pick(items, rng)
        if not item.instruction.attackable:
            continue
        res = rollout_episode(item, nav, att, "att_learn", rng, acfg,
                              att_value=att_value)
        returns, advs = compute_returns(res.att_buffer, acfg.gamma)
        diag = a2c_update(res.tape, res.att_buffer, returns, advs,
                          att.params, att_value.params, acfg, opt_state=opt_state)
        if log_fn:
            log_fn({"stage": stage, "iteration": it, "player": "att",
                    "reward": sum(res.att_buffer.rewards),
                    "success": int(res.att_buffer.success), **_round(diag)})
        if val_items and (it + 1) % val_every == 0:
            score = evaluate_success(val_items, nav, cfg, att=att)
            if log_fn:
                log_fn({"stage": stage, "iteration": it, "player": "att",
                        "val_attacked_sr": round(score, 4)})
            if score <= best_score:
                best_score, best_snap = score, _snapshot(att.params)
    if best_snap is not None:
        final = evaluate_success(val_items, nav, cfg, att=att)
        if final > best_score:
            _restore(att.params, best_snap)
    if params_digest(nav.params) != nav_digest:
        raise RuntimeError("frozen navigator parameters changed during attacker training")


def adversarial_train(items, nav, att, nav_value, att_value, cfg, rng,
                      log_fn=None, val_items=None, val_att=None):
    """Alternating rounds: freeze the attacker while the navigator takes
    n_eta updates on perturbed instructions (with the attacked-word term),
    then freeze the navigator for n_pi attacker updates.  Returns the exact
    update sequence.

    With ``val_items`` the navigator is scored each round on clean success
    plus success under ``val_att`` (a fixed reference attacker), and its
    best snapshot wins at the end; the attacker always keeps its final
    parameters."""
    update_log = []
    acfg = cfg.for_attacker()
    nav_opt, att_opt = {}, {}
    best_nav, best_score = None, -1.0

    def nav_score():
        return _nav_selection_score(val_items, nav, cfg, val_att)

    for rnd in range(cfg.rounds):
        att_digest = params_digest(att.params)
        for j in range(cfg.n_eta):
            item = _pick(items, rng)
            # alternate attacked and clean episodes so hardening does not
            # crowd out clean competence; a slice of the attacked episodes
            # uses random substitutions to vary the attack distribution
            opponent, attack_fn = None, None
            if rng.random() < cfg.attacked_fraction:
                if rng.random() < cfg.harden_random:
                    attack_fn = _random_attack_fn
                else:
                    opponent = att
            diag, res = navigator_update(item, nav, nav_value, cfg, rng,
                                         att=opponent, attack_fn=attack_fn,
                                         opt_state=nav_opt)
            update_log.append("eta")
            if log_fn:
                log_fn({"stage": "adversarial", "round": rnd, "iteration": j,
                        "player": "nav", "reward": sum(res.nav_buffer.rewards),
                        "success": int(res.nav_buffer.success), **_round(diag)})
        if params_digest(att.params) != att_digest:
            raise RuntimeError("frozen attacker changed during navigator block")
        nav_digest = params_digest(nav.params)
        for j in range(cfg.n_pi):
            item = _pick(items, rng)
            if not item.instruction.attackable:
                update_log.append("pi")
                continue
            res = rollout_episode(item, nav, att, "att_learn", rng, acfg,
                                  att_value=att_value)
            returns, advs = compute_returns(res.att_buffer, acfg.gamma)
            diag = a2c_update(res.tape, res.att_buffer, returns, advs,
                              att.params, att_value.params, acfg, opt_state=att_opt)
            update_log.append("pi")
            if log_fn:
                log_fn({"stage": "adversarial", "round": rnd, "iteration": j,
                        "player": "att", "reward": sum(res.att_buffer.rewards),
                        "success": int(res.att_buffer.success), **_round(diag)})
        if params_digest(nav.params) != nav_digest:
            raise RuntimeError("frozen navigator changed during attacker block")
        if val_items:
            score = nav_score()
            if log_fn:
                log_fn({"stage": "adversarial", "round": rnd, "player": "nav",
                        "val_sr": round(score, 4)})
            if score >= best_score:
                best_score, best_nav = score, _snapshot(nav.params)
    if best_nav is not None and nav_score() < best_score:
        _restore(nav.params, best_nav)
    return update_log


def _round(diag):
    return {k: (round(v, 6) if isinstance(v, float) else v)
            for k, v in diag.items()}
