import math

import numpy as np
import pytest

from hanabi_lab.agents import IncompatibleAgentError
from hanabi_lab.codec import render_observation
from hanabi_lab.engine import GameConfig, legal_actions, new_game, observe, step
from hanabi_lab.nn import Mlp, gradient_check
from hanabi_lab.rng import SplitMix64
from hanabi_lab.student import (
    DistillConfig,
    EncodedObs,
    Experience,
    QNetDqn,
    QNetDrrn,
    ReplayBuffer,
    StudentAgent,
    StudentConfig,
    StudentDivergedError,
    distill_loss,
    epsilon_at,
    lambda_schedule,
    make_batch,
    q_values,
    qnet_from_json,
    td_loss,
    td_targets,
    teacher_probs_for,
    train_student,
)
from hanabi_lab.teacher import TeacherPolicy, eval_gameplay

CFG = GameConfig()
CFG3 = GameConfig(num_players=3)


def experiences(config, n, seed=0):
    """``n`` experiences from random play, episodes concatenated."""
    rng = SplitMix64(seed)
    out = []
    game = 0
    while len(out) < n:
        s = new_game(config.with_seed(seed * 1000 + game))
        tok = EncodedObs(render_observation(observe(s, 0)))
        while not s.terminal and len(out) < n:
            a = rng.choice(legal_actions(s, s.current_player))
            tr, s = step(s, a)
            nxt = EncodedObs(render_observation(tr.next_obs))
            out.append(Experience(tok, _aid(a, config),
                                  tr.reward, nxt, tr.done, tr.obs.legal_action_ids,
                                  () if tr.done else tr.next_obs.legal_action_ids, tr.oracle_features))
            tok = nxt
        game += 1
    return out


def _aid(a, config):
    from hanabi_lab.engine import action_id

    return action_id(a, config)


def small_dqn(config=CFG, seed=0):
    return QNetDqn(config, hash_dim=64, hidden=(16,), seed=seed)


def small_drrn(config=CFG, seed=0):
    return QNetDrrn(config, hash_dim=64, hidden=(16,), embed_dim=8, action_hash_dim=32, seed=seed)


def nudge_biases(net):
    # positive hidden biases keep ReLUs away from their kinks during checks
    for m in net.nets().values():
        for b in m.biases[:-1]:
            b[...] = 0.05
        if m.out_relu:
            m.biases[-1][...] = 0.05


# ------------------------------------------------------------------ q-values


def test_zero_dqn_gives_zero_q():
    net = QNetDqn(CFG, hash_dim=32, hidden=(4,), net=Mlp([32, 4, 20], seed=None))
    o = observe(new_game(CFG), 0)
    assert not q_values(net, o, o.legal_action_ids).any()


def test_empty_candidates_rejected():
    with pytest.raises(ValueError):
        q_values(small_dqn(), observe(new_game(CFG), 0), [])


def test_q_values_follow_candidate_order():
    o = observe(new_game(CFG), 0)
    legal = list(o.legal_action_ids)
    perm = list(np.random.default_rng(0).permutation(legal))
    for net in (small_dqn(), small_drrn()):
        q = q_values(net, o, legal)
        qp = q_values(net, o, perm)
        assert np.allclose(qp, q[[legal.index(a) for a in perm]], atol=1e-12)
        assert len(q) == len(legal)


def test_drrn_trained_at_two_players_scores_three_player_state():
    net = small_drrn()
    s = new_game(CFG3.with_seed(4))
    o = observe(s, 0)
    q = q_values(net, o, range(CFG3.num_action_ids), CFG3)
    assert q.shape == (30,) and np.isfinite(q).all()


def test_heads_agree_in_contract():
    s = new_game(CFG.with_seed(8))
    o = observe(s, 0)
    for net in (small_dqn(), small_drrn()):
        agent = StudentAgent(net)
        assert len(q_values(net, o, o.legal_action_ids)) == len(o.legal_action_ids)
        from hanabi_lab.engine import action_id

        assert action_id(agent.act(o), CFG) in o.legal_action_ids


def test_dqn_incompatible_drrn_compatible():
    with pytest.raises(IncompatibleAgentError):
        StudentAgent(small_dqn()).check_compatible(CFG3)
    StudentAgent(small_drrn()).check_compatible(CFG3)
    rep = eval_gameplay(StudentAgent(small_drrn(), CFG3), CFG3, 2, seed=1)
    assert rep.n_games == 2


@pytest.mark.parametrize("make", [small_dqn, small_drrn])
def test_checkpoint_round_trip(make):
    net = make()
    back = qnet_from_json(net.to_json())
    assert type(back) is type(net) and np.array_equal(back.params, net.params)
    o = observe(new_game(CFG), 0)
    assert np.array_equal(q_values(back, o, o.legal_action_ids), q_values(net, o, o.legal_action_ids))


def test_drrn_parameters_are_shared_views():
    net = small_drrn()
    net.params[:] = 0.0
    assert not net.f_o.params.any() and not net.g.params.any()


# ------------------------------------------------------------------ replay


def test_replay_fifo():
    buf = ReplayBuffer(5)
    for i in range(8):
        buf.add(i)
    assert len(buf) == 5 and buf.items() == [3, 4, 5, 6, 7]
    with pytest.raises(ValueError):
        ReplayBuffer(0)


def test_replay_uniform_sampling_covers_buffer():
    buf = ReplayBuffer(10)
    for i in range(10):
        buf.add(i)
    got = set(buf.sample(500, np.random.default_rng(0)))
    assert got == set(range(10))


def test_prioritised_sampling_prefers_large_errors():
    buf = ReplayBuffer(4, priority_exponent=1.0)
    for i in range(4):
        buf.add(i)
    buf.update_priorities(np.arange(4), np.array([0.0, 0.0, 0.0, 10.0]))
    draws = buf.sample_indices(2000, np.random.default_rng(1))
    assert np.mean(draws == 3) > 0.99


def test_empty_buffer_sampling_fails():
    with pytest.raises(IndexError):
        ReplayBuffer(3).sample(1, np.random.default_rng(0))


# ------------------------------------------------------------------ TD loss


@pytest.fixture(scope="module")
def exps():
    return experiences(CFG, 200, seed=3)


def test_td_fixed_point_on_done_transitions(exps):
    net = small_dqn()
    batch = make_batch([e for e in exps if not e.done][:8], 64)
    batch.done[:] = True
    q, _ = net.pair_forward(batch.x, np.arange(8), batch.actions)
    batch.rewards[:] = q
    loss, grad, err = td_loss(batch, net, net.copy(), 0.99)
    assert loss == 0.0 and not grad.any() and not err.any()


def test_gamma_zero_target_is_reward(exps):
    net = small_dqn()
    batch = make_batch(exps[:16], 64)
    assert np.array_equal(td_targets(batch, net, net.copy(), 0.0), batch.rewards)


def test_td_target_uses_next_legal_max(exps):
    net, target = small_dqn(seed=1), small_dqn(seed=2)
    live = [e for e in exps if not e.done][:6]
    batch = make_batch(live, 64)
    y = td_targets(batch, net, target, 0.9, double=False)
    for b, e in enumerate(live):
        q = q_values(target, _text_of(e), e.next_legal_ids)
        assert y[b] == pytest.approx(e.reward + 0.9 * q.max())
    yd = td_targets(batch, net, target, 0.9, double=True)
    for b, e in enumerate(live):
        qo = q_values(net, _text_of(e), e.next_legal_ids)
        qt = q_values(target, _text_of(e), e.next_legal_ids)
        assert yd[b] == pytest.approx(e.reward + 0.9 * qt[int(np.argmax(qo))])


def _text_of(e):
    """Route a stored next observation through ``q_values`` via its folded hashes."""
    return _Folded(e.next_obs)


class _Folded:
    def __init__(self, tok):
        self.tok = tok


@pytest.fixture(autouse=True)
def _folded_features(monkeypatch):
    import hanabi_lab.student as st

    orig = st.obs_features

    def feats(obs, dim):
        if isinstance(obs, _Folded):
            return obs.tok.fold(dim)
        return orig(obs, dim)

    monkeypatch.setattr(st, "obs_features", feats)


def test_bad_gamma(exps):
    with pytest.raises(ValueError):
        td_loss(make_batch(exps[:2], 64), small_dqn(), small_dqn(), 1.5)


@pytest.mark.parametrize("make", [small_dqn, small_drrn])
def test_td_gradient_matches_finite_differences(make, exps):
    net = make(seed=5)
    nudge_biases(net)
    target = make(seed=6)
    batch = make_batch(exps[:12], 64)

    def fn(theta):
        net.load(theta)
        loss, grad, _ = td_loss(batch, net, target, 0.9, double=False)
        return loss, grad

    assert gradient_check(fn, net.params.copy(), eps=1e-5, fraction=0.2) < 1e-4


# ------------------------------------------------------------------ distillation


def _uniform_probs(batch):
    return [np.full(len(s), 1 / len(s)) for s in batch.legal]


def test_distill_equals_teacher_entropy_when_matched(exps):
    net = small_dqn(seed=3)
    batch = make_batch(exps[:10], 64)
    from hanabi_lab.student import _flatten_sets, student_log_policy

    rows, ids = _flatten_sets(batch.legal)
    q, _ = net.pair_forward(batch.x, rows, ids)
    lp = student_log_policy(q, rows, 10, 1.0)
    probs = np.split(np.exp(lp), np.cumsum([len(s) for s in batch.legal])[:-1])
    loss, grad = distill_loss(batch, probs, net)
    entropy = -np.sum(np.exp(lp) * lp) / 10
    assert loss == pytest.approx(entropy, abs=1e-12)
    assert np.abs(grad).max() < 1e-12


def test_distill_one_hot_is_neg_log_prob(exps):
    net = small_dqn(seed=4)
    batch = make_batch(exps[:1], 64)
    legal = batch.legal[0]
    onehot = np.zeros(len(legal))
    onehot[2] = 1.0
    loss, _ = distill_loss(batch, [onehot], net)
    q = q_values(net, _Folded(exps[0].obs), legal)
    p = np.exp(q - q.max()) / np.exp(q - q.max()).sum()
    assert loss == pytest.approx(-math.log(p[2]), abs=1e-12)


def test_distill_temperature_validated(exps):
    batch = make_batch(exps[:1], 64)
    with pytest.raises(ValueError):
        distill_loss(batch, _uniform_probs(batch), small_dqn(), tau=0.0)


@pytest.mark.parametrize("make", [small_dqn, small_drrn])
@pytest.mark.parametrize("tau", [1.0, 0.5])
def test_distill_gradient_matches_finite_differences(make, tau, exps):
    net = make(seed=7)
    nudge_biases(net)
    batch = make_batch(exps[20:30], 64)
    rng = np.random.default_rng(0)
    probs = [rng.dirichlet(np.ones(len(s))) for s in batch.legal]

    def fn(theta):
        net.load(theta)
        return distill_loss(batch, probs, net, tau)

    assert gradient_check(fn, net.params.copy(), eps=1e-5, fraction=0.2) < 1e-4


def test_teacher_probs_align_with_legal_sets(exps):
    teacher = TeacherPolicy.create(CFG, (8,), 64, seed=1)
    batch = make_batch(exps[:5], 64)
    for mask in (True, False):
        probs = teacher_probs_for(teacher, batch, mask)
        for p, legal in zip(probs, batch.legal):
            assert len(p) == len(legal) and p.sum() == pytest.approx(1.0)


# ------------------------------------------------------------------ schedules


def test_lambda_schedule():
    cfg = DistillConfig(warmup_steps=100, decay_steps=50)
    assert lambda_schedule(0, cfg) == lambda_schedule(99, cfg) == 1.0
    assert lambda_schedule(125, cfg) == 0.5
    assert lambda_schedule(150, cfg) == lambda_schedule(10**6, cfg) == 0.0
    vals = [lambda_schedule(t, cfg) for t in range(300)]
    assert all(0 <= v <= 1 for v in vals) and vals == sorted(vals, reverse=True)
    with pytest.raises(ValueError):
        DistillConfig(temperature=0)


def test_epsilon_schedule():
    cfg = StudentConfig(env_steps=1000)
    assert epsilon_at(0, cfg) == 1.0
    assert epsilon_at(50, cfg) == pytest.approx(0.525)
    assert epsilon_at(100, cfg) == epsilon_at(999, cfg) == 0.05


def test_default_discounts():
    assert StudentConfig().discount == 0.99
    assert StudentConfig(head="drrn").discount == 0.9
    assert StudentConfig(gamma=0.5).discount == 0.5


# ------------------------------------------------------------------ training loop


def tiny(**kw):
    base = dict(hash_dim=64, hidden=(16,), embed_dim=8, env_steps=600, learning_starts=100,
                train_every=2, target_sync=50, eval_every=300, eval_games=2, batch_size=16)
    base.update(kw)
    return StudentConfig(**base)


def test_run_is_deterministic():
    a = train_student(CFG, cfg=tiny(seed=3))
    b = train_student(CFG, cfg=tiny(seed=3))
    assert a.curve == b.curve and a.losses == b.losses
    assert np.array_equal(a.net.params, b.net.params)
    assert [p.env_steps for p in a.curve] == [300, 600]


def test_no_teacher_equals_zero_lambda_teacher():
    teacher = TeacherPolicy.create(CFG, (8,), 64, seed=2)
    plain = train_student(CFG, cfg=tiny(seed=1))
    zero = train_student(CFG, teacher, cfg=tiny(seed=1, distill=DistillConfig(0, 0)))
    assert plain.losses == zero.losses
    assert np.array_equal(plain.net.params, zero.net.params)


def test_warmup_is_distillation_only():
    teacher = TeacherPolicy.create(CFG, (8,), 64, seed=2)
    run = train_student(CFG, teacher, cfg=tiny(seed=1, distill=DistillConfig(10**6, 0)))
    assert all(p.lam == 1.0 for p in run.curve)
    assert run.losses  # every update was a distillation update


def test_behaviour_cloning_beats_chance():
    teacher = TeacherPolicy.create(CFG, (32,), 256, seed=9)
    teacher.net.weights[-1] *= 4  # sharpen the teacher's preferences
    cfg = tiny(hash_dim=256, hidden=(64,), env_steps=3000, train_every=1, learning_starts=200,
               eval_every=3000, lr=2e-3, distill=DistillConfig(10**6, 0), seed=2)
    run = train_student(CFG, teacher, cfg=cfg)
    held = experiences(CFG, 400, seed=77)
    agree, chance = 0, 0.0
    for e in held:
        legal = list(e.legal_ids)
        t = teacher.net.forward(_dense(e.obs, 256))
        q = q_values(run.net, _Folded(e.obs), legal)
        agree += legal[int(np.argmax(q))] == legal[int(np.argmax(t[legal]))]
        chance += 1 / len(legal)
    assert agree / len(held) > 2 * chance / len(held)


def _dense(tok, dim):
    x = np.zeros(dim)
    u, c = tok.fold(dim)
    x[u] = c
    return x


def test_drrn_transfer_finetunes_at_three_players():
    two = train_student(CFG, cfg=tiny(head="drrn", env_steps=300, eval_every=300))
    three = train_student(CFG3, cfg=tiny(head="drrn", env_steps=300, eval_every=300), init=two.net)
    assert three.net.config.num_players == 3 and three.curve
    assert three.net.params.size == two.net.params.size
    dqn = train_student(CFG, cfg=tiny(env_steps=200, eval_every=200))
    with pytest.raises(IncompatibleAgentError):
        train_student(CFG3, cfg=tiny(env_steps=200), init=dqn.net)


def test_divergence_restores_last_good_state():
    teacher = TeacherPolicy.create(CFG, (8,), 64, seed=2)
    teacher.net.params[:] = np.nan
    with pytest.raises(StudentDivergedError) as exc:
        train_student(CFG, teacher, cfg=tiny(seed=1))
    back = qnet_from_json(exc.value.checkpoint)
    assert np.isfinite(back.params).all()
