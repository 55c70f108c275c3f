from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from hanabi_lab.engine import (
    Action,
    ActionKind,
    Card,
    CardKnowledge,
    ConfigError,
    GameConfig,
    IllegalActionError,
    TerminalStateError,
    action_id,
    apply_action,
    card_multiset,
    id_action,
    initial_multiset,
    is_terminal,
    legal_action_ids,
    legal_actions,
    new_game,
    observation_legal_ids,
    observe,
    oracle_features,
    score,
    step,
)
from hanabi_lab.rng import SplitMix64

from conftest import random_game_states, sample_states


def brute_force_legal(state):
    """Ids whose application does not raise, tried one by one."""
    ok = []
    for i in range(state.config.num_action_ids):
        try:
            apply_action(state, id_action(i, state.config))
        except IllegalActionError:
            continue
        ok.append(i)
    return ok


# ---------------------------------------------------------------- config


def test_default_hand_sizes():
    assert [GameConfig(num_players=n).hand_size for n in (2, 3, 4, 5)] == [5, 5, 4, 4]


@pytest.mark.parametrize("kwargs", [
    {"num_players": 1}, {"num_players": 6}, {"hand_size": 26},
    {"rank_multiplicities": (1, 1)}, {"max_hint_tokens": 0}, {"seed": -1},
])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        GameConfig(**kwargs)


def test_config_dict_round_trip():
    cfg = GameConfig(num_players=4, seed=99, discard_in_obs=True)
    assert GameConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        GameConfig.from_dict({"players": 2})


def test_deck_size_invariant():
    cfg = GameConfig()
    assert sum(cfg.rank_multiplicities) * cfg.colors == cfg.deck_size == 50
    assert sum(initial_multiset(cfg).values()) == 50


# ---------------------------------------------------------------- new_game


def test_new_game_two_players():
    s = new_game(GameConfig(seed=3))
    assert len(s.deck) == 40
    assert s.hint_tokens == 8 and s.life_tokens == 3
    assert score(s) == 0 and not is_terminal(s)
    assert s.current_player == 0 and s.fireworks == (0,) * 5


def test_new_game_five_players():
    s = new_game(GameConfig(num_players=5))
    assert [len(h) for h in s.hands] == [4] * 5
    assert len(s.deck) == 30


def test_new_game_deterministic():
    cfg = GameConfig(num_players=3, seed=12345)
    assert new_game(cfg).to_bytes() == new_game(cfg).to_bytes()
    assert new_game(cfg).to_bytes() != new_game(cfg.with_seed(12346)).to_bytes()


# ---------------------------------------------------------------- action ids


def test_action_id_counts():
    assert GameConfig().num_action_ids == 20
    assert GameConfig(num_players=3).num_action_ids == 30
    assert GameConfig(num_players=5).num_action_ids == 48


@pytest.mark.parametrize("players", [2, 3, 4, 5])
def test_action_ids_are_a_bijection(players):
    cfg = GameConfig(num_players=players)
    actions = [id_action(i, cfg) for i in range(cfg.num_action_ids)]
    assert len(set(actions)) == cfg.num_action_ids
    assert [action_id(a, cfg) for a in actions] == list(range(cfg.num_action_ids))
    with pytest.raises(IndexError):
        id_action(cfg.num_action_ids, cfg)


def test_action_id_layout():
    cfg = GameConfig()
    assert id_action(0, cfg) == Action.discard(0)
    assert id_action(4, cfg) == Action.discard(4)
    assert id_action(5, cfg) == Action.play(0)
    assert id_action(10, cfg) == Action.hint_color(1, 0)
    assert id_action(15, cfg) == Action.hint_rank(1, 1)
    assert id_action(19, cfg) == Action.hint_rank(1, 5)


def test_action_id_rejects_out_of_range():
    cfg = GameConfig()
    for bad in (Action.play(5), Action.hint_color(2, 0), Action.hint_rank(1, 6), Action.hint_color(1, 5)):
        with pytest.raises(IndexError):
            action_id(bad, cfg)


# ---------------------------------------------------------------- legal actions


def test_opening_has_no_discards():
    s = new_game(GameConfig())
    kinds = [a.kind for a in legal_actions(s, 0)]
    assert ActionKind.DISCARD not in kinds
    assert kinds.count(ActionKind.PLAY) == 5


def test_off_turn_player_has_no_actions():
    s = new_game(GameConfig())
    assert legal_actions(s, 1) == []


def test_no_hints_without_tokens():
    s = replace(new_game(GameConfig()), hint_tokens=0)
    assert not any(a.is_hint for a in legal_actions(s, 0))


def test_opening_legal_count_fixture():
    # partner holds three distinct colors and four distinct ranks
    partner = (Card(0, 1), Card(0, 2), Card(1, 3), Card(2, 4), Card(2, 4))
    s = new_game(GameConfig())
    s = replace(s, hands=(s.hands[0], partner))
    legal = legal_actions(s, 0)
    assert len(legal) == 5 + 3 + 4 == 12
    assert legal_action_ids(s, 0) == brute_force_legal(s)


def test_terminal_state_errors():
    s = replace(new_game(GameConfig()), terminal=True)
    with pytest.raises(TerminalStateError):
        legal_actions(s, 0)
    with pytest.raises(TerminalStateError):
        apply_action(s, Action.play(0))


def test_legal_matches_brute_force_oracle():
    for s in sample_states(150, seed=21):
        if s.terminal:
            continue
        assert legal_action_ids(s, s.current_player) == brute_force_legal(s)


def test_illegal_actions_raise():
    s = new_game(GameConfig())
    with pytest.raises(IllegalActionError):
        apply_action(s, Action.discard(0))
    with pytest.raises(IllegalActionError):
        apply_action(s, Action.play(7))
    with pytest.raises(IllegalActionError):
        apply_action(s, Action.hint_color(2, 0))


# ---------------------------------------------------------------- apply_action


def test_successful_play():
    s = new_game(GameConfig())
    hand = (Card(0, 1),) + s.hands[0][1:]
    s = replace(s, hands=(hand, s.hands[1]))
    s2, r, events = apply_action(s, Action.play(0))
    assert r == 1.0 and s2.fireworks[0] == 1 and score(s2) == 1
    assert events[0].kind == "play_success"
    assert s2.hands[0][0] == s.deck[0]  # newest card at index 0
    assert s2.hands[0][1:] == s.hands[0][1:]


def test_misplay_costs_a_life():
    s = new_game(GameConfig())
    hand = (Card(0, 3),) + s.hands[0][1:]
    s = replace(s, hands=(hand, s.hands[1]))
    s2, r, _ = apply_action(s, Action.play(0))
    assert r == 0.0 and s2.life_tokens == 2 and s2.discard_pile == (Card(0, 3),)


def test_discard_restores_token():
    s = replace(new_game(GameConfig()), hint_tokens=7)
    s2, r, _ = apply_action(s, Action.discard(4))
    assert s2.hint_tokens == 8 and r == 0.0
    assert s2.discard_pile == (s.hands[0][4],)


def test_completing_a_stack_restores_a_hint():
    s = new_game(GameConfig())
    hand = (Card(2, 5),) + s.hands[0][1:]
    s = replace(s, hands=(hand, s.hands[1]), fireworks=(0, 0, 4, 0, 0), hint_tokens=3, score_cache=4)
    s2, r, _ = apply_action(s, Action.play(0))
    assert r == 1.0 and s2.hint_tokens == 4 and s2.fireworks[2] == 5


def test_hint_updates_knowledge():
    s = new_game(GameConfig())
    partner = (Card(0, 1), Card(1, 1), Card(0, 2), Card(3, 4), Card(4, 5))
    s = replace(s, hands=(s.hands[0], partner))
    s2, _, _ = apply_action(s, Action.hint_color(1, 0))
    k = s2.knowledge[1]
    assert s2.hint_tokens == 7
    assert k[0].possible_colors == (0,) and k[0].hinted_color == 0
    assert k[2].possible_colors == (0,)
    assert 0 not in k[1].possible_colors and len(k[1].possible_colors) == 4
    assert k[1].hinted_color is None
    assert s2.last_action.touched == (0, 2)


def test_bomb_out_zeroes_score():
    s = new_game(GameConfig())
    hand = (Card(0, 5),) + s.hands[0][1:]
    s = replace(s, hands=(hand, s.hands[1]), life_tokens=1, fireworks=(2, 1, 0, 0, 0), score_cache=3)
    s2, r, _ = apply_action(s, Action.play(0))
    assert s2.terminal and s2.life_tokens == 0 and score(s2) == 0
    assert r == -3.0


def test_bomb_out_keeps_score_when_configured():
    s = new_game(GameConfig(bomb_out_zeroes_score=False))
    hand = (Card(0, 5),) + s.hands[0][1:]
    s = replace(s, hands=(hand, s.hands[1]), life_tokens=1, fireworks=(2, 1, 0, 0, 0), score_cache=3)
    s2, r, _ = apply_action(s, Action.play(0))
    assert s2.terminal and score(s2) == 3 and r == 0.0


def test_perfect_score_terminates():
    s = new_game(GameConfig())
    hand = (Card(4, 5),) + s.hands[0][1:]
    s = replace(s, hands=(hand, s.hands[1]), fireworks=(5, 5, 5, 5, 4), score_cache=24)
    s2, _, _ = apply_action(s, Action.play(0))
    assert s2.terminal and score(s2) == 25


def test_final_round_after_deck_runs_out():
    s = new_game(GameConfig(num_players=3))
    s = replace(s, deck=s.deck[:1], hint_tokens=3)
    s, _, _ = apply_action(s, Action.discard(0))  # draws the last card
    assert not s.deck and not s.terminal
    for _ in range(2):
        s, _, _ = apply_action(s, Action.discard(0))
        assert not s.terminal
    s, _, _ = apply_action(s, Action.discard(0))
    assert s.terminal


# ---------------------------------------------------------------- whole-game properties


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**64 - 1))
def test_random_game_invariants(players, seed):
    states = random_game_states(players, seed)
    cfg = states[0].config
    ms0 = initial_multiset(cfg)
    for s in states:
        assert card_multiset(s) == ms0
        assert 0 <= s.hint_tokens <= cfg.max_hint_tokens
        assert 0 <= s.life_tokens <= cfg.max_life_tokens
        for hand, know in zip(s.hands, s.knowledge):
            assert len(hand) == len(know)
            for card, k in zip(hand, know):
                assert k.color_mask and k.rank_mask and k.admits(card)
        if not s.bombed:
            assert s.score_cache == sum(s.fireworks)
        ends = s.life_tokens == 0 or sum(s.fireworks) == cfg.max_score \
            or s.turns_after_deck_empty == players
        assert s.terminal == ends
    assert states[-1].terminal
    assert 0 <= score(states[-1]) <= cfg.max_score


@pytest.mark.parametrize("players", [2, 3, 4, 5])
def test_rewards_sum_to_final_score(players):
    rng = SplitMix64(players)
    for g in range(30):
        s = new_game(GameConfig(num_players=players, seed=rng.next_u64()))
        total = 0.0
        while not s.terminal:
            s, r, _ = apply_action(s, rng.choice(legal_actions(s, s.current_player)))
            total += r
        assert total == score(s)


def test_replay_is_byte_identical():
    cfg = GameConfig(num_players=4, seed=77)
    rng = SplitMix64(5)
    s = new_game(cfg)
    moves = []
    while not s.terminal:
        a = rng.choice(legal_actions(s, s.current_player))
        moves.append(a)
        s, _, _ = apply_action(s, a)
    t = new_game(cfg)
    for a in moves:
        t, _, _ = apply_action(t, a)
    assert s.to_bytes() == t.to_bytes()


# ---------------------------------------------------------------- observations


def test_observation_hides_own_cards():
    for s in sample_states(60, seed=4):
        for p in range(s.config.num_players):
            o = observe(s, p)
            nump = s.config.num_players
            assert o.others_hands == tuple(s.hands[(p + off) % nump] for off in range(1, nump))
            assert o.own_knowledge == s.knowledge[p]
            assert observe(s, p) == o


def test_observation_legal_ids():
    for s in sample_states(80, seed=8):
        for p in range(s.config.num_players):
            o = observe(s, p)
            if s.terminal or p != s.current_player:
                assert o.legal_action_ids == ()
            else:
                assert list(o.legal_action_ids) == legal_action_ids(s, p)
            assert observation_legal_ids(o, s.config) == o.legal_action_ids


def test_discard_pile_only_when_enabled():
    game = random_game_states(2, 3)
    s = next(x for x in game if x.discard_pile)
    assert observe(s, 0).discard_pile is None
    s2 = replace(s, config=replace(s.config, discard_in_obs=True))
    assert observe(s2, 0).discard_pile == s.discard_pile


def test_last_action_actor_is_relative():
    s = new_game(GameConfig(num_players=3))
    s, _, _ = apply_action(s, Action.hint_rank(1, s.hands[1][0].rank))
    assert observe(s, 0).last_action.actor == 0
    assert observe(s, 1).last_action.actor == 2
    assert observe(s, 2).last_action.actor == 1


# ---------------------------------------------------------------- transitions


def test_step_transition_fields():
    s = new_game(GameConfig())
    hand = (Card(1, 1),) + s.hands[0][1:]
    s = replace(s, hands=(hand, s.hands[1]))
    t, s2 = step(s, Action.play(0))
    assert t.reward == 1.0 and not t.done
    assert t.next_obs.viewer == s2.current_player == 1
    assert t.oracle_features == (True, False, True)


def test_hint_tightening_feature():
    s = new_game(GameConfig())
    t, s2 = step(s, Action.hint_rank(1, s.hands[1][0].rank))
    assert t.oracle_features.knowledge_tightened
    assert not t.oracle_features.fireworks_changed
    # repeating the same hint narrows nothing further
    s3 = replace(s2, current_player=0)
    t2, _ = step(s3, Action.hint_rank(1, s.hands[1][0].rank))
    assert not t2.oracle_features.knowledge_tightened


def test_oracle_features_from_views_only():
    for players in (2, 3, 5):
        rng = SplitMix64(players + 40)
        s = new_game(GameConfig(num_players=players, seed=players))
        while not s.terminal:
            t, nxt = step(s, rng.choice(legal_actions(s, s.current_player)))
            assert oracle_features(t.obs, t.action, t.reward, t.next_obs) == t.oracle_features
            assert t.oracle_features.fireworks_changed == (s.fireworks != nxt.fireworks)
            s = nxt


def test_card_knowledge_helpers():
    k = CardKnowledge.from_sets([0, 2], [1], hinted_rank=1)
    assert k.possible_colors == (0, 2) and k.possible_ranks == (1,)
    assert k.num_possibilities == 2 and not k.fully_identified and not k.unhinted
    assert k.admits(Card(2, 1)) and not k.admits(Card(1, 1))
