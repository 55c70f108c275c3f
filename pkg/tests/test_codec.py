from dataclasses import replace

import pytest

from hanabi_lab.codec import (
    ObservationValidationError,
    ParseError,
    TEMPLATE_VERSION,
    TemplateVersionError,
    parse_action,
    parse_observation,
    render_action,
    render_observation,
)
from hanabi_lab.engine import Action, Card, GameConfig, action_id, apply_action, id_action, new_game, observe

from conftest import random_game_states, sample_states


def all_observations(states):
    for s in states:
        for p in range(s.config.num_players):
            yield s.config, observe(s, p)


def test_fresh_observation_text():
    text = render_observation(observe(new_game(GameConfig()), 0))
    lines = text.split("\n")
    assert lines[0] == TEMPLATE_VERSION
    assert "hint tokens: 8" in lines and "life tokens: 3" in lines
    assert "deck size: 40" in lines
    assert lines[-1] == "end"
    assert not any(line.startswith("discards:") for line in lines)
    assert text == text.rstrip() and all(line == line.rstrip() for line in lines)


def test_discard_section_only_with_ablation():
    game = random_game_states(2, 11)
    s = next(x for x in game if x.discard_pile)
    assert "discards:" not in render_observation(observe(s, 0))
    s = replace(s, config=replace(s.config, discard_in_obs=True))
    text = render_observation(observe(s, 0))
    assert "\ndiscards: " in text
    assert parse_observation(text, s.config) == observe(s, 0)


def test_legal_actions_are_not_rendered():
    text = render_observation(observe(new_game(GameConfig()), 0))
    assert "legal" not in text


def test_observation_round_trip():
    n = 0
    for cfg, o in all_observations(sample_states(400, seed=2)):
        assert parse_observation(render_observation(o), cfg) == o
        n += 1
    assert n > 1000


def test_round_trip_without_config():
    for cfg, o in all_observations(sample_states(40, seed=6)):
        assert parse_observation(render_observation(o)) == o


def test_render_is_injective():
    seen = {}
    for _, o in all_observations(sample_states(400, seed=3)):
        text = render_observation(o)
        if text in seen:
            assert seen[text] == o
        seen[text] = o
    assert len(seen) > 1000


def test_render_is_deterministic():
    o = observe(random_game_states(3, 5)[20], 1)
    assert render_observation(o) == render_observation(o)


def test_truncated_text_is_an_error():
    text = render_observation(observe(random_game_states(2, 9)[15], 0))
    for cut in range(1, len(text) - 1, 37):
        with pytest.raises(ParseError):
            parse_observation(text[:cut], GameConfig())
    # dropping the terminator line alone is also caught
    with pytest.raises(ParseError):
        parse_observation(text.rsplit("\n", 1)[0], GameConfig())


def test_hint_tokens_above_max_rejected():
    text = render_observation(observe(random_game_states(2, 9)[15], 0))
    line = next(x for x in text.split("\n") if x.startswith("hint tokens:"))
    with pytest.raises(ObservationValidationError):
        parse_observation(text.replace(line, "hint tokens: 9"), GameConfig())


def test_unknown_version():
    text = render_observation(observe(new_game(GameConfig()), 0))
    with pytest.raises(TemplateVersionError):
        parse_observation(text.replace(TEMPLATE_VERSION, "hanabi-text-v0"), GameConfig())


def test_inconsistent_status_token_rejected():
    text = render_observation(observe(new_game(GameConfig()), 0))
    assert "c0:proof=none" in text
    with pytest.raises(ObservationValidationError):
        parse_observation(text.replace("c0:proof=none", "c0:proof=play", 1), GameConfig())


def test_partner_card_status():
    s = new_game(GameConfig())
    partner = (Card(0, 1), Card(0, 2), Card(1, 1), Card(2, 3), Card(2, 4))
    s = replace(s, hands=(s.hands[0], partner), fireworks=(1, 0, 0, 0, 0), score_cache=1)
    text = render_observation(observe(s, 0))
    assert "p1c0=r1" in text and "p1c0:now=dead" in text
    assert "p1c1:now=play" in text and "p1c3:now=later" in text


def test_proof_token_after_hints():
    s = new_game(GameConfig())
    partner = (Card(0, 1), Card(1, 2), Card(1, 3), Card(2, 3), Card(3, 4))
    s = replace(s, hands=(s.hands[0], partner))
    s, _, _ = apply_action(s, Action.hint_rank(1, 1))
    text = render_observation(observe(s, 1))
    # every rank-1 card is playable on empty fireworks
    assert "c0:?1" in text and "c0:proof=play" in text


def test_action_text_examples():
    cfg = GameConfig()
    assert render_action(Action.discard(4)) == "discard 4"
    assert render_action(id_action(0, cfg)) == "discard 0"
    assert render_action(Action.play(2)) == "play 2"
    assert render_action(Action.hint_color(1, 0)) == "hint color red to player +1"
    assert render_action(Action.hint_rank(2, 5)) == "hint rank 5 to player +2"


@pytest.mark.parametrize("players", [2, 3, 4, 5])
def test_action_round_trip(players):
    cfg = GameConfig(num_players=players)
    texts = set()
    for i in range(cfg.num_action_ids):
        a = id_action(i, cfg)
        t = render_action(a)
        texts.add(t)
        assert parse_action(t, cfg) == a
        assert action_id(parse_action(t, cfg), cfg) == i
    assert len(texts) == cfg.num_action_ids


@pytest.mark.parametrize("bad", [
    "play 5", "discard -1", "hint color purple to player +1", "hint rank 6 to player +1",
    "hint rank 1 to player +2", "hint color red to player 1", "sing", "play", "play x",
])
def test_bad_action_text(bad):
    with pytest.raises(ParseError):
        parse_action(bad, GameConfig())


def test_parse_error_has_position():
    text = render_observation(observe(new_game(GameConfig()), 0))
    broken = text.replace("life tokens: 3", "life tokenz: 3")
    with pytest.raises(ParseError) as exc:
        parse_observation(broken, GameConfig())
    assert exc.value.line == 4
