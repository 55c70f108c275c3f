from __future__ import annotations

import pytest

from hanabi_lab.engine import GameConfig, apply_action, is_terminal, legal_actions, new_game
from hanabi_lab.rng import SplitMix64


def random_game_states(num_players: int, seed: int, max_states: int | None = None):
    """Every state of one game played with uniformly random legal moves."""
    cfg = GameConfig(num_players=num_players, seed=seed)
    rng = SplitMix64(seed ^ 0xABCDEF)
    state = new_game(cfg)
    out = [state]
    while not is_terminal(state) and (max_states is None or len(out) < max_states):
        state, _, _ = apply_action(state, rng.choice(legal_actions(state, state.current_player)))
        out.append(state)
    return out


def sample_states(n: int, seed: int = 0, players=(2, 3, 4, 5)):
    """``n`` states drawn from random games across player counts."""
    rng = SplitMix64(seed)
    states = []
    g = 0
    while len(states) < n:
        p = players[g % len(players)]
        game = random_game_states(p, rng.next_u64())
        take = min(len(game), max(1, n // 40), n - len(states))
        for idx in sorted(rng.sample(range(len(game)), take)):
            states.append(game[idx])
        g += 1
    return states


@pytest.fixture
def cfg2():
    return GameConfig()


@pytest.fixture
def cfg3():
    return GameConfig(num_players=3)


# (criterion number, verdict line) pairs appended by the acceptance suite
ACCEPTANCE: list[tuple[int, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)
