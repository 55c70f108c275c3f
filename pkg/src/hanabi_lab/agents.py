"""Agent interface and the self-play game loop shared by every evaluator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from hanabi_lab.engine import (
    Action,
    GameConfig,
    Observation,
    action_id,
    apply_action,
    id_action,
    is_terminal,
    new_game,
    observe,
)
from hanabi_lab.rng import SplitMix64


class IncompatibleAgentError(ValueError):
    """An agent cannot play at the requested player count."""


class Agent:
    """Something that maps an ``Observation`` to an ``Action``.

    ``propose`` is the agent's raw choice and may be illegal (a classifier
    can rank an illegal id first); ``act`` must always return a legal move.
    Agents that score every action id override ``scores`` and inherit both.
    """

    name = "agent"

    def reset(self, seed: int) -> None:
        pass

    def check_compatible(self, config: GameConfig) -> None:
        pass

    def scores(self, obs: Observation) -> np.ndarray:
        raise NotImplementedError

    def propose(self, obs: Observation) -> Action:
        return id_action(int(np.argmax(self.scores(obs))), self.config)

    def act(self, obs: Observation) -> Action:
        s = self.scores(obs)
        legal = list(obs.legal_action_ids)
        best = legal[int(np.argmax(s[legal]))]
        return id_action(best, self.config)


class RandomAgent(Agent):
    """Uniform over legal actions; reseeded at the start of every game."""

    name = "random"

    def __init__(self, config: GameConfig, seed: int = 0):
        self.config = config
        self.rng = SplitMix64(seed)

    def reset(self, seed: int) -> None:
        self.rng = SplitMix64(seed ^ 0x5EED)

    def check_compatible(self, config: GameConfig) -> None:
        self.config = config

    def propose(self, obs: Observation) -> Action:
        return self.act(obs)

    def act(self, obs: Observation) -> Action:
        return id_action(self.rng.choice(obs.legal_action_ids), self.config)


@dataclass
class GameResult:
    score: int
    turns: int
    decisions: int
    illegal_attempts: int
    actions: list[int]


def play_game(agents: Sequence[Agent], config: GameConfig, seed: int,
              illegal_policy: str = "mask") -> GameResult:
    """Play one seeded game; seat ``i`` is controlled by ``agents[i]``.

    A raw proposal that is illegal is counted, then resolved by
    ``illegal_policy``: ``"mask"`` asks the agent for its best legal move,
    ``"forfeit"`` substitutes a uniformly random legal move.
    """
    if illegal_policy not in ("mask", "forfeit"):
        raise ValueError(f"unknown illegal policy {illegal_policy!r}")
    cfg = config.with_seed(seed)
    state = new_game(cfg)
    for i, a in enumerate(agents):
        a.reset(seed + i)
    fallback = SplitMix64(seed ^ 0xF0F0F0F0)
    illegal = 0
    decisions = 0
    actions = []
    while not is_terminal(state):
        p = state.current_player
        obs = observe(state, p)
        agent = agents[p]
        move = agent.propose(obs)
        decisions += 1
        try:
            mid = action_id(move, cfg)
        except IndexError:
            mid = -1
        if mid not in obs.legal_action_ids:
            illegal += 1
            if illegal_policy == "mask":
                move = agent.act(obs)
            else:
                move = id_action(fallback.choice(obs.legal_action_ids), cfg)
            mid = action_id(move, cfg)
        actions.append(mid)
        state, _, _ = apply_action(state, move)
    return GameResult(state.score_cache, state.turn, decisions, illegal, actions)
