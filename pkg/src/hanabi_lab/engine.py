"""Rules-exact Hanabi state machine for 2-5 players.

All operations are pure: ``apply_action`` returns a fresh ``GameState`` and
never mutates its input. Containers inside a state are tuples, so states can
be shared between threads or sent to worker processes freely.

Hand layout: a drawn card is inserted at index 0 (newest), so index
``hand_size - 1`` always holds the oldest card still in hand.
"""

from __future__ import annotations

import enum
import json
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import NamedTuple

from hanabi_lab.rng import MASK64, SplitMix64

COLOR_NAMES = ("red", "yellow", "green", "white", "blue")
COLOR_LETTERS = "rygwb"

DEFAULT_MULTIPLICITIES = (3, 2, 2, 2, 1)


class HanabiError(Exception):
    """Base class for engine errors."""


class ConfigError(HanabiError, ValueError):
    pass


class IllegalActionError(HanabiError):
    pass


class TerminalStateError(HanabiError):
    pass


@dataclass(frozen=True)
class GameConfig:
    num_players: int = 2
    colors: int = 5
    ranks: int = 5
    rank_multiplicities: tuple[int, ...] = DEFAULT_MULTIPLICITIES
    hand_size: int = 0  # 0 -> 5 for 2-3 players, 4 for 4-5
    max_hint_tokens: int = 8
    max_life_tokens: int = 3
    bomb_out_zeroes_score: bool = True
    seed: int = 0
    # observation ablations
    discard_in_obs: bool = False
    last_action_in_obs: bool = True

    def __post_init__(self):
        object.__setattr__(self, "rank_multiplicities", tuple(self.rank_multiplicities))
        if self.hand_size == 0:
            object.__setattr__(self, "hand_size", 5 if self.num_players <= 3 else 4)
        self.validate()

    def validate(self) -> None:
        if not 2 <= self.num_players <= 5:
            raise ConfigError(f"num_players must be in 2..5, got {self.num_players}")
        if not 1 <= self.colors <= len(COLOR_NAMES):
            raise ConfigError(f"colors must be in 1..{len(COLOR_NAMES)}, got {self.colors}")
        if not 1 <= self.ranks <= 9:
            raise ConfigError(f"ranks must be in 1..9, got {self.ranks}")
        if len(self.rank_multiplicities) != self.ranks:
            raise ConfigError("rank_multiplicities needs one entry per rank")
        if any(m < 1 for m in self.rank_multiplicities):
            raise ConfigError("every rank needs at least one copy")
        if self.hand_size < 1:
            raise ConfigError("hand_size must be positive")
        if self.hand_size * self.num_players > self.deck_size:
            raise ConfigError(
                f"cannot deal {self.num_players} hands of {self.hand_size} "
                f"from a {self.deck_size}-card deck"
            )
        if self.max_hint_tokens < 1 or self.max_life_tokens < 1:
            raise ConfigError("token maxima must be positive")
        if not 0 <= self.seed <= MASK64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def deck_size(self) -> int:
        return sum(self.rank_multiplicities) * self.colors

    @property
    def max_score(self) -> int:
        return self.colors * self.ranks

    @property
    def num_action_ids(self) -> int:
        return 2 * self.hand_size + (self.num_players - 1) * (self.colors + self.ranks)

    def with_seed(self, seed: int) -> GameConfig:
        return replace(self, seed=seed & MASK64)

    def to_dict(self) -> dict:
        return {
            "num_players": self.num_players,
            "colors": self.colors,
            "ranks": self.ranks,
            "rank_multiplicities": list(self.rank_multiplicities),
            "hand_size": self.hand_size,
            "max_hint_tokens": self.max_hint_tokens,
            "max_life_tokens": self.max_life_tokens,
            "bomb_out_zeroes_score": self.bomb_out_zeroes_score,
            "seed": self.seed,
            "discard_in_obs": self.discard_in_obs,
            "last_action_in_obs": self.last_action_in_obs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> GameConfig:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown game config keys: {sorted(unknown)}")
        if "rank_multiplicities" in known:
            known["rank_multiplicities"] = tuple(known["rank_multiplicities"])
        return cls(**known)


class Card(NamedTuple):
    color: int
    rank: int  # 1-based

    def __str__(self) -> str:
        return f"{COLOR_LETTERS[self.color]}{self.rank}"


class CardKnowledge(NamedTuple):
    """What the holder can deduce about one card from the hints received.

    The possibility sets are bitmasks: bit ``c`` for color ``c``, bit
    ``r - 1`` for rank ``r``.
    """

    color_mask: int
    rank_mask: int
    hinted_color: int | None = None
    hinted_rank: int | None = None

    @classmethod
    def unknown(cls, config: GameConfig) -> CardKnowledge:
        return cls((1 << config.colors) - 1, (1 << config.ranks) - 1)

    @classmethod
    def from_sets(cls, colors, ranks, hinted_color=None, hinted_rank=None) -> CardKnowledge:
        cm = 0
        for c in colors:
            cm |= 1 << c
        rm = 0
        for r in ranks:
            rm |= 1 << (r - 1)
        return cls(cm, rm, hinted_color, hinted_rank)

    @property
    def possible_colors(self) -> tuple[int, ...]:
        return tuple(c for c in range(self.color_mask.bit_length()) if self.color_mask >> c & 1)

    @property
    def possible_ranks(self) -> tuple[int, ...]:
        return tuple(r + 1 for r in range(self.rank_mask.bit_length()) if self.rank_mask >> r & 1)

    @property
    def num_possibilities(self) -> int:
        return bin(self.color_mask).count("1") * bin(self.rank_mask).count("1")

    @property
    def fully_identified(self) -> bool:
        return self.color_mask & (self.color_mask - 1) == 0 and self.rank_mask & (self.rank_mask - 1) == 0

    @property
    def unhinted(self) -> bool:
        return self.hinted_color is None and self.hinted_rank is None

    def admits(self, card: Card) -> bool:
        return bool(self.color_mask >> card.color & 1 and self.rank_mask >> (card.rank - 1) & 1)


def is_playable(fireworks, card: Card) -> bool:
    """The card would extend its stack right now."""
    return fireworks[card.color] + 1 == card.rank


def is_dead(fireworks, card: Card) -> bool:
    """The card's stack has already passed its rank."""
    return card.rank <= fireworks[card.color]


def known_playable(k: CardKnowledge, fireworks) -> bool:
    """Every identity the holder still considers possible is playable."""
    return all(fireworks[c] + 1 == r for c in k.possible_colors for r in k.possible_ranks)


def known_dead(k: CardKnowledge, fireworks) -> bool:
    return all(r <= fireworks[c] for c in k.possible_colors for r in k.possible_ranks)


class ActionKind(str, enum.Enum):
    DISCARD = "discard"
    PLAY = "play"
    HINT_COLOR = "hint_color"
    HINT_RANK = "hint_rank"


@dataclass(frozen=True, slots=True)
class Action:
    kind: ActionKind
    card_index: int | None = None
    target_offset: int | None = None  # 1..num_players-1, relative to the actor
    hint_value: int | None = None  # color index, or 1-based rank

    @classmethod
    def play(cls, index: int) -> Action:
        return cls(ActionKind.PLAY, card_index=index)

    @classmethod
    def discard(cls, index: int) -> Action:
        return cls(ActionKind.DISCARD, card_index=index)

    @classmethod
    def hint_color(cls, target_offset: int, color: int) -> Action:
        return cls(ActionKind.HINT_COLOR, target_offset=target_offset, hint_value=color)

    @classmethod
    def hint_rank(cls, target_offset: int, rank: int) -> Action:
        return cls(ActionKind.HINT_RANK, target_offset=target_offset, hint_value=rank)

    @property
    def is_hint(self) -> bool:
        return self.kind in (ActionKind.HINT_COLOR, ActionKind.HINT_RANK)


def action_id(action: Action, config: GameConfig) -> int:
    """Canonical id: discards, plays, color hints per offset, rank hints per offset."""
    h = config.hand_size
    k = action.kind
    if k is ActionKind.DISCARD or k is ActionKind.PLAY:
        i = action.card_index
        if i is None or not 0 <= i < h:
            raise IndexError(f"card index {i} out of range for hand size {h}")
        return i if k is ActionKind.DISCARD else h + i
    off = action.target_offset
    if off is None or not 1 <= off < config.num_players:
        raise IndexError(f"target offset {off} out of range")
    v = action.hint_value
    if k is ActionKind.HINT_COLOR:
        if v is None or not 0 <= v < config.colors:
            raise IndexError(f"color {v} out of range")
        return 2 * h + (off - 1) * config.colors + v
    if v is None or not 1 <= v <= config.ranks:
        raise IndexError(f"rank {v} out of range")
    return 2 * h + (config.num_players - 1) * config.colors + (off - 1) * config.ranks + (v - 1)


def id_action(i: int, config: GameConfig) -> Action:
    h = config.hand_size
    n_color = (config.num_players - 1) * config.colors
    if not 0 <= i < config.num_action_ids:
        raise IndexError(f"action id {i} out of range 0..{config.num_action_ids - 1}")
    if i < h:
        return Action.discard(i)
    if i < 2 * h:
        return Action.play(i - h)
    i -= 2 * h
    if i < n_color:
        return Action.hint_color(i // config.colors + 1, i % config.colors)
    i -= n_color
    return Action.hint_rank(i // config.ranks + 1, i % config.ranks + 1)


@dataclass(frozen=True, slots=True)
class LastAction:
    """A resolved move: who acted, what they did, and what became public."""

    actor: int  # absolute seat in GameState, offset from the viewer in Observation
    action: Action
    card: Card | None = None  # revealed card for play/discard
    success: bool | None = None  # plays only
    touched: tuple[int, ...] = ()  # hints only


class Event(NamedTuple):
    kind: str
    player: int
    detail: tuple = ()


@dataclass(slots=True)
class GameState:
    config: GameConfig
    deck: tuple[Card, ...]
    hands: tuple[tuple[Card, ...], ...]
    knowledge: tuple[tuple[CardKnowledge, ...], ...]
    fireworks: tuple[int, ...]
    discard_pile: tuple[Card, ...]
    hint_tokens: int
    life_tokens: int
    current_player: int = 0
    turns_after_deck_empty: int = 0
    terminal: bool = False
    score_cache: int = 0
    turn: int = 0
    bombed: bool = False
    last_action: LastAction | None = None

    def to_dict(self) -> dict:
        la = self.last_action
        return {
            "config": self.config.to_dict(),
            "deck": [list(c) for c in self.deck],
            "hands": [[list(c) for c in h] for h in self.hands],
            "knowledge": [[list(k) for k in h] for h in self.knowledge],
            "fireworks": list(self.fireworks),
            "discard_pile": [list(c) for c in self.discard_pile],
            "hint_tokens": self.hint_tokens,
            "life_tokens": self.life_tokens,
            "current_player": self.current_player,
            "turns_after_deck_empty": self.turns_after_deck_empty,
            "terminal": self.terminal,
            "score_cache": self.score_cache,
            "turn": self.turn,
            "bombed": self.bombed,
            "last_action": None if la is None else [
                la.actor, la.action.kind.value, la.action.card_index, la.action.target_offset,
                la.action.hint_value, None if la.card is None else list(la.card), la.success,
                list(la.touched),
            ],
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()


def full_deck(config: GameConfig) -> list[Card]:
    return [
        Card(c, r + 1)
        for c in range(config.colors)
        for r, m in enumerate(config.rank_multiplicities)
        for _ in range(m)
    ]


def new_game(config: GameConfig) -> GameState:
    config.validate()
    deck = full_deck(config)
    SplitMix64(config.seed).shuffle(deck)
    hands: list[list[Card]] = [[] for _ in range(config.num_players)]
    pos = 0
    for _ in range(config.hand_size):
        for p in range(config.num_players):
            hands[p].insert(0, deck[pos])
            pos += 1
    unknown = CardKnowledge.unknown(config)
    return GameState(
        config=config,
        deck=tuple(deck[pos:]),
        hands=tuple(tuple(h) for h in hands),
        knowledge=tuple((unknown,) * config.hand_size for _ in range(config.num_players)),
        fireworks=(0,) * config.colors,
        discard_pile=(),
        hint_tokens=config.max_hint_tokens,
        life_tokens=config.max_life_tokens,
    )


def score(state: GameState) -> int:
    return state.score_cache


def is_terminal(state: GameState) -> bool:
    return state.terminal


def legal_actions(state: GameState, player: int) -> list[Action]:
    """Legal moves for ``player``, in canonical id order (empty off-turn)."""
    if state.terminal:
        raise TerminalStateError("no legal actions in a terminal state")
    if player != state.current_player:
        return []
    cfg = state.config
    n = len(state.hands[player])
    out: list[Action] = []
    if state.hint_tokens < cfg.max_hint_tokens:
        out.extend(Action.discard(i) for i in range(n))
    out.extend(Action.play(i) for i in range(n))
    if state.hint_tokens > 0:
        nump = cfg.num_players
        for off in range(1, nump):
            target = state.hands[(player + off) % nump]
            out.extend(Action.hint_color(off, c) for c in sorted({card.color for card in target}))
        for off in range(1, nump):
            target = state.hands[(player + off) % nump]
            out.extend(Action.hint_rank(off, r) for r in sorted({card.rank for card in target}))
    return out


def legal_action_ids(state: GameState, player: int) -> list[int]:
    cfg = state.config
    return [action_id(a, cfg) for a in legal_actions(state, player)]


def _check_legal(state: GameState, action: Action) -> None:
    cfg = state.config
    player = state.current_player
    k = action.kind
    if k is ActionKind.PLAY or k is ActionKind.DISCARD:
        i = action.card_index
        if i is None or not 0 <= i < len(state.hands[player]):
            raise IllegalActionError(f"no card at index {i}")
        if k is ActionKind.DISCARD and state.hint_tokens >= cfg.max_hint_tokens:
            raise IllegalActionError("cannot discard with all hint tokens available")
        return
    if k not in (ActionKind.HINT_COLOR, ActionKind.HINT_RANK):
        raise IllegalActionError(f"unknown action kind {k!r}")
    if state.hint_tokens <= 0:
        raise IllegalActionError("no hint tokens left")
    off = action.target_offset
    if off is None or not 1 <= off < cfg.num_players:
        raise IllegalActionError(f"bad hint target offset {off}")
    target = state.hands[(player + off) % cfg.num_players]
    v = action.hint_value
    if k is ActionKind.HINT_COLOR:
        hit = any(card.color == v for card in target)
    else:
        hit = any(card.rank == v for card in target)
    if not hit:
        raise IllegalActionError("hint would touch no card")


def apply_action(state: GameState, action: Action) -> tuple[GameState, float, list[Event]]:
    """Apply ``action`` for the current player.

    Returns the successor state, the reward (score delta, plus a negative
    correction on bomb-out when the score is zeroed) and a list of events.
    """
    if state.terminal:
        raise TerminalStateError("game is over")
    _check_legal(state, action)
    cfg = state.config
    player = state.current_player
    nump = cfg.num_players
    events: list[Event] = []
    reward = 0.0

    turns_after = state.turns_after_deck_empty + (1 if not state.deck else 0)
    hands = list(state.hands)
    knowledge = list(state.knowledge)
    deck = state.deck
    fireworks = state.fireworks
    discard_pile = state.discard_pile
    hint_tokens = state.hint_tokens
    life_tokens = state.life_tokens
    score_now = state.score_cache
    bombed = False
    k = action.kind

    if k is ActionKind.PLAY or k is ActionKind.DISCARD:
        i = action.card_index
        hand = list(hands[player])
        know = list(knowledge[player])
        card = hand.pop(i)
        know.pop(i)
        success = None
        if k is ActionKind.PLAY:
            if fireworks[card.color] + 1 == card.rank:
                success = True
                fw = list(fireworks)
                fw[card.color] = card.rank
                fireworks = tuple(fw)
                score_now += 1
                reward += 1.0
                events.append(Event("play_success", player, (i, card)))
                if card.rank == cfg.ranks and hint_tokens < cfg.max_hint_tokens:
                    hint_tokens += 1
                    events.append(Event("hint_restored", player))
            else:
                success = False
                discard_pile = discard_pile + (card,)
                life_tokens -= 1
                events.append(Event("misplay", player, (i, card)))
        else:
            discard_pile = discard_pile + (card,)
            hint_tokens += 1
            events.append(Event("discard", player, (i, card)))
        if deck:
            hand.insert(0, deck[0])
            know.insert(0, CardKnowledge.unknown(cfg))
            deck = deck[1:]
            events.append(Event("draw", player))
        hands[player] = tuple(hand)
        knowledge[player] = tuple(know)
        last = LastAction(player, action, card=card, success=success)
    else:
        target = (player + action.target_offset) % nump
        v = action.hint_value
        touched = []
        new_know = []
        if k is ActionKind.HINT_COLOR:
            bit = 1 << v
            for j, (card, kn) in enumerate(zip(hands[target], knowledge[target])):
                if card.color == v:
                    touched.append(j)
                    new_know.append(kn._replace(color_mask=bit, hinted_color=v))
                else:
                    new_know.append(kn._replace(color_mask=kn.color_mask & ~bit))
        else:
            bit = 1 << (v - 1)
            for j, (card, kn) in enumerate(zip(hands[target], knowledge[target])):
                if card.rank == v:
                    touched.append(j)
                    new_know.append(kn._replace(rank_mask=bit, hinted_rank=v))
                else:
                    new_know.append(kn._replace(rank_mask=kn.rank_mask & ~bit))
        knowledge[target] = tuple(new_know)
        hint_tokens -= 1
        events.append(Event("hint", player, (target, tuple(touched))))
        last = LastAction(player, action, touched=tuple(touched))

    terminal = False
    if life_tokens <= 0:
        terminal = True
        bombed = True
        events.append(Event("bomb_out", player))
        if cfg.bomb_out_zeroes_score:
            reward -= score_now
            score_now = 0
    elif score_now == cfg.max_score:
        terminal = True
    elif turns_after >= nump:
        terminal = True
    if terminal:
        events.append(Event("game_over", player, (score_now,)))

    new_state = GameState(
        config=cfg,
        deck=deck,
        hands=tuple(hands),
        knowledge=tuple(knowledge),
        fireworks=fireworks,
        discard_pile=discard_pile,
        hint_tokens=hint_tokens,
        life_tokens=life_tokens,
        current_player=(player + 1) % nump,
        turns_after_deck_empty=turns_after,
        terminal=terminal,
        score_cache=score_now,
        turn=state.turn + 1,
        bombed=bombed,
        last_action=last,
    )
    return new_state, reward, events


@dataclass(frozen=True, slots=True)
class Observation:
    """One player's view of the table.

    ``others_hands`` and ``others_knowledge`` are listed by seat offset
    1..num_players-1 from the viewer. The viewer's own cards appear only
    through ``own_knowledge``.
    """

    viewer: int
    num_players: int
    others_hands: tuple[tuple[Card, ...], ...]
    others_knowledge: tuple[tuple[CardKnowledge, ...], ...]
    own_knowledge: tuple[CardKnowledge, ...]
    fireworks: tuple[int, ...]
    hint_tokens: int
    life_tokens: int
    deck_size: int
    is_current_player: bool
    discard_pile: tuple[Card, ...] | None = None
    last_action: LastAction | None = None
    legal_action_ids: tuple[int, ...] = field(default=(), compare=True)


def observe(state: GameState, player: int) -> Observation:
    cfg = state.config
    nump = cfg.num_players
    if not 0 <= player < nump:
        raise IndexError(f"player {player} out of range")
    seats = [(player + off) % nump for off in range(1, nump)]
    la = state.last_action
    if la is not None and cfg.last_action_in_obs:
        la = LastAction((la.actor - player) % nump, la.action, la.card, la.success, la.touched)
    else:
        la = None
    is_current = player == state.current_player and not state.terminal
    return Observation(
        viewer=player,
        num_players=nump,
        others_hands=tuple(state.hands[s] for s in seats),
        others_knowledge=tuple(state.knowledge[s] for s in seats),
        own_knowledge=state.knowledge[player],
        fireworks=state.fireworks,
        hint_tokens=state.hint_tokens,
        life_tokens=state.life_tokens,
        deck_size=len(state.deck),
        is_current_player=is_current,
        discard_pile=state.discard_pile if cfg.discard_in_obs else None,
        last_action=la,
        legal_action_ids=tuple(legal_action_ids(state, player)) if is_current else (),
    )


def observation_legal_ids(obs: Observation, config: GameConfig) -> tuple[int, ...]:
    """Legal ids recomputed from the viewer's information alone."""
    if not obs.is_current_player:
        return ()
    n = len(obs.own_knowledge)
    ids = []
    h = config.hand_size
    if obs.hint_tokens < config.max_hint_tokens:
        ids.extend(range(n))
    ids.extend(range(h, h + n))
    if obs.hint_tokens > 0:
        base = 2 * h
        for off, hand in enumerate(obs.others_hands, start=1):
            ids.extend(base + (off - 1) * config.colors + c for c in sorted({c.color for c in hand}))
        base += (config.num_players - 1) * config.colors
        for off, hand in enumerate(obs.others_hands, start=1):
            ids.extend(base + (off - 1) * config.ranks + r - 1 for r in sorted({c.rank for c in hand}))
    return tuple(ids)


class OracleFeatures(NamedTuple):
    reward_positive: bool
    knowledge_tightened: bool
    fireworks_changed: bool


@dataclass(frozen=True, slots=True)
class Transition:
    obs: Observation
    action: Action
    reward: float
    next_obs: Observation
    done: bool
    oracle_features: OracleFeatures


def oracle_features(obs: Observation, action: Action, reward: float, next_obs: Observation) -> OracleFeatures:
    """Privileged transition features, computed from the two views alone.

    ``next_obs`` may belong to any seat; the hinted hand is located through
    seat offsets. A hint tightens knowledge when some card of the target
    lost at least one possibility.
    """
    tightened = False
    if action.is_hint:
        nump = obs.num_players
        actor = obs.viewer
        target = (actor + action.target_offset) % nump
        before = obs.others_knowledge[action.target_offset - 1]
        if target == next_obs.viewer:
            after = next_obs.own_knowledge
        else:
            after = next_obs.others_knowledge[(target - next_obs.viewer) % nump - 1]
        tightened = any(
            b.color_mask & ~a.color_mask or b.rank_mask & ~a.rank_mask
            for b, a in zip(before, after)
        )
    return OracleFeatures(reward > 0, tightened, obs.fireworks != next_obs.fireworks)


def step(state: GameState, action: Action) -> tuple[Transition, GameState]:
    """Apply ``action`` and package the move as a ``Transition``.

    The next observation is taken from the seat that acts next, so a shared
    policy sees the game as a single cooperative decision stream.
    """
    obs = observe(state, state.current_player)
    nxt, reward, _ = apply_action(state, action)
    nxt_obs = observe(nxt, nxt.current_player)
    feats = oracle_features(obs, action, reward, nxt_obs)
    return Transition(obs, action, reward, nxt_obs, nxt.terminal, feats), nxt


def initial_multiset(config: GameConfig) -> Counter:
    return Counter(full_deck(config))


def card_multiset(state: GameState) -> Counter:
    """Deck, hands, discards and the cards implied by the fireworks."""
    ms = Counter(state.deck)
    for h in state.hands:
        ms.update(h)
    ms.update(state.discard_pile)
    for c, height in enumerate(state.fireworks):
        ms.update(Card(c, r) for r in range(1, height + 1))
    return ms
