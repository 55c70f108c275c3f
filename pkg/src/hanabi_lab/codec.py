"""Canonical text rendering of observations and actions, and the parsers back.

Template ``hanabi-text-v1`` (one section per line, LF separated)::

    hanabi-text-v1
    player 0 of 2 to act
    hint tokens: 8
    life tokens: 3
    fireworks: red=0 yellow=0 green=0 white=0 blue=0
    player +1 cards: p1c0=r1 p1c0:?? p1c0:rygwb p1c0:12345 p1c0:proof=none p1c0:now=play p1c1=...
    your cards: c0:?? c0:rygwb c0:12345 c0:proof=none c1:...
    deck size: 40
    discards: r1 g4                       (only with the discard ablation on)
    last action: player +1 play 2 r1 success      (only when there is one)
    end

Per card the tokens are: identity (partners only), the directly hinted
color/rank (``?`` when not hinted), the remaining possible colors and ranks,
and what the holder can prove from that knowledge and the fireworks
(``proof=play``, ``proof=dead`` or ``proof=none``). Partner cards also carry
their actual status (``now=play``, ``now=dead`` or ``now=later``). The two
status tokens are derived, so the parser checks them rather than storing
them. Every token carries its seat and slot so that a bag-of-tokens model
keeps the binding. Legal actions are deliberately not rendered.
"""

from __future__ import annotations

from dataclasses import dataclass

from hanabi_lab.engine import (
    COLOR_LETTERS,
    COLOR_NAMES,
    Action,
    ActionKind,
    Card,
    CardKnowledge,
    GameConfig,
    LastAction,
    Observation,
    action_id,
    id_action,
    is_dead,
    is_playable,
    known_dead,
    known_playable,
    observation_legal_ids,
)

TEMPLATE_VERSION = "hanabi-text-v1"

__all__ = [
    "TEMPLATE_VERSION",
    "TextTemplate",
    "DEFAULT_TEMPLATE",
    "ParseError",
    "TemplateVersionError",
    "ObservationValidationError",
    "render_observation",
    "parse_observation",
    "render_action",
    "parse_action",
    "action_id",
    "id_action",
]


class ParseError(ValueError):
    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}" if line else message)


class TemplateVersionError(ParseError):
    pass


class ObservationValidationError(ParseError):
    pass


@dataclass(frozen=True)
class TextTemplate:
    version: str = TEMPLATE_VERSION
    color_names: tuple[str, ...] = COLOR_NAMES


DEFAULT_TEMPLATE = TextTemplate()


def _hint_token(k: CardKnowledge) -> str:
    c = "?" if k.hinted_color is None else COLOR_LETTERS[k.hinted_color]
    r = "?" if k.hinted_rank is None else str(k.hinted_rank)
    return c + r


def _proof(k: CardKnowledge, fireworks) -> str:
    if known_playable(k, fireworks):
        return "play"
    return "dead" if known_dead(k, fireworks) else "none"


def _status(card: Card, fireworks) -> str:
    if is_playable(fireworks, card):
        return "play"
    return "dead" if is_dead(fireworks, card) else "later"


def _knowledge_tokens(prefix: str, k: CardKnowledge, fireworks) -> str:
    colors = "".join(COLOR_LETTERS[c] for c in k.possible_colors)
    ranks = "".join(str(r) for r in k.possible_ranks)
    return (f"{prefix}:{_hint_token(k)} {prefix}:{colors} {prefix}:{ranks} "
            f"{prefix}:proof={_proof(k, fireworks)}")


def render_action(action: Action, template: TextTemplate = DEFAULT_TEMPLATE) -> str:
    k = action.kind
    if k is ActionKind.PLAY:
        return f"play {action.card_index}"
    if k is ActionKind.DISCARD:
        return f"discard {action.card_index}"
    if k is ActionKind.HINT_COLOR:
        return f"hint color {template.color_names[action.hint_value]} to player +{action.target_offset}"
    return f"hint rank {action.hint_value} to player +{action.target_offset}"


def _render_last(la: LastAction, template: TextTemplate) -> str:
    s = f"last action: player +{la.actor} {render_action(la.action, template)}"
    if la.action.is_hint:
        return s + " touched " + ",".join(map(str, la.touched))
    s += f" {la.card}"
    if la.action.kind is ActionKind.PLAY:
        s += " success" if la.success else " fail"
    return s


def render_observation(obs: Observation, template: TextTemplate = DEFAULT_TEMPLATE) -> str:
    lines = [
        template.version,
        f"player {obs.viewer} of {obs.num_players} {'to act' if obs.is_current_player else 'waiting'}",
        f"hint tokens: {obs.hint_tokens}",
        f"life tokens: {obs.life_tokens}",
        "fireworks: " + " ".join(
            f"{template.color_names[c]}={h}" for c, h in enumerate(obs.fireworks)
        ),
    ]
    for off, (hand, know) in enumerate(zip(obs.others_hands, obs.others_knowledge), start=1):
        toks = []
        for i, (card, k) in enumerate(zip(hand, know)):
            p = f"p{off}c{i}"
            toks.append(f"{p}={card} {_knowledge_tokens(p, k, obs.fireworks)} "
                        f"{p}:now={_status(card, obs.fireworks)}")
        lines.append(f"player +{off} cards: " + " ".join(toks))
    lines.append("your cards: " + " ".join(
        _knowledge_tokens(f"c{i}", k, obs.fireworks) for i, k in enumerate(obs.own_knowledge)
    ))
    lines.append(f"deck size: {obs.deck_size}")
    if obs.discard_pile is not None:
        lines.append("discards: " + (" ".join(map(str, obs.discard_pile)) or "none"))
    if obs.last_action is not None:
        lines.append(_render_last(obs.last_action, template))
    lines.append("end")
    return "\n".join(lines)


# --------------------------------------------------------------------- parsing


def _color_index(name: str, template: TextTemplate, colors: int, line: int, col: int) -> int:
    try:
        c = template.color_names.index(name)
    except ValueError:
        raise ParseError(f"unknown color {name!r}", line, col) from None
    if c >= colors:
        raise ParseError(f"color {name!r} not in this game", line, col)
    return c


def _int(tok: str, line: int, col: int) -> int:
    if not tok.isdigit():
        raise ParseError(f"expected a non-negative integer, got {tok!r}", line, col)
    return int(tok)


def parse_action(text: str, config: GameConfig, template: TextTemplate = DEFAULT_TEMPLATE) -> Action:
    return _parse_action_tokens(text.split(" "), config, template, 1, 1)


def _parse_action_tokens(toks, config, template, line, col) -> Action:
    try:
        if len(toks) == 2 and toks[0] in ("play", "discard"):
            i = _int(toks[1], line, col)
            a = Action.play(i) if toks[0] == "play" else Action.discard(i)
        elif len(toks) == 6 and toks[0] == "hint" and toks[3:5] == ["to", "player"]:
            if not toks[5].startswith("+"):
                raise ParseError("hint target must look like +k", line, col)
            off = _int(toks[5][1:], line, col)
            if toks[1] == "color":
                a = Action.hint_color(off, _color_index(toks[2], template, config.colors, line, col))
            elif toks[1] == "rank":
                a = Action.hint_rank(off, _int(toks[2], line, col))
            else:
                raise ParseError(f"unknown hint type {toks[1]!r}", line, col)
        else:
            raise ParseError(f"unrecognised action {' '.join(toks)!r}", line, col)
        action_id(a, config)
    except IndexError as e:
        raise ParseError(str(e), line, col) from None
    return a


def _parse_card(tok: str, config: GameConfig, line: int, col: int) -> Card:
    if len(tok) < 2 or tok[0] not in COLOR_LETTERS[: config.colors] or not tok[1:].isdigit():
        raise ParseError(f"bad card {tok!r}", line, col)
    r = int(tok[1:])
    if not 1 <= r <= config.ranks:
        raise ParseError(f"rank out of range in {tok!r}", line, col)
    return Card(COLOR_LETTERS.index(tok[0]), r)


def _parse_knowledge(toks, prefix: str, config: GameConfig, fireworks, line: int,
                     col: int) -> CardKnowledge:
    vals = []
    for t in toks[:3]:
        if not t.startswith(prefix + ":"):
            raise ParseError(f"expected token starting {prefix + ':'!r}, got {t!r}", line, col)
        vals.append(t[len(prefix) + 1:])
    hint, colors, ranks = vals
    if len(hint) != 2:
        raise ParseError(f"bad hint marker {hint!r}", line, col)
    hc = None if hint[0] == "?" else hint[0]
    hr = None if hint[1] == "?" else hint[1]
    letters = COLOR_LETTERS[: config.colors]
    if hc is not None and hc not in letters:
        raise ParseError(f"bad hinted color {hc!r}", line, col)
    if hr is not None and not (hr.isdigit() and 1 <= int(hr) <= config.ranks):
        raise ParseError(f"bad hinted rank {hr!r}", line, col)
    if not colors or any(ch not in letters for ch in colors) or len(set(colors)) != len(colors):
        raise ParseError(f"bad color set {colors!r}", line, col)
    if not ranks or any(not ch.isdigit() or not 1 <= int(ch) <= config.ranks for ch in ranks):
        raise ParseError(f"bad rank set {ranks!r}", line, col)
    k = CardKnowledge.from_sets(
        [letters.index(ch) for ch in colors],
        [int(ch) for ch in ranks],
        None if hc is None else letters.index(hc),
        None if hr is None else int(hr),
    )
    canonical = _knowledge_tokens(prefix, k, fireworks).split(" ")
    if canonical[:3] != list(toks[:3]):
        raise ParseError("knowledge tokens not in canonical form", line, col)
    if canonical[3] != toks[3]:
        raise ObservationValidationError(
            f"{toks[3]!r} contradicts the knowledge (expected {canonical[3]!r})", line, col
        )
    return k


class _Lines:
    def __init__(self, text: str):
        self.lines = text.split("\n")
        self.i = 0

    def peek(self) -> str | None:
        return self.lines[self.i] if self.i < len(self.lines) else None

    def take(self, prefix: str) -> tuple[str, int]:
        if self.i >= len(self.lines):
            raise ParseError(f"unexpected end of text, expected {prefix!r}", self.i + 1, 1)
        s = self.lines[self.i]
        self.i += 1
        if not s.startswith(prefix):
            raise ParseError(f"expected line starting {prefix!r}, got {s[:40]!r}", self.i, 1)
        return s[len(prefix):], self.i


def parse_observation(
    text: str,
    config: GameConfig | None = None,
    template: TextTemplate = DEFAULT_TEMPLATE,
) -> Observation:
    """Inverse of ``render_observation``.

    ``config`` supplies the rule constants for validation; by default the
    standard rules for the player count stated in the text. Legal action ids
    are recomputed from the parsed view.
    """
    lines = _Lines(text)
    head, _ = lines.take("")
    if head != template.version:
        raise TemplateVersionError(
            f"unknown template version {head!r} (expected {template.version!r})", 1, 1
        )
    rest, ln = lines.take("player ")
    toks = rest.split(" ")
    if len(toks) < 4 or toks[1] != "of" or " ".join(toks[3:]) not in ("to act", "waiting"):
        raise ParseError("bad player header", ln, 1)
    viewer = _int(toks[0], ln, 8)
    nump = _int(toks[2], ln, 8)
    is_current = toks[3] == "to"
    if config is None:
        if not 2 <= nump <= 5:
            raise ObservationValidationError(f"bad player count {nump}", ln, 1)
        config = GameConfig(num_players=nump)
    elif config.num_players != nump:
        raise ObservationValidationError("player count does not match config", ln, 1)
    if not viewer < nump:
        raise ObservationValidationError(f"viewer {viewer} out of range", ln, 8)

    rest, ln = lines.take("hint tokens: ")
    hints = _int(rest, ln, 14)
    if hints > config.max_hint_tokens:
        raise ObservationValidationError(
            f"hint tokens {hints} exceed maximum {config.max_hint_tokens}", ln, 14
        )
    rest, ln = lines.take("life tokens: ")
    lives = _int(rest, ln, 14)
    if lives > config.max_life_tokens:
        raise ObservationValidationError(f"life tokens {lives} out of range", ln, 14)

    rest, ln = lines.take("fireworks: ")
    fw = []
    for c, tok in enumerate(rest.split(" ")):
        name, _, h = tok.partition("=")
        if c >= config.colors or name != template.color_names[c]:
            raise ParseError(f"unexpected firework {tok!r}", ln, 12)
        height = _int(h, ln, 12)
        if height > config.ranks:
            raise ObservationValidationError(f"firework {tok!r} too high", ln, 12)
        fw.append(height)
    if len(fw) != config.colors:
        raise ParseError("wrong number of fireworks", ln, 12)

    others_hands, others_know = [], []
    for off in range(1, nump):
        rest, ln = lines.take(f"player +{off} cards: ")
        toks = rest.split(" ")
        if len(toks) % 6 or not toks[0]:
            raise ParseError("partner hand must list six tokens per card", ln, 1)
        hand, know = [], []
        for i in range(len(toks) // 6):
            p = f"p{off}c{i}"
            ident = toks[6 * i]
            if not ident.startswith(p + "="):
                raise ParseError(f"expected {p}=<card>, got {ident!r}", ln, 1)
            card = _parse_card(ident[len(p) + 1:], config, ln, 1)
            k = _parse_knowledge(toks[6 * i + 1: 6 * i + 5], p, config, fw, ln, 1)
            if not k.admits(card):
                raise ObservationValidationError(f"knowledge of {p} excludes its card", ln, 1)
            if toks[6 * i + 5] != f"{p}:now={_status(card, fw)}":
                raise ObservationValidationError(f"status of {p} contradicts its card", ln, 1)
            hand.append(card)
            know.append(k)
        if len(hand) > config.hand_size:
            raise ObservationValidationError("hand too large", ln, 1)
        others_hands.append(tuple(hand))
        others_know.append(tuple(know))

    rest, ln = lines.take("your cards: ")
    toks = rest.split(" ")
    if len(toks) % 4 or not toks[0]:
        raise ParseError("own hand must list four tokens per card", ln, 1)
    own = tuple(
        _parse_knowledge(toks[4 * i: 4 * i + 4], f"c{i}", config, fw, ln, 1)
        for i in range(len(toks) // 4)
    )
    if len(own) > config.hand_size:
        raise ObservationValidationError("hand too large", ln, 1)

    rest, ln = lines.take("deck size: ")
    deck_size = _int(rest, ln, 12)
    if deck_size > config.deck_size - config.hand_size * nump:
        raise ObservationValidationError(f"deck size {deck_size} impossible", ln, 12)

    discards = None
    if (lines.peek() or "").startswith("discards: "):
        rest, ln = lines.take("discards: ")
        discards = () if rest == "none" else tuple(
            _parse_card(t, config, ln, 11) for t in rest.split(" ")
        )

    last = None
    if (lines.peek() or "").startswith("last action: "):
        rest, ln = lines.take("last action: ")
        last = _parse_last(rest, config, template, ln)

    tail, ln = lines.take("end")
    if tail or lines.peek() is not None:
        raise ParseError("trailing content after end marker", ln, 4)

    obs = Observation(
        viewer=viewer,
        num_players=nump,
        others_hands=tuple(others_hands),
        others_knowledge=tuple(others_know),
        own_knowledge=own,
        fireworks=tuple(fw),
        hint_tokens=hints,
        life_tokens=lives,
        deck_size=deck_size,
        is_current_player=is_current,
        discard_pile=discards,
        last_action=last,
    )
    legal = observation_legal_ids(obs, config)
    return Observation(**{**_fields(obs), "legal_action_ids": legal})


def _fields(obs: Observation) -> dict:
    return {name: getattr(obs, name) for name in obs.__dataclass_fields__}


def _parse_last(rest: str, config: GameConfig, template: TextTemplate, ln: int) -> LastAction:
    toks = rest.split(" ")
    if len(toks) < 3 or toks[0] != "player" or not toks[1].startswith("+"):
        raise ParseError("bad last action", ln, 14)
    actor = _int(toks[1][1:], ln, 14)
    if actor >= config.num_players:
        raise ObservationValidationError("last actor out of range", ln, 14)
    body = toks[2:]
    if body[0] == "hint":
        if len(body) != 8 or body[6] != "touched":
            raise ParseError("bad hint in last action", ln, 14)
        action = _parse_action_tokens(body[:6], config, template, ln, 14)
        try:
            touched = tuple(_int(t, ln, 14) for t in body[7].split(","))
        except ParseError:
            raise ParseError("bad touched list", ln, 14) from None
        return LastAction(actor, action, touched=touched)
    if body[0] == "play":
        if len(body) != 4 or body[3] not in ("success", "fail"):
            raise ParseError("bad play in last action", ln, 14)
        action = _parse_action_tokens(body[:2], config, template, ln, 14)
        return LastAction(actor, action, card=_parse_card(body[2], config, ln, 14),
                          success=body[3] == "success")
    if body[0] == "discard":
        if len(body) != 3:
            raise ParseError("bad discard in last action", ln, 14)
        action = _parse_action_tokens(body[:2], config, template, ln, 14)
        return LastAction(actor, action, card=_parse_card(body[2], config, ln, 14))
    raise ParseError(f"unknown last action {body[0]!r}", ln, 14)
