"""Expert trajectories and the curation pipeline.

``generate_trajectories`` plays seeded self-play games with a scripted
expert; ``curate`` turns them into a balanced, de-duplicated, split dataset:
filter by final score -> flatten -> per-class sampling -> dedup on the
observation text -> test/val/train split.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

from hanabi_lab.agents import Agent
from hanabi_lab.codec import TEMPLATE_VERSION, TemplateVersionError, render_action, render_observation
from hanabi_lab.engine import (
    Action,
    CardKnowledge,
    GameConfig,
    Observation,
    Transition,
    action_id,
    id_action,
    is_playable,
    known_dead,
    known_playable,
    new_game,
    observe,
    step,
)
from hanabi_lab.rng import SplitMix64, derive_seed

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ expert bot


class ExpertBot(Agent):
    """Deterministic rule ladder standing in for a trained expert.

    1. Play the lowest-index card that is certainly playable.
    2. With a hint token, clue a partner's playable card that its holder
       cannot yet prove playable (rank clue if the rank is still open,
       otherwise color); lowest card index first, then nearest partner.
    3. Below the hint cap, discard a certainly-dead card, else the oldest
       card with no direct clue, else the oldest card.
    4. Otherwise clue the rank of the next player's newest card.

    It never misplays: it only plays cards whose every possible identity is
    playable.
    """

    name = "expert"

    def __init__(self, config: GameConfig):
        self.config = config

    def check_compatible(self, config: GameConfig) -> None:
        self.config = config

    def propose(self, obs: Observation) -> Action:
        return self.act(obs)

    def act(self, obs: Observation) -> Action:
        return expert_act(obs, self.config)


def expert_act(obs: Observation, config: GameConfig) -> Action:
    fw = obs.fireworks
    own = obs.own_knowledge
    for i, k in enumerate(own):
        if known_playable(k, fw):
            return Action.play(i)

    if obs.hint_tokens > 0:
        best = None
        for off, (hand, know) in enumerate(zip(obs.others_hands, obs.others_knowledge), start=1):
            for i, (card, k) in enumerate(zip(hand, know)):
                if is_playable(fw, card) and not known_playable(k, fw):
                    if best is None or (i, off) < best[:2]:
                        best = (i, off, card, k)
        if best is not None:
            i, off, card, k = best
            if k.rank_mask & (k.rank_mask - 1):
                return Action.hint_rank(off, card.rank)
            return Action.hint_color(off, card.color)

    if obs.hint_tokens < config.max_hint_tokens:
        for i, k in enumerate(own):
            if known_dead(k, fw):
                return Action.discard(i)
        for i in range(len(own) - 1, -1, -1):
            if own[i].unhinted:
                return Action.discard(i)
        return Action.discard(len(own) - 1)

    return Action.hint_rank(1, obs.others_hands[0][0].rank)


# ------------------------------------------------------------------ trajectories


@dataclass
class TrajectoryStep:
    turn: int
    player: int
    obs_text: str
    action_id: int
    legal_action_ids: tuple[int, ...]
    reward: float
    done: bool


@dataclass
class Trajectory:
    game_id: int
    seed: int
    steps: list[TrajectoryStep]
    final_score: int

    def to_dict(self) -> dict:
        d = asdict(self)
        for s in d["steps"]:
            s["legal_action_ids"] = list(s["legal_action_ids"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Trajectory:
        steps = [TrajectoryStep(**{**s, "legal_action_ids": tuple(s["legal_action_ids"])})
                 for s in d["steps"]]
        return cls(d["game_id"], d["seed"], steps, d["final_score"])


def play_trajectory(agent: Agent, config: GameConfig, game_id: int, seed: int) -> Trajectory:
    cfg = config.with_seed(seed)
    state = new_game(cfg)
    agent.reset(seed)
    steps = []
    while not state.terminal:
        p = state.current_player
        obs = observe(state, p)
        a = agent.act(obs)
        aid = action_id(a, cfg)
        tr, state = step(state, a)
        steps.append(TrajectoryStep(
            turn=state.turn - 1,
            player=p,
            obs_text=render_observation(obs),
            action_id=aid,
            legal_action_ids=obs.legal_action_ids,
            reward=tr.reward,
            done=tr.done,
        ))
    return Trajectory(game_id, seed, steps, state.score_cache)


def replay_transitions(traj: Trajectory, config: GameConfig) -> list[Transition]:
    """Rebuild full ``Transition`` objects by re-simulating the game."""
    state = new_game(config.with_seed(traj.seed))
    out = []
    for s in traj.steps:
        tr, state = step(state, id_action(s.action_id, config))
        out.append(tr)
    return out


def _play_chunk(args):
    agent, config, ids, master_seed = args
    return [play_trajectory(agent, config, g, derive_seed(master_seed, g)) for g in ids]


def generate_trajectories(agent: Agent, config: GameConfig, n_games: int, master_seed: int,
                          workers: int = 1, first_game_id: int = 0) -> list[Trajectory]:
    """Self-play ``n_games`` seeded games; output ordered by game id.

    Game ``g`` uses seed ``derive_seed(master_seed, g)``, so the result does
    not depend on ``workers``.
    """
    ids = list(range(first_game_id, first_game_id + n_games))
    if workers <= 1 or n_games < 2 * workers:
        return _play_chunk((agent, config, ids, master_seed))
    chunks = [ids[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(workers) as ex:
        parts = list(ex.map(_play_chunk, [(agent, config, c, master_seed) for c in chunks]))
    merged = [t for part in parts for t in part]
    merged.sort(key=lambda t: t.game_id)
    return merged


# ------------------------------------------------------------------ records


@dataclass(frozen=True)
class DatasetRecord:
    game_id: int
    turn: int
    player: int
    obs_text: str
    action_text: str
    action_id: int
    legal_action_ids: tuple[int, ...]
    reward: float
    score_final: int
    template_version: str = TEMPLATE_VERSION


RECORD_FIELDS = tuple(f.name for f in fields(DatasetRecord))


def flatten(trajectories: Iterable[Trajectory], config: GameConfig) -> list[DatasetRecord]:
    out = []
    for t in trajectories:
        for s in t.steps:
            out.append(DatasetRecord(
                game_id=t.game_id,
                turn=s.turn,
                player=s.player,
                obs_text=s.obs_text,
                action_text=render_action(id_action(s.action_id, config)),
                action_id=s.action_id,
                legal_action_ids=tuple(s.legal_action_ids),
                reward=s.reward,
                score_final=t.final_score,
            ))
    return out


@dataclass
class CurationConfig:
    min_score: int = 20
    per_class: int = 2200
    test_fraction: float = 0.10
    val_fraction_of_remainder: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.test_fraction < 1 or not 0 < self.val_fraction_of_remainder < 1:
            raise ValueError("split fractions must lie in (0, 1)")
        if self.per_class < 1:
            raise ValueError("per_class quota must be at least 1")


@dataclass
class CurationReport:
    games_in: int
    games_kept: int
    records_per_class: dict[int, int]
    pre_dedup_size: int
    duplicates_dropped: int
    split_sizes: dict[str, int]
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["records_per_class"] = {str(k): v for k, v in sorted(self.records_per_class.items())}
        return d


def filter_games(trajectories: Sequence[Trajectory], min_score: int) -> list[Trajectory]:
    return [t for t in trajectories if t.final_score > min_score]


def balance(records: Sequence[DatasetRecord], per_class: int, seed: int,
            num_classes: int | None = None) -> tuple[list[DatasetRecord], dict[int, int], list[str]]:
    """Sample up to ``per_class`` records per action id, without replacement.

    The survivors keep their original relative order.
    """
    by_class: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        by_class.setdefault(r.action_id, []).append(i)
    keep: list[int] = []
    counts: dict[int, int] = {}
    warnings = []
    classes = range(num_classes) if num_classes else sorted(by_class)
    for c in classes:
        idx = by_class.get(c, [])
        if len(idx) > per_class:
            idx = SplitMix64(derive_seed(seed, c)).sample(idx, per_class)
        counts[c] = len(idx)
        if not idx:
            warnings.append(f"class {c} has no records")
        elif len(idx) < per_class:
            warnings.append(f"class {c} short of quota: {len(idx)}/{per_class}")
        keep.extend(idx)
    keep.sort()
    return [records[i] for i in keep], counts, warnings


def dedup(records: Sequence[DatasetRecord]) -> tuple[list[DatasetRecord], int]:
    seen = set()
    out = []
    for r in records:
        if r.obs_text in seen:
            continue
        seen.add(r.obs_text)
        out.append(r)
    return out, len(records) - len(out)


def split(records: Sequence[DatasetRecord], cfg: CurationConfig):
    order = list(range(len(records)))
    SplitMix64(derive_seed(cfg.seed, 1 << 32)).shuffle(order)
    n_test = int(round(cfg.test_fraction * len(records)))
    n_val = int(round(cfg.val_fraction_of_remainder * (len(records) - n_test)))
    test = [records[i] for i in sorted(order[:n_test])]
    val = [records[i] for i in sorted(order[n_test: n_test + n_val])]
    train = [records[i] for i in sorted(order[n_test + n_val:])]
    return train, val, test


def curate(trajectories: Sequence[Trajectory], cfg: CurationConfig, config: GameConfig):
    """Returns ``(train, val, test, report)``."""
    kept = filter_games(trajectories, cfg.min_score)
    warnings = []
    if not kept:
        warnings.append(f"no game scored above {cfg.min_score}")
    flat = flatten(kept, config)
    balanced, counts, w = balance(flat, cfg.per_class, cfg.seed, config.num_action_ids)
    if kept:
        warnings.extend(w)
    unique, dropped = dedup(balanced)
    train, val, test = split(unique, cfg)
    for msg in warnings:
        log.warning(msg)
    report = CurationReport(
        games_in=len(trajectories),
        games_kept=len(kept),
        records_per_class=counts,
        pre_dedup_size=len(balanced),
        duplicates_dropped=dropped,
        split_sizes={"train": len(train), "val": len(val), "test": len(test)},
        warnings=warnings,
    )
    return train, val, test, report


def subsample(records: Sequence[DatasetRecord], fraction: float, seed: int) -> list[DatasetRecord]:
    """Seeded random ``fraction`` of ``records`` (order preserved)."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    n = max(1, int(round(fraction * len(records))))
    if n >= len(records):
        return list(records)
    idx = sorted(SplitMix64(derive_seed(seed, 7)).sample(range(len(records)), n))
    return [records[i] for i in idx]


# ------------------------------------------------------------------ JSONL


class JsonlError(ValueError):
    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")


def record_to_json(r: DatasetRecord) -> str:
    d = {name: getattr(r, name) for name in RECORD_FIELDS}
    d["legal_action_ids"] = list(r.legal_action_ids)
    return json.dumps(d, separators=(",", ":"))


def write_jsonl(records: Iterable[DatasetRecord], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(record_to_json(r))
            f.write("\n")


def read_jsonl(path: str | os.PathLike, template_version: str = TEMPLATE_VERSION) -> list[DatasetRecord]:
    out = []
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for n, line in enumerate(lines, start=1):
        try:
            d = json.loads(line)
        except json.JSONDecodeError as e:
            raise JsonlError(f"malformed JSON ({e.msg})", n) from None
        if not isinstance(d, dict) or set(d) != set(RECORD_FIELDS):
            raise JsonlError("keys do not match the dataset record fields", n)
        if d["template_version"] != template_version:
            raise TemplateVersionError(
                f"record uses template {d['template_version']!r}, expected {template_version!r}", n, 1
            )
        d["legal_action_ids"] = tuple(d["legal_action_ids"])
        out.append(DatasetRecord(**d))
    return out


def write_trajectories(trajectories: Iterable[Trajectory], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for t in trajectories:
            f.write(json.dumps(t.to_dict(), separators=(",", ":")))
            f.write("\n")


def read_trajectories(path: str | os.PathLike) -> list[Trajectory]:
    out = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, start=1):
            try:
                out.append(Trajectory.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise JsonlError(f"bad trajectory ({e})", n) from None
    return out
