"""Experiment orchestration: run configs, the staged pipeline, cross-play, emission.

A run is described by one JSON document (``RunConfig``) that is copied
verbatim into its artifact directory. Stages read their inputs from and write
their outputs to that directory, so each can also be run on its own from the
command line. Every file is written deterministically (sorted keys, ``repr``
floats, LF line ends), which makes two runs of the same config byte-identical.
"""

from __future__ import annotations

import csv
import fcntl
import hashlib
import io
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from hanabi_lab.agents import Agent, IncompatibleAgentError, RandomAgent, play_game
from hanabi_lab.dataset import (
    CurationConfig,
    ExpertBot,
    curate,
    generate_trajectories,
    read_jsonl,
    read_trajectories,
    subsample,
    write_jsonl,
    write_trajectories,
)
from hanabi_lab.engine import GameConfig
from hanabi_lab.nn import TrainConfig
from hanabi_lab.rng import derive_seed
from hanabi_lab.selection import SelectionConfig, write_reports
from hanabi_lab.student import StudentAgent, StudentConfig, qnet_from_json, train_student
from hanabi_lab.teacher import (
    EvalReport,
    TeacherPolicy,
    eval_gameplay,
    eval_legal_overlap,
    eval_topk,
    summarize,
    train_teacher,
)

log = logging.getLogger(__name__)

DATA_FRACTIONS = (0.05, 0.10, 0.25, 0.50, 0.75, 1.0)
SCHEMA_PATH = Path(__file__).with_name("metrics.schema.json")
CONFIG_NAME = "config.json"
LOCK_NAME = ".lock"


class RunConfigError(ValueError):
    """The run configuration is invalid."""


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


# ------------------------------------------------------------------ config


@dataclass
class DataSettings:
    n_games: int = 1500
    master_seed: int = 1
    workers: int = 1


@dataclass
class TeacherSettings:
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=6))
    hidden: tuple[int, ...] = (256, 256)
    hash_dim: int = 4096
    eval_games: int = 0       # per-epoch gameplay used for checkpoint selection


@dataclass
class EvalSettings:
    n_games: int = 1200
    seed: int = 4242
    topk: tuple[int, ...] = (1, 2, 3, 4, 5)
    crossplay_games: int = 100
    player_counts: tuple[int, ...] = (2,)


@dataclass
class Ablation:
    discard_in_obs: bool = False
    data_fraction: float = 1.0


@dataclass
class RunConfig:
    game: GameConfig = field(default_factory=GameConfig)
    data: DataSettings = field(default_factory=DataSettings)
    curation: CurationConfig = field(default_factory=lambda: CurationConfig(min_score=15))
    teacher: TeacherSettings = field(default_factory=TeacherSettings)
    student: StudentConfig | None = field(default_factory=StudentConfig)
    distill: bool = True
    selection: SelectionConfig | None = None
    eval: EvalSettings = field(default_factory=EvalSettings)
    ablation: Ablation = field(default_factory=Ablation)
    output_dir: str = "runs/default"

    @property
    def game_config(self) -> GameConfig:
        g = self.game.to_dict()
        g["discard_in_obs"] = self.ablation.discard_in_obs
        return GameConfig.from_dict(g)

    def to_dict(self) -> dict:
        d = {
            "game": self.game.to_dict(),
            "data": asdict(self.data),
            "curation": asdict(self.curation),
            "teacher": {
                "train": self.teacher.train.to_dict(),
                "hidden": list(self.teacher.hidden),
                "hash_dim": self.teacher.hash_dim,
                "eval_games": self.teacher.eval_games,
            },
            "student": None if self.student is None else self.student.to_dict(),
            "distill": self.distill,
            "selection": None if self.selection is None else self.selection.to_dict(),
            "eval": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.eval).items()},
            "ablation": asdict(self.ablation),
            "output_dir": self.output_dir,
        }
        if d["student"] is not None:
            d["student"]["hidden"] = list(d["student"]["hidden"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {"game", "data", "curation", "teacher", "student", "distill", "selection", "eval",
                 "ablation", "output_dir"}
        extra = set(d) - known
        if extra:
            raise RunConfigError(f"unknown config keys: {sorted(extra)}")
        try:
            t = d.get("teacher", {})
            ev = d.get("eval", {})
            cfg = cls(
                game=GameConfig.from_dict(d["game"]) if "game" in d else GameConfig(),
                data=DataSettings(**d.get("data", {})),
                curation=CurationConfig(**d["curation"]) if "curation" in d else CurationConfig(min_score=15),
                teacher=TeacherSettings(
                    train=TrainConfig(**t["train"]) if "train" in t else TrainConfig(epochs=6),
                    hidden=tuple(t.get("hidden", (256, 256))),
                    hash_dim=t.get("hash_dim", 4096),
                    eval_games=t.get("eval_games", 0),
                ),
                student=None if d.get("student", {}) is None else StudentConfig(**d.get("student", {})),
                distill=d.get("distill", True),
                selection=None if d.get("selection") is None else SelectionConfig(**d["selection"]),
                eval=EvalSettings(**{k: tuple(v) if isinstance(v, list) else v for k, v in ev.items()}),
                ablation=Ablation(**d.get("ablation", {})),
                output_dir=d.get("output_dir", "runs/default"),
            )
        except (TypeError, ValueError, KeyError) as e:
            if isinstance(e, RunConfigError):
                raise
            raise RunConfigError(str(e)) from e
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> RunConfig:
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise RunConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(d, dict):
            raise RunConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def validate(self) -> None:
        if self.ablation.data_fraction not in DATA_FRACTIONS:
            raise RunConfigError(f"data_fraction must be one of {DATA_FRACTIONS}")
        if self.data.n_games < 1 or self.eval.n_games < 1:
            raise RunConfigError("game counts must be positive")
        if any(not 2 <= p <= 5 for p in self.eval.player_counts):
            raise RunConfigError("player counts must lie in 2..5")
        if self.selection is not None and (self.student is None or not self.distill):
            raise RunConfigError("teacher refinement runs inside distillation; enable the student")


def smoke_config(output_dir: str = "runs/smoke") -> RunConfig:
    """Small end-to-end config: 200 games, tiny nets, about 2000 updates."""
    return RunConfig(
        data=DataSettings(n_games=200, master_seed=3),
        curation=CurationConfig(min_score=15, per_class=300, seed=3),
        teacher=TeacherSettings(train=TrainConfig(epochs=3, seed=3), hidden=(64,), hash_dim=1024),
        student=StudentConfig(hash_dim=512, hidden=(64,), env_steps=9_000, learning_starts=1_000,
                              train_every=4, target_sync=250, eval_every=3_000, eval_games=20,
                              seed=3, distill={"warmup_steps": 500, "decay_steps": 1_000}),
        eval=EvalSettings(n_games=50, crossplay_games=20, player_counts=(2,)),
        output_dir=output_dir,
    )


# ------------------------------------------------------------------ file helpers


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _write_json(path: Path, obj: Any) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    _write_text(path, buf.getvalue())


def _read_csv(path: Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def _require(run_dir: Path, stage: str, *names: str) -> None:
    missing = [n for n in names if not (run_dir / n).exists()]
    if missing:
        raise StageError(stage, f"missing inputs: {', '.join(missing)}")


def directory_digest(run_dir: str | Path) -> dict[str, str]:
    """sha256 of every file under ``run_dir`` (lockfile excluded)."""
    root = Path(run_dir)
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != LOCK_NAME:
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@contextmanager
def run_lock(run_dir: Path):
    """Exclusive lock: one pipeline per output directory."""
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / LOCK_NAME
    fh = open(path, "w")
    try:
        fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
    except BlockingIOError:
        fh.close()
        raise StageError("lock", f"{run_dir} is in use by another pipeline") from None
    try:
        yield
    finally:
        fcntl.flock(fh, fcntl.LOCK_UN)
        fh.close()
        path.unlink(missing_ok=True)


# ------------------------------------------------------------------ stages


def stage_gen_data(cfg: RunConfig, run_dir: Path) -> None:
    gc = cfg.game_config
    trajs = generate_trajectories(ExpertBot(gc), gc, cfg.data.n_games, cfg.data.master_seed,
                                  cfg.data.workers)
    write_trajectories(trajs, run_dir / "trajectories.jsonl")
    scores = [t.final_score for t in trajs]
    _write_json(run_dir / "expert_games.json", summarize(scores, 0, 0, "expert").to_dict())


def stage_curate(cfg: RunConfig, run_dir: Path) -> None:
    _require(run_dir, "curate", "trajectories.jsonl")
    trajs = read_trajectories(run_dir / "trajectories.jsonl")
    train, val, test, report = curate(trajs, cfg.curation, cfg.game_config)
    write_jsonl(train, run_dir / "train.jsonl")
    write_jsonl(val, run_dir / "val.jsonl")
    write_jsonl(test, run_dir / "test.jsonl")
    _write_json(run_dir / "curation_report.json", report.to_dict())
    if not train:
        raise StageError("curate", "curation left no training records")


def _teacher_report(teacher: TeacherPolicy, cfg: RunConfig, test) -> dict:
    rep = eval_gameplay(teacher, cfg.game_config, cfg.eval.n_games, cfg.eval.seed)
    if test:
        rep.topk_accuracy = eval_topk(teacher, test, cfg.eval.topk)
        rep.legal_overlap = eval_legal_overlap(teacher, test, cfg.eval.topk)
    d = rep.to_dict()
    if test:
        d["legal_overlap_masked"] = {str(k): v for k, v in
                                     eval_legal_overlap(teacher, test, cfg.eval.topk, masked=True).items()}
    return d


def stage_train_teacher(cfg: RunConfig, run_dir: Path) -> None:
    _require(run_dir, "train-teacher", "train.jsonl", "val.jsonl", "test.jsonl")
    train = read_jsonl(run_dir / "train.jsonl")
    val = read_jsonl(run_dir / "val.jsonl")
    test = read_jsonl(run_dir / "test.jsonl")
    if cfg.ablation.data_fraction < 1.0:
        train = subsample(train, cfg.ablation.data_fraction, cfg.curation.seed)
    t = cfg.teacher
    teacher, curve = train_teacher(train, val, t.train, cfg.game_config, t.hidden, t.hash_dim,
                                   eval_games=t.eval_games, eval_seed=derive_seed(cfg.eval.seed, 1))
    _write_text(run_dir / "teacher.json", teacher.to_json(seed=t.train.seed))
    _write_csv(run_dir / "teacher_curve.csv", ["epoch", "train_loss", "val_top1", "gameplay_mean"],
               [[c.epoch, c.train_loss, c.val_top1, "" if c.gameplay_mean is None else c.gameplay_mean]
                for c in curve])
    _write_json(run_dir / "teacher_eval.json", _teacher_report(teacher, cfg, test))


def stage_train_student(cfg: RunConfig, run_dir: Path) -> None:
    if cfg.student is None:
        raise StageError("train-student", "config has no student section")
    teacher = None
    if cfg.distill:
        _require(run_dir, "train-student", "teacher.json")
        teacher = TeacherPolicy.from_json((run_dir / "teacher.json").read_text(encoding="utf-8"))
    gc = cfg.game_config
    run = train_student(gc, teacher, cfg.student, selection=cfg.selection)
    _write_text(run_dir / "student.json", run.to_json())
    _write_csv(run_dir / "student_curve.csv",
               ["env_steps", "updates", "lambda", "eval_mean", "eval_stderr"],
               [[c.env_steps, c.updates, c.lam, c.eval_mean, c.eval_stderr] for c in run.curve])
    rep = eval_gameplay(StudentAgent(run.net, gc), gc, cfg.eval.n_games, cfg.eval.seed)
    _write_json(run_dir / "student_eval.json", rep.to_dict())
    if cfg.selection is not None:
        write_reports(run_dir / "refinement.jsonl", run.refinements)
        _write_text(run_dir / "teacher_refined.json", run.teacher.to_json(seed=cfg.selection.seed))
        _write_json(run_dir / "teacher_refined_eval.json",
                    eval_gameplay(run.teacher, gc, cfg.eval.n_games, cfg.eval.seed).to_dict())


def stage_refine(cfg: RunConfig, run_dir: Path) -> None:
    """Distillation run with in-loop teacher refinement (needs a selection section)."""
    if cfg.selection is None:
        raise StageError("refine", "config has no selection section")
    stage_train_student(cfg, run_dir)


def load_agents(cfg: RunConfig, run_dir: Path) -> list[Agent]:
    gc = cfg.game_config
    agents: list[Agent] = [RandomAgent(gc, seed=cfg.eval.seed), ExpertBot(gc)]
    if (run_dir / "teacher.json").exists():
        agents.append(TeacherPolicy.from_json((run_dir / "teacher.json").read_text(encoding="utf-8")))
    if (run_dir / "student.json").exists():
        agents.append(StudentAgent(qnet_from_json((run_dir / "student.json").read_text(encoding="utf-8"))))
    return agents


def stage_eval(cfg: RunConfig, run_dir: Path) -> None:
    gc = cfg.game_config
    out = {}
    for a in load_agents(cfg, run_dir):
        out[a.name] = eval_gameplay(a, gc, cfg.eval.n_games, cfg.eval.seed).to_dict()
    _write_json(run_dir / "eval.json", out)


@dataclass(frozen=True)
class CrossplayCell:
    row: str
    col: str
    players: int
    mean: float
    stderr: float
    n: int


def crossplay(agents: Sequence[Agent], player_counts: Sequence[int], n_games: int, seed: int,
              base_config: GameConfig | None = None) -> list[CrossplayCell]:
    """Every ordered (row, column) agent pair at every player count.

    Seats alternate row/column agents, with the starting seat rotating from
    game to game; the diagonal is self-play. Game ``g`` of a cell uses seed
    ``derive_seed(seed, g)`` so cells share deals.
    """
    if not agents:
        raise ValueError("need at least one agent")
    base = base_config or GameConfig()
    cells = []
    for p in player_counts:
        gd = base.to_dict()
        gd.update(num_players=p, hand_size=0)
        gc = GameConfig.from_dict(gd)
        for a in agents:
            try:
                a.check_compatible(gc)
            except IncompatibleAgentError as e:
                raise IncompatibleAgentError(f"agent {a.name!r} cannot play {p} players: {e}") from None
        for row in agents:
            for col in agents:
                scores = []
                for g in range(n_games):
                    seats = [row if (i + g) % 2 == 0 else col for i in range(p)]
                    scores.append(play_game(seats, gc, derive_seed(seed, g)).score)
                rep = summarize(scores, 0, 0)
                cells.append(CrossplayCell(row.name, col.name, p, rep.mean_score, rep.stderr, n_games))
    return cells


CROSSPLAY_HEADER = ["row_agent", "col_agent", "players", "mean", "stderr", "n"]


def stage_crossplay(cfg: RunConfig, run_dir: Path) -> None:
    agents = load_agents(cfg, run_dir)
    cells = crossplay(agents, cfg.eval.player_counts, cfg.eval.crossplay_games,
                      derive_seed(cfg.eval.seed, 2), cfg.game_config)
    _write_csv(run_dir / "crossplay_cells.csv", CROSSPLAY_HEADER,
               [[c.row, c.col, c.players, c.mean, c.stderr, c.n] for c in cells])


# ------------------------------------------------------------------ emission


STAGE_OUTPUTS = {
    "gen-data": ["trajectories.jsonl", "expert_games.json"],
    "curate": ["train.jsonl", "val.jsonl", "test.jsonl", "curation_report.json"],
    "train-teacher": ["teacher.json", "teacher_curve.csv", "teacher_eval.json"],
    "train-student": ["student.json", "student_curve.csv", "student_eval.json"],
    "eval": ["eval.json"],
    "crossplay": ["crossplay_cells.csv"],
}


def emit_results(run_dir: str | Path) -> dict[str, Path]:
    """Collect stage outputs into ``curves.csv``, ``crossplay.csv`` and ``metrics.json``."""
    import jsonschema

    run_dir = Path(run_dir)
    needed = [n for stage in ("curate", "train-teacher", "train-student", "eval", "crossplay")
              for n in STAGE_OUTPUTS[stage]]
    missing = [n for n in needed if not (run_dir / n).exists()]
    if missing:
        raise StageError("emit", "missing stage outputs: " + ", ".join(missing))
    curve = _read_csv(run_dir / "student_curve.csv")
    _write_csv(run_dir / "curves.csv", ["run", "env_steps", "updates", "lambda", "eval_mean", "eval_stderr"],
               [["student", r["env_steps"], r["updates"], r["lambda"], r["eval_mean"], r["eval_stderr"]]
                for r in curve])
    cells = _read_csv(run_dir / "crossplay_cells.csv")
    _write_csv(run_dir / "crossplay.csv", CROSSPLAY_HEADER, [[c[h] for h in CROSSPLAY_HEADER] for c in cells])

    def load(name):
        return json.loads((run_dir / name).read_text(encoding="utf-8"))

    teacher_curve = _read_csv(run_dir / "teacher_curve.csv")
    metrics = {
        "curation": load("curation_report.json"),
        "teacher": load("teacher_eval.json"),
        "teacher_curve": [
            {"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]),
             "val_top1": float(r["val_top1"]),
             "gameplay_mean": None if r["gameplay_mean"] == "" else float(r["gameplay_mean"])}
            for r in teacher_curve
        ],
        "student": load("student_eval.json"),
        "eval": load("eval.json"),
        "crossplay_cells": len(cells),
    }
    if (run_dir / "teacher_refined_eval.json").exists():
        metrics["teacher_refined"] = load("teacher_refined_eval.json")
    schema = json.loads(SCHEMA_PATH.read_text(encoding="utf-8"))
    jsonschema.validate(metrics, schema)
    _write_json(run_dir / "metrics.json", metrics)
    return {n: run_dir / n for n in ("curves.csv", "crossplay.csv", "metrics.json")}


STAGES = {
    "gen-data": stage_gen_data,
    "curate": stage_curate,
    "train-teacher": stage_train_teacher,
    "train-student": stage_train_student,
    "refine": stage_refine,
    "eval": stage_eval,
    "crossplay": stage_crossplay,
}

PIPELINE = ("gen-data", "curate", "train-teacher", "train-student", "eval", "crossplay")


def prepare_dir(cfg: RunConfig, run_dir: str | Path | None = None, config_text: str | None = None) -> Path:
    """Create the artifact directory and persist the config next to the outputs."""
    d = Path(run_dir if run_dir is not None else cfg.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    _write_text(d / CONFIG_NAME, config_text if config_text is not None else cfg.to_json())
    return d


def run_stage(name: str, cfg: RunConfig, run_dir: Path) -> None:
    fn = STAGES[name]
    try:
        fn(cfg, run_dir)
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, f"{type(e).__name__}: {e}") from e


def run_pipeline(cfg: RunConfig, run_dir: str | Path | None = None,
                 config_text: str | None = None) -> Path:
    """generate -> curate -> train-teacher -> train-student -> eval -> crossplay -> emit."""
    d = Path(run_dir if run_dir is not None else cfg.output_dir)
    with run_lock(d):
        prepare_dir(cfg, d, config_text)
        stages = [s for s in PIPELINE if s != "train-student" or cfg.student is not None]
        for s in stages:
            log.info("stage %s", s)
            run_stage(s, cfg, d)
        if cfg.student is not None:
            try:
                emit_results(d)
            except StageError:
                raise
            except Exception as e:
                raise StageError("emit", f"{type(e).__name__}: {e}") from e
    return d
