"""Text-conditioned action classifier standing in for the fine-tuned LM.

The teacher hashes the rendered observation into a bag-of-tokens vector and
maps it through an MLP to one logit per action id. It is trained with
categorical cross-entropy on the curated dataset and evaluated by gameplay
score, top-k accuracy and legal-action overlap.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from hanabi_lab.agents import Agent, GameResult, play_game
from hanabi_lab.codec import TEMPLATE_VERSION, render_observation
from hanabi_lab.dataset import DatasetRecord
from hanabi_lab.engine import GameConfig, Observation
from hanabi_lab.nn import (
    DEFAULT_HASH_DIM,
    Mlp,
    TrainConfig,
    TrainingError,
    checkpoint_document,
    feature_indices,
    featurize_batch,
    load_checkpoint_document,
    make_optimizer,
    softmax,
    softmax_ce_batch,
    sparse_rows,
)
from hanabi_lab.rng import derive_seed

log = logging.getLogger(__name__)


class TeacherPolicy(Agent):
    """Classifier over action ids; usable directly as a greedy agent."""

    name = "teacher"

    def __init__(self, net: Mlp, config: GameConfig, hash_dim: int = DEFAULT_HASH_DIM,
                 template_version: str = TEMPLATE_VERSION):
        if net.out_dim != config.num_action_ids:
            raise ValueError(
                f"teacher output {net.out_dim} != {config.num_action_ids} action ids"
            )
        if net.in_dim != hash_dim:
            raise ValueError("network input width must equal the hash dimension")
        self.net = net
        self.config = config
        self.hash_dim = hash_dim
        self.template_version = template_version

    @classmethod
    def create(cls, config: GameConfig, hidden: Sequence[int] = (256, 256),
               hash_dim: int = DEFAULT_HASH_DIM, seed: int = 0) -> TeacherPolicy:
        net = Mlp([hash_dim, *hidden, config.num_action_ids], seed=seed)
        return cls(net, config, hash_dim)

    def copy(self) -> TeacherPolicy:
        return TeacherPolicy(self.net.copy(), self.config, self.hash_dim, self.template_version)

    def check_compatible(self, config: GameConfig) -> None:
        if config.num_action_ids != self.config.num_action_ids or config.num_players != self.config.num_players:
            from hanabi_lab.agents import IncompatibleAgentError

            raise IncompatibleAgentError(
                f"{self.name}: fixed {self.config.num_players}-player head cannot play "
                f"{config.num_players} players"
            )

    def features(self, texts: Sequence[str]):
        return featurize_batch(texts, self.hash_dim)

    def logits_text(self, texts: Sequence[str]) -> np.ndarray:
        return self.net.forward(self.features(texts))

    def scores(self, obs: Observation) -> np.ndarray:
        return self.logits_text([render_observation(obs)])[0]

    def to_json(self, optimizer=None, seed: int = 0) -> str:
        return checkpoint_document(
            {"teacher": self.net}, optimizer,
            template_version=self.template_version, hash_dim=self.hash_dim, rng_seed=seed,
            extra={"head": "teacher", "game_config": self.config.to_dict()},
        )

    @classmethod
    def from_json(cls, text: str) -> TeacherPolicy:
        doc, nets, _ = load_checkpoint_document(text)
        return cls(nets["teacher"], GameConfig.from_dict(doc["game_config"]), doc["hash_dim"],
                   doc["template_version"])


def masked_distribution(logits: np.ndarray, legal_ids: Sequence[int] | None) -> np.ndarray:
    """Softmax over ``logits``; with ``legal_ids`` the rest get probability 0."""
    if legal_ids is None:
        return softmax(logits)
    legal = np.asarray(legal_ids, dtype=np.int64)
    if legal.size == 0:
        raise RuntimeError("every action masked out")
    p = np.zeros_like(logits, dtype=np.float64)
    p[..., legal] = softmax(logits[..., legal])
    return p


def teacher_dist(teacher: TeacherPolicy, obs_text: str, legal_ids: Sequence[int],
                 mask_illegal: bool = True) -> np.ndarray:
    """pi_teacher(a | s) over all action ids."""
    logits = teacher.logits_text([obs_text])[0]
    return masked_distribution(logits, legal_ids if mask_illegal else None)


# ------------------------------------------------------------------ evaluation


@dataclass
class EvalReport:
    mean_score: float
    stderr: float
    max_score: int
    n_games: int
    illegal_attempt_rate: float
    topk_accuracy: dict[int, float] = field(default_factory=dict)
    legal_overlap: dict[int, float] = field(default_factory=dict)
    agent: str = ""
    scores: list[int] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["topk_accuracy"] = {str(k): v for k, v in self.topk_accuracy.items()}
        d["legal_overlap"] = {str(k): v for k, v in self.legal_overlap.items()}
        return d

    CSV_HEADER = "agent,n_games,mean_score,stderr,max_score,illegal_attempt_rate"

    def csv_row(self) -> str:
        return (f"{self.agent},{self.n_games},{self.mean_score!r},{self.stderr!r},"
                f"{self.max_score},{self.illegal_attempt_rate!r}")


def summarize(scores: Sequence[int], decisions: int, illegal: int, agent: str = "") -> EvalReport:
    n = len(scores)
    mean = float(np.mean(scores)) if n else 0.0
    sd = float(np.std(scores, ddof=1)) if n > 1 else 0.0
    return EvalReport(
        mean_score=mean,
        stderr=sd / math.sqrt(n) if n else 0.0,
        max_score=int(max(scores)) if n else 0,
        n_games=n,
        illegal_attempt_rate=illegal / decisions if decisions else 0.0,
        agent=agent,
        scores=list(scores),
    )


def eval_gameplay(agent: Agent | Sequence[Agent], config: GameConfig, n_games: int, seed: int,
                  illegal_policy: str = "mask") -> EvalReport:
    """Seeded games with ``agent`` in every seat (or one agent per seat)."""
    seats = list(agent) if isinstance(agent, (list, tuple)) else [agent] * config.num_players
    if len(seats) != config.num_players:
        raise ValueError("need one agent per seat")
    for a in seats:
        a.check_compatible(config)
    results: list[GameResult] = [
        play_game(seats, config, derive_seed(seed, g), illegal_policy) for g in range(n_games)
    ]
    return summarize(
        [r.score for r in results],
        sum(r.decisions for r in results),
        sum(r.illegal_attempts for r in results),
        agent="+".join(dict.fromkeys(a.name for a in seats)),
    )


def _ranked(logits: np.ndarray) -> np.ndarray:
    # stable descending order: ties go to the lower id
    return np.argsort(-logits, axis=1, kind="stable")


def eval_topk(teacher: TeacherPolicy, test: Sequence[DatasetRecord], ks=range(1, 6)) -> dict[int, float]:
    """Fraction of records whose label is among the top-k (unmasked) logits."""
    if not test:
        raise ValueError("empty test set")
    logits = teacher.logits_text([r.obs_text for r in test])
    order = _ranked(logits)
    labels = np.array([r.action_id for r in test])
    hit_rank = np.argmax(order == labels[:, None], axis=1)
    return {k: float(np.mean(hit_rank < k)) for k in ks}


def eval_legal_overlap(teacher: TeacherPolicy, test: Sequence[DatasetRecord], ks=range(1, 6),
                       masked: bool = False) -> dict[int, float]:
    """Mean fraction of the top-k predicted ids that are legal.

    With ``masked`` the ranking only covers legal ids (so the value is 1).
    """
    logits = teacher.logits_text([r.obs_text for r in test])
    out = {k: 0.0 for k in ks}
    for row, r in zip(logits, test):
        legal = set(r.legal_action_ids)
        if masked:
            row = np.where(np.isin(np.arange(row.size), r.legal_action_ids), row, -np.inf)
        order = np.argsort(-row, kind="stable")
        for k in ks:
            top = [i for i in order[:k] if not masked or np.isfinite(row[i])]
            out[k] += sum(i in legal for i in top) / len(top)
    return {k: v / len(test) for k, v in out.items()}


def accuracy_top1(teacher: TeacherPolicy, records: Sequence[DatasetRecord]) -> float:
    if not records:
        return 0.0
    return eval_topk(teacher, records, ks=(1,))[1]


# ------------------------------------------------------------------ training


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_top1: float
    gameplay_mean: float | None = None

    CSV_HEADER = "epoch,train_loss,val_top1,gameplay_mean"

    def csv_row(self) -> str:
        g = "" if self.gameplay_mean is None else repr(self.gameplay_mean)
        return f"{self.epoch},{self.train_loss!r},{self.val_top1!r},{g}"


class RecordFeatures:
    """Cached sparse features and labels for a record list."""

    def __init__(self, records: Sequence[DatasetRecord], hash_dim: int):
        self.rows = [feature_indices(r.obs_text, hash_dim) for r in records]
        self.labels = np.array([r.action_id for r in records], dtype=np.int64)
        self.hash_dim = hash_dim

    def batch(self, idx):
        return sparse_rows([self.rows[i] for i in idx], self.hash_dim), self.labels[idx]


def fit_epoch(net: Mlp, data: RecordFeatures, optimizer, batch_size: int, rng: np.random.Generator,
              weights: np.ndarray | None = None, max_batches: int | None = None) -> float:
    order = rng.permutation(len(data.labels))
    if max_batches is not None:
        order = order[: max_batches * batch_size]
    total = 0.0
    for start in range(0, len(order), batch_size):
        idx = order[start: start + batch_size]
        x, y = data.batch(idx)
        out, acts = net.forward_cache(x)
        loss, g = softmax_ce_batch(out, y, None if weights is None else weights[idx])
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at batch starting {start}: {loss}")
        optimizer.step(net.params, net.backward(acts, g))
        total += loss * len(idx)
    return total / max(1, len(order))


def train_teacher(
    train: Sequence[DatasetRecord],
    val: Sequence[DatasetRecord],
    cfg: TrainConfig,
    game_config: GameConfig,
    hidden: Sequence[int] = (256, 256),
    hash_dim: int = DEFAULT_HASH_DIM,
    eval_games: int = 0,
    eval_seed: int = 12345,
) -> tuple[TeacherPolicy, list[EpochLog]]:
    """Minimise categorical cross-entropy on ``(obs_text, action_id)``.

    ``cfg.steps > 0`` fixes the number of minibatch updates instead of
    ``cfg.epochs`` (the last pass may be partial). After every pass the validation top-1 accuracy (and, with
    ``eval_games > 0``, the self-play score) is logged; the returned teacher
    is the best epoch by gameplay score when measured, else by validation
    accuracy.
    """
    if not train:
        raise ValueError("empty training set")
    n_ids = game_config.num_action_ids
    if max(r.action_id for r in train) >= n_ids:
        raise ValueError("training labels exceed the action-id range")
    teacher = TeacherPolicy.create(game_config, hidden, hash_dim, seed=cfg.seed)
    data = RecordFeatures(train, hash_dim)
    opt = make_optimizer(cfg)
    rng = np.random.default_rng(cfg.seed)
    curve: list[EpochLog] = []
    best_key, best_params = None, teacher.net.params.copy()
    per_epoch = -(-len(train) // cfg.batch_size)
    n_epochs = -(-cfg.steps // per_epoch) if cfg.steps > 0 else cfg.epochs
    done = 0
    for epoch in range(1, n_epochs + 1):
        budget = cfg.steps - done if cfg.steps > 0 else None
        loss = fit_epoch(teacher.net, data, opt, cfg.batch_size, rng, max_batches=budget)
        done += per_epoch if budget is None else min(per_epoch, budget)
        val_acc = accuracy_top1(teacher, val)
        gp = None
        if eval_games > 0:
            gp = eval_gameplay(teacher, game_config, eval_games, eval_seed).mean_score
        curve.append(EpochLog(epoch, loss, val_acc, gp))
        log.info("teacher epoch %d loss %.4f val_top1 %.4f gameplay %s", epoch, loss, val_acc, gp)
        key = gp if gp is not None else val_acc
        if best_key is None or key > best_key:
            best_key, best_params = key, teacher.net.params.copy()
    teacher.net.load(best_params)
    return teacher, curve
