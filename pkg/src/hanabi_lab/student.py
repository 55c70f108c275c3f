"""Value-learning student: DQN and DRRN Q-heads, replay, TD and distillation.

Both heads are driven through one pair interface: a batch of observation
feature rows plus a list of ``(row, action id)`` pairs to score. That lets
``td_loss`` and ``distill_loss`` ignore which head they are training.

``QNetDqn`` maps the hashed observation to one value per action id of a fixed
player count. ``QNetDrrn`` embeds the observation and each candidate
action's text separately and scores the concatenation, so it accepts any
action set, including the larger one of a different player count.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from hanabi_lab.agents import Agent, IncompatibleAgentError
from hanabi_lab.codec import TEMPLATE_VERSION, render_action, render_observation
from hanabi_lab.engine import (
    GameConfig,
    Observation,
    OracleFeatures,
    action_id,
    id_action,
    is_terminal,
    new_game,
    observe,
    step,
)
from hanabi_lab.nn import (
    Mlp,
    Optimizer,
    TrainingError,
    checkpoint_document,
    fold_hashes,
    load_checkpoint_document,
    log_softmax,
    make_optimizer,
    TrainConfig,
    sparse_rows,
    token_hashes,
)
from hanabi_lab.rng import SplitMix64, derive_seed

log = logging.getLogger(__name__)


class StudentDivergedError(TrainingError):
    """Training produced a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message: str, checkpoint: str, curve: list):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.curve = curve


# ------------------------------------------------------------------ heads


def _share(nets: Sequence[Mlp]) -> np.ndarray:
    """Move the parameters of ``nets`` into one flat array and rebind them."""
    flat = np.concatenate([n.params for n in nets])
    off = 0
    for n in nets:
        size = n.params.size
        n.params = flat[off: off + size]
        n._bind()
        off += size
    return flat


class QNet:
    """Common surface of the two heads.

    ``params`` is a single flat vector; ``pair_forward`` scores
    ``(row, action id)`` pairs against a feature batch and ``pair_backward``
    returns the flat gradient of ``sum(grad_q * q)``.
    """

    head = ""
    config: GameConfig
    hash_dim: int
    params: np.ndarray

    def nets(self) -> dict[str, Mlp]:
        raise NotImplementedError

    def pair_forward(self, x, rows: np.ndarray, ids: np.ndarray):
        raise NotImplementedError

    def pair_backward(self, cache, grad_q: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def pair_values(self, x, rows, ids) -> np.ndarray:
        return self.pair_forward(x, np.asarray(rows), np.asarray(ids))[0]

    def supports(self, config: GameConfig) -> bool:
        raise NotImplementedError

    def copy(self) -> QNet:
        raise NotImplementedError

    def load(self, params: np.ndarray) -> None:
        self.params[...] = params

    def to_json(self, optimizer: Optimizer | None = None, seed: int = 0, extra: dict | None = None) -> str:
        doc_extra = {"head": self.head, "game_config": self.config.to_dict()}
        doc_extra.update(self._extra())
        if extra:
            doc_extra.update(extra)
        return checkpoint_document(self.nets(), optimizer, template_version=TEMPLATE_VERSION,
                                   hash_dim=self.hash_dim, rng_seed=seed, extra=doc_extra)

    def _extra(self) -> dict:
        return {}


class QNetDqn(QNet):
    """Hashed observation -> one Q-value per action id."""

    head = "dqn"

    def __init__(self, config: GameConfig, hash_dim: int = 1024, hidden: Sequence[int] = (128, 128),
                 seed: int = 0, net: Mlp | None = None):
        self.config = config
        self.hash_dim = hash_dim
        self.net = net if net is not None else Mlp([hash_dim, *hidden, config.num_action_ids], seed=seed)
        if self.net.out_dim != config.num_action_ids:
            raise ValueError("output size must equal the number of action ids")
        self.params = self.net.params

    def nets(self) -> dict[str, Mlp]:
        return {"q": self.net}

    def pair_forward(self, x, rows, ids):
        out, acts = self.net.forward_cache(x)
        return out[rows, ids], (out.shape, acts, rows, ids)

    def pair_backward(self, cache, grad_q):
        shape, acts, rows, ids = cache
        g = np.zeros(shape)
        np.add.at(g, (rows, ids), grad_q)
        return self.net.backward(acts, g)

    def all_values(self, x) -> np.ndarray:
        return self.net.forward(x)

    def supports(self, config: GameConfig) -> bool:
        return (config.num_players == self.config.num_players
                and config.num_action_ids == self.config.num_action_ids)

    def copy(self) -> QNetDqn:
        return QNetDqn(self.config, self.hash_dim, net=self.net.copy())


class QNetDrrn(QNet):
    """``Q(o, a) = g([f_o(o), f_a(a)])`` over hashed observation and action text."""

    head = "drrn"

    def __init__(self, config: GameConfig, hash_dim: int = 1024, hidden: Sequence[int] = (128,),
                 embed_dim: int = 128, action_hash_dim: int = 256, seed: int = 0,
                 nets: dict[str, Mlp] | None = None):
        self.config = config
        self.hash_dim = hash_dim
        self.action_hash_dim = action_hash_dim
        if nets is None:
            nets = {
                "f_o": Mlp([hash_dim, *hidden, embed_dim], seed=seed, out_relu=True),
                "f_a": Mlp([action_hash_dim, embed_dim], seed=seed + 1, out_relu=True),
                "g": Mlp([2 * embed_dim, embed_dim, 1], seed=seed + 2),
            }
        self.f_o, self.f_a, self.g = nets["f_o"], nets["f_a"], nets["g"]
        if self.f_o.out_dim + self.f_a.out_dim != self.g.in_dim or self.g.out_dim != 1:
            raise ValueError("combiner input must be the two embeddings concatenated")
        self.embed_dim = self.f_o.out_dim
        self.params = _share([self.f_o, self.f_a, self.g])
        self._action_cache: dict[int, sp.csr_matrix] = {}

    def nets(self) -> dict[str, Mlp]:
        return {"f_o": self.f_o, "f_a": self.f_a, "g": self.g}

    def _extra(self) -> dict:
        return {"action_hash_dim": self.action_hash_dim}

    def action_features(self, config: GameConfig) -> sp.csr_matrix:
        """Hashed text of every action id at ``config``'s player count."""
        key = config.num_action_ids * 8 + config.num_players
        if key not in self._action_cache:
            texts = [render_action(id_action(i, config)) for i in range(config.num_action_ids)]
            self._action_cache[key] = sparse_rows(
                [fold_hashes(*token_hashes(t), self.action_hash_dim) for t in texts],
                self.action_hash_dim,
            )
        return self._action_cache[key]

    def pair_forward(self, x, rows, ids, config: GameConfig | None = None):
        cfg = config or self.config
        eo, acts_o = self.f_o.forward_cache(x)
        xa = self.action_features(cfg)
        uids, inv = np.unique(ids, return_inverse=True)
        ea, acts_a = self.f_a.forward_cache(xa[uids])
        z = np.concatenate([eo[rows], ea[inv]], axis=1)
        q, acts_g = self.g.forward_cache(z)
        return q[:, 0], (acts_o, acts_a, acts_g, rows, inv, eo.shape[0], uids.size)

    def pair_backward(self, cache, grad_q):
        acts_o, acts_a, acts_g, rows, inv, n_rows, n_ids = cache
        gg, gz = self.g.backward(acts_g, grad_q[:, None], need_input_grad=True)
        d = self.embed_dim
        geo = np.zeros((n_rows, d))
        np.add.at(geo, rows, gz[:, :d])
        gea = np.zeros((n_ids, d))
        np.add.at(gea, inv, gz[:, d:])
        return np.concatenate([
            self.f_o.backward(acts_o, geo),
            self.f_a.backward(acts_a, gea),
            gg,
        ])

    def supports(self, config: GameConfig) -> bool:
        return True

    def copy(self) -> QNetDrrn:
        return QNetDrrn(self.config, self.hash_dim, action_hash_dim=self.action_hash_dim,
                        nets={k: v.copy() for k, v in self.nets().items()})

    def with_config(self, config: GameConfig) -> QNetDrrn:
        """Same parameters, acting at another player count."""
        net = self.copy()
        net.config = config
        return net


def qnet_from_json(text: str) -> QNet:
    doc, nets, _ = load_checkpoint_document(text)
    cfg = GameConfig.from_dict(doc["game_config"])
    if doc.get("head") == "dqn":
        return QNetDqn(cfg, doc["hash_dim"], net=nets["q"])
    if doc.get("head") == "drrn":
        return QNetDrrn(cfg, doc["hash_dim"], action_hash_dim=doc["action_hash_dim"], nets=nets)
    raise ValueError(f"not a student checkpoint (head {doc.get('head')!r})")


def obs_features(obs: Observation | str, dim: int):
    text = obs if isinstance(obs, str) else render_observation(obs)
    return fold_hashes(*token_hashes(text), dim)


def q_values(net: QNet, obs: Observation | str, candidate_actions: Sequence[int],
             config: GameConfig | None = None) -> np.ndarray:
    """One Q-value per candidate action id, in the order given."""
    ids = np.asarray(list(candidate_actions), dtype=np.int64)
    if ids.size == 0:
        raise ValueError("no candidate actions to score")
    x = sparse_rows([obs_features(obs, net.hash_dim)], net.hash_dim)
    rows = np.zeros(ids.size, dtype=np.int64)
    if isinstance(net, QNetDrrn):
        return net.pair_forward(x, rows, ids, config)[0]
    return net.pair_values(x, rows, ids)


class StudentAgent(Agent):
    """Greedy (or epsilon-greedy) player driven by a Q-head."""

    name = "student"

    def __init__(self, net: QNet, config: GameConfig | None = None):
        self.net = net
        self.config = config or net.config
        self.name = f"student-{net.head}"

    def check_compatible(self, config: GameConfig) -> None:
        if not self.net.supports(config):
            raise IncompatibleAgentError(
                f"{self.name}: fixed {self.net.config.num_players}-player head cannot play "
                f"{config.num_players} players"
            )
        self.config = config

    def scores(self, obs: Observation) -> np.ndarray:
        out = np.full(self.config.num_action_ids, -np.inf)
        if isinstance(self.net, QNetDqn):
            x = sparse_rows([obs_features(obs, self.net.hash_dim)], self.net.hash_dim)
            return self.net.all_values(x)[0]
        legal = list(obs.legal_action_ids)
        if legal:
            out[legal] = q_values(self.net, obs, legal, self.config)
        return out


# ------------------------------------------------------------------ replay


class EncodedObs:
    """An observation kept as its token hashes, folded lazily per width."""

    __slots__ = ("hashes", "counts", "_folds")

    def __init__(self, text: str):
        self.hashes, self.counts = token_hashes(text)
        self._folds: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def fold(self, dim: int) -> tuple[np.ndarray, np.ndarray]:
        f = self._folds.get(dim)
        if f is None:
            f = self._folds[dim] = fold_hashes(self.hashes, self.counts, dim)
        return f


class Experience(NamedTuple):
    """Compact stored transition: hashed observations instead of objects.

    Consecutive experiences share the ``EncodedObs`` of the state between
    them.
    """

    obs: EncodedObs
    action_id: int
    reward: float
    next_obs: EncodedObs
    done: bool
    legal_ids: tuple[int, ...]
    next_legal_ids: tuple[int, ...]
    oracle_features: OracleFeatures


class ReplayBuffer:
    """FIFO ring buffer with optional proportional priorities.

    ``priority_exponent`` is the alpha of proportional prioritisation; 0
    means uniform sampling. New items get the current maximum priority.
    """

    def __init__(self, capacity: int = 100_000, priority_exponent: float = 0.0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.alpha = priority_exponent
        self._items: list = [None] * capacity
        self._prio = np.zeros(capacity)
        self._next = 0
        self._size = 0
        self._max_prio = 1.0

    def __len__(self) -> int:
        return self._size

    def add(self, item) -> None:
        self._items[self._next] = item
        self._prio[self._next] = self._max_prio
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def items(self) -> list:
        """Stored items, oldest first."""
        if self._size < self.capacity:
            return self._items[: self._size]
        return self._items[self._next:] + self._items[: self._next]

    def __getitem__(self, i: int):
        return self._items[i]

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self._size == 0:
            raise IndexError("sampling from an empty buffer")
        if self.alpha == 0:
            return rng.integers(0, self._size, size=n)
        p = self._prio[: self._size] ** self.alpha
        cdf = np.cumsum(p)
        return np.minimum(np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right"), self._size - 1)

    def sample(self, n: int, rng: np.random.Generator) -> list:
        return [self._items[i] for i in self.sample_indices(n, rng)]

    def update_priorities(self, idx: np.ndarray, td_errors: np.ndarray, eps: float = 1e-3) -> None:
        p = np.abs(td_errors) + eps
        self._prio[idx] = p
        self._max_prio = max(self._max_prio, float(p.max()))


# ------------------------------------------------------------------ losses


@dataclass
class Batch:
    x: sp.csr_matrix
    actions: np.ndarray
    rewards: np.ndarray
    x_next: sp.csr_matrix
    done: np.ndarray
    legal: list[tuple[int, ...]]
    next_legal: list[tuple[int, ...]]
    obs_tokens: list = field(repr=False, default_factory=list)


def make_batch(exps: Sequence[Experience], hash_dim: int) -> Batch:
    return Batch(
        x=sparse_rows([e.obs.fold(hash_dim) for e in exps], hash_dim),
        actions=np.array([e.action_id for e in exps], dtype=np.int64),
        rewards=np.array([e.reward for e in exps], dtype=np.float64),
        x_next=sparse_rows([e.next_obs.fold(hash_dim) for e in exps], hash_dim),
        done=np.array([e.done for e in exps], dtype=bool),
        legal=[e.legal_ids for e in exps],
        next_legal=[e.next_legal_ids for e in exps],
        obs_tokens=[e.obs for e in exps],
    )


def _flatten_sets(sets: Sequence[Sequence[int]], keep: np.ndarray | None = None):
    rows, ids = [], []
    for b, s in enumerate(sets):
        if keep is not None and not keep[b]:
            continue
        rows.extend([b] * len(s))
        ids.extend(s)
    return np.asarray(rows, dtype=np.int64), np.asarray(ids, dtype=np.int64)


def _segment_max(values: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    out = np.full(n, -np.inf)
    np.maximum.at(out, rows, values)
    return out


def td_targets(batch: Batch, net: QNet, target_net: QNet, gamma: float, double: bool = True) -> np.ndarray:
    """``r + gamma * max_a' Q_target(o', a')`` over next legal ids; ``r`` when done."""
    n = len(batch.actions)
    y = batch.rewards.copy()
    live = ~batch.done & np.array([len(s) > 0 for s in batch.next_legal])
    if gamma == 0 or not live.any():
        return y
    rows, ids = _flatten_sets(batch.next_legal, live)
    qt = target_net.pair_values(batch.x_next, rows, ids)
    if double:
        qo = net.pair_values(batch.x_next, rows, ids)
        best = _segment_max(qo, rows, n)
        # first maximiser per row, evaluated by the target net
        cand = np.flatnonzero(qo == best[rows])
        r, first = np.unique(rows[cand], return_index=True)
        boot = np.zeros(n)
        boot[r] = qt[cand[first]]
    else:
        boot = np.where(live, _segment_max(qt, rows, n), 0.0)
    return y + gamma * boot


def td_loss(batch: Batch, net: QNet, target_net: QNet, gamma: float, double: bool = True):
    """Mean squared TD error and its gradient w.r.t. ``net.params``.

    Returns ``(loss, grad, td_errors)``; ``target_net`` is held fixed.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    n = len(batch.actions)
    y = td_targets(batch, net, target_net, gamma, double)
    rows = np.arange(n)
    q, cache = net.pair_forward(batch.x, rows, batch.actions)
    err = q - y
    loss = float(np.mean(err ** 2))
    return loss, net.pair_backward(cache, 2.0 * err / n), err


def student_log_policy(q: np.ndarray, rows: np.ndarray, n: int, tau: float) -> np.ndarray:
    """``log softmax(Q / tau)`` within each row's candidate segment."""
    z = q / tau
    m = _segment_max(z, rows, n)
    e = np.exp(z - m[rows])
    s = np.bincount(rows, weights=e, minlength=n)
    return z - m[rows] - np.log(s[rows])


def distill_loss(batch: Batch, teacher_probs: Sequence[np.ndarray], net: QNet, tau: float = 1.0):
    """Mean over states of ``-sum_a pi_teacher(a|s) log pi_student(a|s)``.

    ``teacher_probs[b]`` is aligned with ``batch.legal[b]``; the student
    distribution is the softmax of ``Q / tau`` over the same legal ids.
    Returns ``(loss, grad)``.
    """
    if not tau > 0:
        raise ValueError("temperature must be positive")
    n = len(batch.actions)
    rows, ids = _flatten_sets(batch.legal)
    t = np.concatenate([np.asarray(p, dtype=np.float64) for p in teacher_probs])
    if t.size != ids.size:
        raise ValueError("teacher distribution not aligned with the legal ids")
    q, cache = net.pair_forward(batch.x, rows, ids)
    lp = student_log_policy(q, rows, n, tau)
    loss = float(-(t * lp).sum() / n)
    grad_q = (np.exp(lp) - t) / (tau * n)
    return loss, net.pair_backward(cache, grad_q)


# ------------------------------------------------------------------ schedules


@dataclass
class DistillConfig:
    warmup_steps: int = 50_000     # W: lambda = 1, counted in updates
    decay_steps: int = 50_000      # D: linear decay to 0 afterwards
    temperature: float = 1.0
    mask_teacher: bool = True
    distill_only_warmup: bool = True

    def __post_init__(self):
        if self.warmup_steps < 0 or self.decay_steps < 0:
            raise ValueError("warmup and decay steps must be non-negative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def lambda_schedule(t: int, cfg: DistillConfig) -> float:
    """1 before ``W``, linear 1 -> 0 over ``[W, W + D)``, then 0."""
    if t < 0:
        raise ValueError("t must be non-negative")
    if t < cfg.warmup_steps:
        return 1.0
    if cfg.decay_steps == 0 or t >= cfg.warmup_steps + cfg.decay_steps:
        return 0.0
    return 1.0 - (t - cfg.warmup_steps) / cfg.decay_steps


# ------------------------------------------------------------------ training


@dataclass
class StudentConfig:
    head: str = "dqn"
    hash_dim: int = 1024
    hidden: tuple[int, ...] = (128, 128)
    embed_dim: int = 128
    gamma: float | None = None     # None: 0.99 for dqn, 0.9 for drrn
    lr: float = 5e-4
    clip_norm: float = 10.0
    batch_size: int = 32
    env_steps: int = 200_000
    buffer_capacity: int = 100_000
    priority_exponent: float = 0.0
    learning_starts: int = 1_000
    train_every: int = 4
    target_sync: int = 1_000
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.10
    double_dqn: bool = True
    eval_every: int = 10_000
    eval_games: int = 50
    eval_seed: int = 777
    seed: int = 0
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self):
        if self.head not in ("dqn", "drrn"):
            raise ValueError(f"unknown head {self.head!r}")
        if isinstance(self.distill, dict):
            self.distill = DistillConfig(**self.distill)
        self.hidden = tuple(self.hidden)
        if self.gamma is not None and not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.env_steps < 1 or self.train_every < 1 or self.target_sync < 1:
            raise ValueError("env_steps, train_every and target_sync must be positive")

    @property
    def discount(self) -> float:
        if self.gamma is not None:
            return self.gamma
        return 0.9 if self.head == "drrn" else 0.99

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CurvePoint:
    env_steps: int
    updates: int
    lam: float
    eval_mean: float
    eval_stderr: float

    CSV_HEADER = "env_steps,updates,lambda,eval_mean,eval_stderr"

    def csv_row(self) -> str:
        return f"{self.env_steps},{self.updates},{self.lam!r},{self.eval_mean!r},{self.eval_stderr!r}"


@dataclass
class StudentRun:
    net: QNet
    curve: list[CurvePoint]
    optimizer: Optimizer
    losses: list[float] = field(default_factory=list, repr=False)
    teacher: object | None = None
    refinements: list = field(default_factory=list)

    def to_json(self) -> str:
        return self.net.to_json(self.optimizer)


def build_qnet(cfg: StudentConfig, config: GameConfig) -> QNet:
    if cfg.head == "dqn":
        return QNetDqn(config, cfg.hash_dim, cfg.hidden, seed=cfg.seed)
    return QNetDrrn(config, cfg.hash_dim, cfg.hidden, cfg.embed_dim, seed=cfg.seed)


def epsilon_at(t: int, cfg: StudentConfig) -> float:
    horizon = max(1, int(cfg.eps_fraction * cfg.env_steps))
    if t >= horizon:
        return cfg.eps_end
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * t / horizon


def teacher_probs_for(teacher, batch: Batch, mask: bool = True) -> list[np.ndarray]:
    """Teacher distribution restricted to (and renormalised on) each legal set."""
    x = sparse_rows([o.fold(teacher.hash_dim) for o in batch.obs_tokens], teacher.hash_dim)
    logits = teacher.net.forward(x)
    out = []
    for row, legal in zip(logits, batch.legal):
        idx = list(legal)
        if mask:
            z = row[idx]
            p = np.exp(z - z.max())
            out.append(p / p.sum())
        else:
            p = np.exp(row - row.max())
            p /= p.sum()
            out.append(p[idx] / p[idx].sum())
    return out


def train_student(
    env_config: GameConfig,
    teacher=None,
    cfg: StudentConfig | None = None,
    init: QNet | None = None,
    selection=None,
    evaluator: Callable[[QNet, GameConfig, int, int], tuple[float, float]] | None = None,
) -> StudentRun:
    """Self-play Q-learning with optional teacher distillation.

    Per update the loss is ``td_loss + lambda_t * distill_loss``; while
    ``lambda_t == 1`` and ``distill_only_warmup`` is set, only the
    distillation term is applied. ``init`` continues from an existing head
    (for example a DRRN head trained at another player count). With a
    ``selection`` config the teacher is refined in the loop from categorised
    experience (see ``hanabi_lab.selection``).
    """
    from hanabi_lab.teacher import eval_gameplay

    cfg = cfg or StudentConfig()
    if init is not None:
        if not init.supports(env_config):
            raise IncompatibleAgentError(
                f"{init.head} head built for {init.config.num_players} players cannot act at "
                f"{env_config.num_players}"
            )
        net = init.with_config(env_config) if isinstance(init, QNetDrrn) else init.copy()
    else:
        net = build_qnet(cfg, env_config)
    if teacher is not None:
        teacher.check_compatible(env_config)
    target = net.copy()
    opt = make_optimizer(TrainConfig(lr=cfg.lr, clip_norm=cfg.clip_norm, batch_size=cfg.batch_size))
    buffer = ReplayBuffer(cfg.buffer_capacity, cfg.priority_exponent)
    rng = np.random.default_rng(derive_seed(cfg.seed, 1))
    explore = SplitMix64(derive_seed(cfg.seed, 2))
    gamma = cfg.discount
    dcfg = cfg.distill

    if evaluator is None:
        def evaluator(q, gc, n, seed):
            r = eval_gameplay(StudentAgent(q, gc), gc, n, seed)
            return r.mean_score, r.stderr

    buffers = None
    if selection is not None:
        from hanabi_lab.selection import CategorizedBuffers, categorize, refine_teacher

        if teacher is None:
            raise ValueError("teacher refinement needs a teacher")
        teacher = teacher.copy()  # refined in place; the caller's copy stays intact
        buffers = CategorizedBuffers(selection)

    run = StudentRun(net, [], opt, teacher=teacher)
    updates = 0
    game = 0
    good = net.params.copy()

    def lam_now() -> float:
        return lambda_schedule(updates, dcfg) if teacher is not None else 0.0

    def record(t: int) -> None:
        mean, se = evaluator(net, env_config, cfg.eval_games, cfg.eval_seed)
        run.curve.append(CurvePoint(t, updates, lam_now(), mean, se))
        log.info("student %s step %d updates %d lambda %.3f eval %.3f", net.head, t, updates,
                 lam_now(), mean)

    state = new_game(env_config.with_seed(derive_seed(cfg.seed, 1000 + game)))
    obs = observe(state, state.current_player)
    obs_tok = EncodedObs(render_observation(obs))
    episode: list[Experience] = []
    for t in range(1, cfg.env_steps + 1):
        legal = list(obs.legal_action_ids)
        if explore.random() < epsilon_at(t - 1, cfg):
            aid = explore.choice(legal)
        else:
            x = sparse_rows([obs_tok.fold(net.hash_dim)], net.hash_dim)
            q = net.pair_values(x, np.zeros(len(legal), dtype=np.int64), legal)
            aid = legal[int(np.argmax(q))]
        tr, state = step(state, id_action(aid, env_config))
        next_tok = EncodedObs(render_observation(tr.next_obs))
        exp = Experience(obs_tok, aid, tr.reward, next_tok, tr.done, tuple(legal),
                         tuple(tr.next_obs.legal_action_ids) if not tr.done else (),
                         tr.oracle_features)
        buffer.add(exp)
        episode.append(exp)
        if tr.done:
            if buffers is not None:
                buffers.add_episode(episode, categorize(episode, selection.heuristic))
            episode = []
            game += 1
            state = new_game(env_config.with_seed(derive_seed(cfg.seed, 1000 + game)))
            obs = observe(state, state.current_player)
            obs_tok = EncodedObs(render_observation(obs))
        else:
            obs = tr.next_obs
            obs_tok = next_tok

        if t >= cfg.learning_starts and t % cfg.train_every == 0 and len(buffer) >= cfg.batch_size:
            idx = buffer.sample_indices(cfg.batch_size, rng)
            batch = make_batch([buffer[i] for i in idx], net.hash_dim)
            lam = lam_now()
            warm = teacher is not None and dcfg.distill_only_warmup and updates < dcfg.warmup_steps
            grad = np.zeros_like(net.params)
            loss = 0.0
            if not warm:
                l_td, g_td, err = td_loss(batch, net, target, gamma, cfg.double_dqn)
                loss += l_td
                grad += g_td
                if cfg.priority_exponent > 0:
                    buffer.update_priorities(idx, err)
            if teacher is not None and lam > 0:
                probs = teacher_probs_for(teacher, batch, dcfg.mask_teacher)
                l_d, g_d = distill_loss(batch, probs, net, dcfg.temperature)
                loss += lam * l_d
                grad += lam * g_d
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                net.load(good)
                raise StudentDivergedError(f"non-finite loss at update {updates}",
                                           net.to_json(opt, cfg.seed), run.curve)
            opt.step(net.params, grad)
            updates += 1
            run.losses.append(loss)
            if updates % cfg.target_sync == 0:
                target.load(net.params)

        if buffers is not None and t % selection.refine_every == 0:
            report = refine_teacher(teacher, buffers, selection, net, step=t)
            run.refinements.append(report)

        if t % cfg.eval_every == 0 or t == cfg.env_steps:
            record(t)
            good = net.params.copy()
    return run
