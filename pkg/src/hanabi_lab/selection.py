"""Categorised experience buffers and weighted in-loop teacher refinement.

Transitions from the student's self-play are routed into a positive and a
negative buffer by one of three heuristics:

* ``UT`` puts everything into the positive buffer;
* ``OC`` marks a transition positive when it scored, moved a firework or a
  hint strictly narrowed some partner card's possibilities (simulator-side
  features the agent itself does not get);
* ``RT`` marks every transition since the previous non-zero reward positive
  once a positive reward arrives. Negative rewards only close intervals.

``refine_teacher`` samples from the two buffers with probability ``p_plus``
and fine-tunes the teacher with per-sample weighted cross-entropy on the
actions that were taken.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from hanabi_lab.nn import Adam, softmax_ce_batch, sparse_rows
from hanabi_lab.rng import SplitMix64, derive_seed
from hanabi_lab.student import Experience, QNet, ReplayBuffer, make_batch

log = logging.getLogger(__name__)

HEURISTICS = ("UT", "OC", "RT")
WEIGHT_VARIANTS = ("uniform", "exp_adv", "lin_adv")
EXP_WEIGHT_CAP = 1e4
PLUS, MINUS = "plus", "minus"


class EmptyBufferError(ValueError):
    pass


@dataclass
class SelectionConfig:
    heuristic: str = "OC"
    p_plus: float = 0.5
    capacity: int = 100_000
    d_lm: int = 32
    refine_every: int = 10_000     # k, in environment steps
    gradient_steps: int = 2_000
    weight_variant: str = "uniform"
    beta: float = 1.0
    lr: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.heuristic not in HEURISTICS:
            raise ValueError(f"unknown heuristic {self.heuristic!r}")
        if not 0.0 <= self.p_plus <= 1.0:
            raise ValueError("p_plus must lie in [0, 1]")
        if self.gradient_steps < 1 or self.d_lm < 1 or self.refine_every < 1:
            raise ValueError("gradient_steps, d_lm and refine_every must be positive")
        if self.weight_variant not in WEIGHT_VARIANTS:
            raise ValueError(f"unknown weight variant {self.weight_variant!r}")
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ labelling


def rt_labels(rewards: Sequence[float]) -> list[str]:
    labels = [MINUS] * len(rewards)
    prev = -1
    for i, r in enumerate(rewards):
        if r > 0:
            for j in range(prev + 1, i + 1):
                labels[j] = PLUS
        if r != 0:
            prev = i
    return labels


def categorize(episode: Sequence, heuristic: str) -> list[str]:
    """Label each transition of a time-ordered episode ``plus`` or ``minus``.

    Items need ``reward`` and (for OC) ``oracle_features`` attributes, so
    both engine ``Transition``s and stored ``Experience``s work.
    """
    if heuristic == "UT":
        return [PLUS] * len(episode)
    if heuristic == "OC":
        out = []
        for t in episode:
            f = t.oracle_features
            hit = t.reward > 0 or f.reward_positive or f.fireworks_changed or f.knowledge_tightened
            out.append(PLUS if hit else MINUS)
        return out
    if heuristic == "RT":
        return rt_labels([t.reward for t in episode])
    raise ValueError(f"unknown heuristic {heuristic!r}")


class CategorizedBuffers:
    """``D_plus`` and ``D_minus`` FIFO buffers; UT keeps only ``D_plus``."""

    def __init__(self, cfg: SelectionConfig):
        self.heuristic = cfg.heuristic
        self.d_plus = ReplayBuffer(cfg.capacity)
        self.d_minus = None if cfg.heuristic == "UT" else ReplayBuffer(cfg.capacity)
        self.draws = 0

    def add(self, item, label: str) -> None:
        if label == PLUS:
            self.d_plus.add(item)
        elif label == MINUS:
            if self.d_minus is None:
                raise ValueError("UT buffers only take positive items")
            self.d_minus.add(item)
        else:
            raise ValueError(f"bad label {label!r}")

    def add_episode(self, episode: Sequence, labels: Sequence[str]) -> None:
        if len(episode) != len(labels):
            raise ValueError("one label per transition")
        for item, lab in zip(episode, labels):
            self.add(item, lab)

    def sizes(self) -> tuple[int, int]:
        return len(self.d_plus), 0 if self.d_minus is None else len(self.d_minus)

    def __len__(self) -> int:
        return sum(self.sizes())


def sample_batch(buffers: CategorizedBuffers, p_plus: float, n: int, seed: int) -> list:
    """``n`` draws: pick ``D_plus`` with probability ``p_plus`` (falling back
    to the other buffer when the chosen one is empty), then uniformly within."""
    n_plus, n_minus = buffers.sizes()
    if n_plus == 0 and n_minus == 0:
        raise EmptyBufferError("both buffers are empty")
    rng = SplitMix64(seed)
    out = []
    for _ in range(n):
        use_plus = rng.random() < p_plus
        if use_plus and n_plus == 0:
            use_plus = False
        elif not use_plus and n_minus == 0:
            use_plus = True
        buf = buffers.d_plus if use_plus else buffers.d_minus
        out.append(buf[rng.randbelow(len(buf))])
    return out


# ------------------------------------------------------------------ weights


def weight(transition, variant: str, beta: float,
           advantage_fn: Callable[[object], float] | None = None) -> float:
    """Per-sample weight ``h``: 1, ``exp(beta A)`` clamped to [0, 1e4], or ``1 + beta A``."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    if variant == "uniform":
        return 1.0
    if advantage_fn is None:
        raise ValueError(f"{variant} weights need an advantage function")
    a = float(advantage_fn(transition))
    if variant == "exp_adv":
        z = beta * a
        return EXP_WEIGHT_CAP if z > math.log(EXP_WEIGHT_CAP) else min(math.exp(z), EXP_WEIGHT_CAP)
    if variant == "lin_adv":
        return 1.0 + beta * a
    raise ValueError(f"unknown weight variant {variant!r}")


def advantage(q_net: QNet, obs, action: int, legal_ids: Sequence[int] | None = None) -> float:
    """``Q(o, a)`` minus the mean of ``Q(o, .)`` over the legal actions.

    ``obs`` is an ``Observation`` (its legal ids are used) or observation
    text with ``legal_ids`` given.
    """
    from hanabi_lab.student import q_values

    legal = list(obs.legal_action_ids if legal_ids is None else legal_ids)
    if action not in legal:
        raise ValueError(f"action {action} is not legal here")
    q = q_values(q_net, obs, legal)
    return float(q[legal.index(action)] - q.mean())


def batch_advantages(q_net: QNet, items: Sequence[Experience]) -> np.ndarray:
    """``advantage`` for each stored experience's taken action, batched."""
    batch = make_batch(items, q_net.hash_dim)
    rows, ids, pos = [], [], []
    for b, (legal, a) in enumerate(zip(batch.legal, batch.actions)):
        pos.append(len(ids) + list(legal).index(int(a)))
        rows.extend([b] * len(legal))
        ids.extend(legal)
    rows = np.asarray(rows)
    q = q_net.pair_values(batch.x, rows, np.asarray(ids))
    mean = np.bincount(rows, weights=q) / np.bincount(rows)
    return q[pos] - mean


# ------------------------------------------------------------------ refinement


@dataclass
class RefinementReport:
    step: int
    heuristic: str
    p_plus: float
    mean_weight: float
    loss: float
    losses: list[float] = field(default_factory=list, repr=False)
    skipped: bool = False
    buffer_sizes: tuple[int, int] = (0, 0)

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "heuristic": self.heuristic, "p_plus": self.p_plus,
                           "mean_weight": self.mean_weight, "loss": self.loss,
                           "skipped": self.skipped, "plus_size": self.buffer_sizes[0],
                           "minus_size": self.buffer_sizes[1]})


def write_reports(path: str | Path, reports: Sequence[RefinementReport]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


def refine_teacher(teacher, buffers: CategorizedBuffers, cfg: SelectionConfig,
                   q_net: QNet | None = None, step: int = 0) -> RefinementReport:
    """Weighted cross-entropy fine-tuning of ``teacher`` in place.

    Runs ``cfg.gradient_steps`` updates on batches of ``cfg.d_lm`` draws from
    ``sample_batch``; the target is the action taken in each transition.
    """
    if len(buffers) == 0:
        log.warning("refinement at step %d skipped: buffers are empty", step)
        return RefinementReport(step, cfg.heuristic, cfg.p_plus, 0.0, float("nan"), skipped=True,
                                buffer_sizes=buffers.sizes())
    if cfg.weight_variant != "uniform" and q_net is None:
        raise ValueError("advantage-weighted refinement needs the student Q-network")
    opt = Adam(cfg.lr, clip_norm=5.0)
    net = teacher.net
    dim = teacher.hash_dim
    losses, weights_abs = [], []
    for i in range(cfg.gradient_steps):
        items = sample_batch(buffers, cfg.p_plus, cfg.d_lm, derive_seed(cfg.seed, buffers.draws))
        buffers.draws += 1
        if cfg.weight_variant == "uniform":
            w = np.ones(len(items))
        else:
            adv = batch_advantages(q_net, items)
            w = np.array([weight(a, cfg.weight_variant, cfg.beta, lambda v: v) for a in adv])
        x = sparse_rows([e.obs.fold(dim) for e in items], dim)
        y = np.array([e.action_id for e in items], dtype=np.int64)
        out, acts = net.forward_cache(x)
        loss, g = softmax_ce_batch(out, y, w)
        if np.any(w != 0):
            opt.step(net.params, net.backward(acts, g))
        losses.append(loss)
        weights_abs.append(float(np.mean(np.abs(w))))
    rep = RefinementReport(step, cfg.heuristic, cfg.p_plus, float(np.mean(weights_abs)),
                           float(losses[-1]), losses, buffer_sizes=buffers.sizes())
    log.info("refined teacher at step %d: loss %.4f mean |h| %.3f", step, rep.loss, rep.mean_weight)
    return rep
