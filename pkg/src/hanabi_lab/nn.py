"""Small differentiable-network kernel.

Feature hashing, ReLU multilayer perceptrons with hand-written backward
passes, (weighted) softmax cross-entropy, SGD/Adam with norm clipping, a
finite-difference gradient checker and a JSON checkpoint format.

Parameters of a network live in one flat float64 array; per-layer weight and
bias arrays are views into it, so optimizers and checkpoints only ever deal
with a single vector.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
CHECKPOINT_FORMAT_VERSION = 1
DEFAULT_HASH_DIM = 4096


class TrainingError(RuntimeError):
    """Non-finite values met during training."""


class ShapeError(ValueError):
    pass


# ------------------------------------------------------------------ hashing


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET_BASIS
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@lru_cache(maxsize=1 << 18)
def _token_index(token: str, dim: int) -> int:
    return fnv1a_64(token.encode("utf-8")) % dim


def feature_indices(text: str, dim: int = DEFAULT_HASH_DIM) -> tuple[np.ndarray, np.ndarray]:
    """Sparse form of ``featurize``: sorted unique bucket indices and counts."""
    idx = [_token_index(t, dim) for t in text.lower().split()]
    if not idx:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    u, c = np.unique(np.asarray(idx, dtype=np.int64), return_counts=True)
    return u, c.astype(np.float64)


@lru_cache(maxsize=1 << 18)
def _token_hash(token: str) -> int:
    return fnv1a_64(token.encode("utf-8"))


def token_hashes(text: str) -> tuple[np.ndarray, np.ndarray]:
    """Unique full 64-bit token hashes of ``text`` with their counts.

    A width-independent form of the features: ``fold_hashes`` maps it to any
    hash dimension, so stored observations can feed networks of different
    input widths.
    """
    h = [_token_hash(t) for t in text.lower().split()]
    if not h:
        return np.zeros(0, dtype=np.uint64), np.zeros(0)
    u, c = np.unique(np.asarray(h, dtype=np.uint64), return_counts=True)
    return u, c.astype(np.float64)


def fold_hashes(hashes: np.ndarray, counts: np.ndarray, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """``token_hashes`` output -> ``feature_indices`` output at width ``dim``."""
    if hashes.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    b = (hashes % np.uint64(dim)).astype(np.int64)
    u, inv = np.unique(b, return_inverse=True)
    return u, np.bincount(inv, weights=counts, minlength=u.size)


def featurize(text: str, dim: int = DEFAULT_HASH_DIM) -> np.ndarray:
    """Bag of hashed lowercase whitespace tokens (FNV-1a-64 mod ``dim``)."""
    x = np.zeros(dim)
    u, c = feature_indices(text, dim)
    x[u] = c
    return x


def sparse_rows(rows: Sequence[tuple[np.ndarray, np.ndarray]], dim: int) -> sp.csr_matrix:
    """Stack ``feature_indices`` outputs into a CSR batch."""
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    for i, (u, _) in enumerate(rows):
        indptr[i + 1] = indptr[i] + len(u)
    if rows:
        indices = np.concatenate([u for u, _ in rows])
        data = np.concatenate([c for _, c in rows])
    else:
        indices = np.zeros(0, dtype=np.int64)
        data = np.zeros(0)
    return sp.csr_matrix((data, indices, indptr), shape=(len(rows), dim))


def featurize_batch(texts: Sequence[str], dim: int = DEFAULT_HASH_DIM) -> sp.csr_matrix:
    return sparse_rows([feature_indices(t, dim) for t in texts], dim)


# ------------------------------------------------------------------ networks


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Mlp:
    """Fully connected ReLU network: ``sizes[0] -> ... -> sizes[-1]``.

    Hidden layers use ReLU; the output layer is linear unless ``out_relu``.
    Inputs may be a 1-D vector, a dense 2-D batch or a scipy sparse batch.
    """

    def __init__(self, sizes: Sequence[int], seed: int | None = 0, out_relu: bool = False,
                 params: np.ndarray | None = None):
        self.sizes = [int(s) for s in sizes]
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ShapeError(f"bad layer sizes {sizes}")
        self.out_relu = out_relu
        n = self.count_params(self.sizes)
        if params is not None:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != (n,):
                raise ShapeError(f"expected {n} parameters, got {params.shape}")
            self.params = params.copy()
        else:
            self.params = np.zeros(n)
        self._bind()
        if params is None and seed is not None:
            rng = np.random.default_rng(seed)
            for w in self.weights:
                w[...] = glorot_uniform(rng, *w.shape)

    @staticmethod
    def count_params(sizes: Sequence[int]) -> int:
        return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))

    def _bind(self) -> None:
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        off = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(self.params[off: off + a * b].reshape(a, b))
            off += a * b
            self.biases.append(self.params[off: off + b])
            off += b

    @property
    def num_params(self) -> int:
        return self.params.size

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def copy(self) -> Mlp:
        return Mlp(self.sizes, out_relu=self.out_relu, params=self.params)

    def load(self, params: np.ndarray) -> None:
        self.params[...] = params

    def _check_input(self, x) -> None:
        width = x.shape[-1]
        if width != self.in_dim:
            raise ShapeError(f"input width {width} != network input {self.in_dim}")

    def forward(self, x):
        self._check_input(x)
        single = not sp.issparse(x) and x.ndim == 1
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last or self.out_relu:
                h = np.maximum(h, 0.0)
        return h if not single else np.asarray(h).reshape(-1)

    __call__ = forward

    def forward_cache(self, x):
        """Forward pass keeping what ``backward`` needs. ``x`` must be 2-D."""
        self._check_input(x)
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = np.asarray(h @ w) + b
            if i < last or self.out_relu:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, grad_out: np.ndarray, need_input_grad: bool = False):
        """Gradient of ``sum(grad_out * output)`` w.r.t. parameters (and input)."""
        grad = np.zeros_like(self.params)
        gw, gb = [], []
        off = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            gw.append(grad[off: off + a * b].reshape(a, b))
            off += a * b
            gb.append(grad[off: off + b])
            off += b
        g = grad_out
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            if i < last or self.out_relu:
                g = g * (acts[i + 1] > 0)
            inp = acts[i]
            gw[i][...] = inp.T @ g
            gb[i][...] = g.sum(axis=0)
            if i > 0 or need_input_grad:
                g = g @ self.weights[i].T
        if need_input_grad:
            return grad, g
        return grad


# ------------------------------------------------------------------ losses


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def _check_target(t: np.ndarray) -> None:
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("target must be a probability vector summing to 1 (within 1e-6)")


def softmax_ce(logits: np.ndarray, target: np.ndarray, sample_weight: float = 1.0):
    """Weighted cross-entropy for one example: ``-w * sum t log softmax(z)``.

    Returns ``(loss, d loss / d logits)``. Negative weights are allowed.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_target(target)
    lp = log_softmax(logits)
    loss = -sample_weight * float(np.dot(target, lp))
    grad = sample_weight * (np.exp(lp) - target)
    return loss, grad


def softmax_ce_batch(logits: np.ndarray, targets, weights=None):
    """Mean over the batch of per-example weighted cross-entropy.

    ``targets`` is either integer labels or a (B, C) probability matrix.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n, c = logits.shape
    targets = np.asarray(targets)
    if targets.ndim == 1:
        t = np.zeros((n, c))
        t[np.arange(n), targets] = 1.0
    else:
        t = targets.astype(np.float64)
        _check_target(t)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    lp = log_softmax(logits)
    per = -(t * lp).sum(axis=1)
    loss = float((w * per).sum() / n)
    grad = (w[:, None] * (np.exp(lp) - t)) / n
    return loss, grad


# ------------------------------------------------------------------ optimizers


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    clip_norm: float = 5.0  # 0 disables clipping
    epochs: int = 10
    steps: int = 0
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.steps < 0 or self.epochs < 1:
            raise ValueError("epochs must be positive and steps non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def clip_gradient(grad: np.ndarray, max_norm: float) -> np.ndarray:
    if max_norm and max_norm > 0:
        norm = float(np.linalg.norm(grad))
        if norm > max_norm:
            return grad * (max_norm / norm)
    return grad


class Optimizer:
    def __init__(self, lr: float, clip_norm: float = 0.0):
        self.lr = lr
        self.clip_norm = clip_norm
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        """Update ``params`` in place after clipping ``grad`` to ``clip_norm``."""
        if not np.all(np.isfinite(grad)):
            raise TrainingError("non-finite gradient")
        grad = clip_gradient(grad, self.clip_norm)
        self.t += 1
        self._update(params, grad)

    def _update(self, params, grad):
        raise NotImplementedError

    def state_dict(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "clip_norm": self.clip_norm, "t": self.t}


class Sgd(Optimizer):
    kind = "sgd"

    def _update(self, params, grad):
        params -= self.lr * grad


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, lr: float, clip_norm: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(lr, clip_norm)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None
        self._tmp: np.ndarray | None = None

    def _update(self, params, grad):
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        if self._tmp is None or self._tmp.shape != params.shape:
            self._tmp = np.empty_like(params)
        tmp = self._tmp
        self.m *= self.b1
        np.multiply(grad, 1 - self.b1, out=tmp)
        self.m += tmp
        self.v *= self.b2
        np.multiply(grad, grad, out=tmp)
        tmp *= 1 - self.b2
        self.v += tmp
        mhat_scale = self.lr / (1 - self.b1 ** self.t)
        vhat_scale = 1.0 / (1 - self.b2 ** self.t)
        np.multiply(self.v, vhat_scale, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += self.eps
        np.divide(self.m, tmp, out=tmp)
        tmp *= mhat_scale
        params -= tmp

    def state_dict(self) -> dict:
        d = super().state_dict()
        d.update(betas=[self.b1, self.b2], eps=self.eps)
        d["m"] = None if self.m is None else self.m
        d["v"] = None if self.v is None else self.v
        return d


def make_optimizer(cfg: TrainConfig) -> Optimizer:
    if cfg.optimizer == "sgd":
        return Sgd(cfg.lr, cfg.clip_norm)
    return Adam(cfg.lr, cfg.clip_norm)


def step(params: np.ndarray, grad: np.ndarray, optimizer: Optimizer) -> np.ndarray:
    """Functional wrapper: returns updated copy of ``params``."""
    out = params.copy()
    optimizer.step(out, grad)
    return out


# ------------------------------------------------------------------ gradient checks


def gradient_check(
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    theta: np.ndarray,
    eps: float = 1e-5,
    fraction: float = 0.01,
    seed: int = 0,
    min_samples: int = 20,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(theta) -> (loss, grad)``; a random subsample of coordinates
    (``fraction`` of them, at least ``min_samples``) is checked.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    theta = np.array(theta, dtype=np.float64)
    _, analytic = loss_fn(theta.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = theta.size
    k = min(n, max(min_samples, int(round(fraction * n))))
    idx = np.random.default_rng(seed).choice(n, size=k, replace=False)
    worst = 0.0
    for i in idx:
        tp = theta.copy()
        tp[i] += eps
        tm = theta.copy()
        tm[i] -= eps
        num = (loss_fn(tp)[0] - loss_fn(tm)[0]) / (2 * eps)
        a = analytic[i]
        err = abs(a - num) / max(abs(a), abs(num), floor)
        worst = max(worst, err)
    return worst


def finite_diff_check(net: Mlp, x, target, eps: float = 1e-5, weight: float = 1.0,
                      fraction: float = 0.01, seed: int = 0) -> float:
    """Check the network's CE gradient on one batch ``(x, target)``."""
    x2 = x if (sp.issparse(x) or np.ndim(x) == 2) else np.asarray(x)[None, :]
    t = np.asarray(target)
    if t.ndim == 1 and t.dtype.kind == "f":
        t = t[None, :]
    w = np.full(x2.shape[0], weight)
    probe = net.copy()

    def loss_fn(theta):
        probe.load(theta)
        out, acts = probe.forward_cache(x2)
        loss, g = softmax_ce_batch(out, t, w)
        return loss, probe.backward(acts, g)

    return gradient_check(loss_fn, net.params, eps, fraction, seed)


# ------------------------------------------------------------------ checkpoints


def _fmt(v: float) -> str:
    if not np.isfinite(v):
        raise TrainingError("cannot serialise non-finite parameter")
    return format(float(v), ".17g")


def _encode(obj) -> str:
    """JSON with every float written at 17 significant digits."""
    if isinstance(obj, dict):
        return "{" + ",".join(json.dumps(str(k)) + ":" + _encode(v) for k, v in obj.items()) + "}"
    if isinstance(obj, np.ndarray):
        return "[" + ",".join(_fmt(v) for v in obj.reshape(-1)) + "]"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_encode(v) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt(obj)
    return json.dumps(obj)


def checkpoint_document(nets: dict[str, Mlp], optimizer: Optimizer | None, *,
                        template_version: str, hash_dim: int, rng_seed: int,
                        extra: dict | None = None) -> str:
    """Serialise networks plus optimizer state.

    ``layer_sizes`` and ``weights`` follow the order of ``nets``; weights are
    concatenated flat parameter vectors (row-major, W then b per layer).
    """
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "template_version": template_version,
        "hash_dim": hash_dim,
        "networks": list(nets),
        "layer_sizes": [nets[k].sizes for k in nets],
        "out_relu": [nets[k].out_relu for k in nets],
        "weights": np.concatenate([nets[k].params for k in nets]),
        "optimizer_state": None if optimizer is None else optimizer.state_dict(),
        "rng_seed": rng_seed,
    }
    if extra:
        doc.update(extra)
    return _encode(doc)


def load_checkpoint_document(text: str) -> tuple[dict, dict[str, Mlp], Optimizer | None]:
    doc = json.loads(text)
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    w = np.asarray(doc["weights"], dtype=np.float64)
    nets = {}
    off = 0
    for name, sizes, out_relu in zip(doc["networks"], doc["layer_sizes"], doc["out_relu"]):
        n = Mlp.count_params(sizes)
        nets[name] = Mlp(sizes, out_relu=out_relu, params=w[off: off + n])
        off += n
    if off != w.size:
        raise ValueError("weight array length does not match layer sizes")
    opt = None
    st = doc.get("optimizer_state")
    if st:
        if st["kind"] == "adam":
            opt = Adam(st["lr"], st["clip_norm"], tuple(st["betas"]), st["eps"])
            if st["m"] is not None:
                opt.m = np.asarray(st["m"], dtype=np.float64)
                opt.v = np.asarray(st["v"], dtype=np.float64)
        else:
            opt = Sgd(st["lr"], st["clip_norm"])
        opt.t = st["t"]
    return doc, nets, opt
