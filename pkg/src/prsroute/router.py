"""Dual-gate token-selection MoE router.

A small Transformer whose feed-forward blocks are replaced by a dual-gate
mixture of experts. Each expert is tied to one quality metric; a positive
and a negative gate each let every expert pick its top-K tokens, the
expert scores the picked tokens through a low-rank projection (one per
gate) followed by a shared score matrix, and the block emits
``sigmoid(T_pos - T_neg)`` per token. Mean-pooled token states feed one
sigmoid head per metric; heads regress per-metric quality distances.

A batch is processed as one stacked token matrix. Attention is
block-diagonal over records and top-K selection is done per record, so a
batch of one and a batch of many give the same per-record maths.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, InvalidInputError, ParseError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RouterConfig:
    vocab_size: int
    d: int = 64
    n_metrics: int = 10
    k: int | None = None          # expert count; defaults to n_metrics
    K: int = 4                    # tokens picked per expert
    l: int = 8                    # expert low-rank dim
    n_max: int = 77
    layers: int = 2
    attn_heads: int = 4
    gamma: float = 1.0
    weights: tuple[float, ...] | None = None
    learning_rate: float = 2e-5
    weight_decay: float = 0.0
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.k is None:
            object.__setattr__(self, "k", self.n_metrics)
        if self.weights is None:
            object.__setattr__(self, "weights", tuple([1.0 / self.n_metrics] * self.n_metrics))
        else:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        for name in ("vocab_size", "d", "n_metrics", "k", "K", "l", "n_max", "layers",
                     "attn_heads", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.l > min(self.h, self.d) / 2:
            raise ConfigError(f"expert rank l={self.l} must be <= min(h, d)/2")
        if self.K > self.n_max:
            raise ConfigError("K must not exceed n_max")
        if self.d % self.attn_heads:
            raise ConfigError("d must be divisible by attn_heads")
        if len(self.weights) != self.n_metrics:
            raise ConfigError("one weight per metric required")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ConfigError("metric weights must sum to 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning rate must be positive")

    @property
    def h(self) -> int:
        # expert output width equals d so blocks stack residually
        return self.d

    def to_dict(self) -> dict:
        out = asdict(self)
        out["weights"] = list(self.weights)
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "RouterConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown router config keys: {sorted(unknown)}")
        doc = dict(doc)
        if doc.get("weights") is not None:
            doc["weights"] = tuple(doc["weights"])
        return cls(**doc)


def init_params(config: RouterConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh parameters in canonical order (the order checkpoints store them)."""
    d, k, l, h, N = config.d, config.k, config.l, config.h, config.n_metrics

    def normal(shape, fan_in):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)

    params = {"embed": rng.normal(0.0, 1.0, size=(config.vocab_size, d))}
    for i in range(config.layers):
        p = f"layer{i}."
        for name in ("wq", "wk", "wv", "wo"):
            params[p + name] = normal((d, d), d)
        params[p + "e_pos"] = normal((k, d), d)
        params[p + "e_neg"] = normal((k, d), d)
        # P_i stacked column-wise (d x k*l), S_i stacked row-wise (k*l x h)
        params[p + "p_pos"] = normal((d, k * l), d)
        params[p + "p_neg"] = normal((d, k * l), d)
        params[p + "s"] = normal((k * l, h), l)
    params["head_w"] = normal((d, N), d)
    params["head_b"] = np.zeros((1, N))
    return params


@dataclass(frozen=True)
class GateOutput:
    affinity: np.ndarray     # n x k, rows sum to 1
    mask: np.ndarray         # n x k, 0/1
    selected: tuple[tuple[int, ...], ...]   # per expert, token indices in rank order


def topk_mask(affinity: np.ndarray, K: int) -> np.ndarray:
    """Per column, mark the min(K, n) largest entries; ties go to the lower row."""
    n = affinity.shape[0]
    keep = min(K, n)
    order = np.argsort(-affinity, axis=0, kind="stable")[:keep]
    mask = np.zeros(affinity.shape, dtype=np.float64)
    np.put_along_axis(mask, order, 1.0, axis=0)
    return mask


def token_selection_gate(T: np.ndarray, E: np.ndarray, K: int) -> GateOutput:
    """Softmax affinity of tokens over experts, then per-expert top-K tokens."""
    T = np.asarray(T, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    if T.shape[0] < 1:
        raise InvalidInputError("empty sequence")
    A = ad.softmax_rows(Tensor(T @ E.T)).data
    keep = min(K, T.shape[0])
    order = np.argsort(-A, axis=0, kind="stable")[:keep]
    M = topk_mask(A, K)
    return GateOutput(A, M, tuple(tuple(int(t) for t in order[:, i]) for i in range(E.shape[0])))


def _segment_mask(affinity: np.ndarray, K: int, segments) -> np.ndarray:
    mask = np.zeros(affinity.shape, dtype=np.float64)
    for lo, hi in segments:
        mask[lo:hi] = topk_mask(affinity[lo:hi], K)
    return mask


def _expand_matrix(k: int, l: int) -> np.ndarray:
    # (k x k*l) 0/1 matrix copying column i of lambda onto expert i's l columns
    return np.kron(np.eye(k), np.ones((1, l)))


def dual_gate_moe(
    T: Tensor,
    e_pos: Tensor, e_neg: Tensor,
    p_pos: Tensor, p_neg: Tensor,
    s: Tensor,
    K: int,
    segments: Sequence[tuple[int, int]] | None = None,
    trace: list | None = None,
) -> Tensor:
    """One dual-gate MoE block over a stacked token matrix.

    ``p_pos``/``p_neg`` hold the per-expert projections side by side
    (d x k*l) and ``s`` the score matrices stacked (k*l x h). ``segments``
    delimits records for top-K selection; ``None`` means a single record.
    When ``trace`` is a list the two gate masks are appended to it.
    """
    n = T.shape[0]
    if segments is None:
        segments = [(0, n)]
    k = e_pos.shape[0]
    l = p_pos.shape[1] // k
    expand = Tensor(_expand_matrix(k, l))
    sides = []
    for E, P in ((e_pos, p_pos), (e_neg, p_neg)):
        A = ad.softmax_rows(ad.matmul(T, ad.transpose(E)))
        M = _segment_mask(A.data, K, segments)
        if trace is not None:
            trace.append(M)
        lam = ad.masked_normalize(A, M)
        projected = ad.matmul(T, P)                          # n x k*l
        weighted = ad.mul(projected, ad.matmul(lam, expand))
        sides.append(ad.matmul(weighted, s))                 # n x h
    return ad.sigmoid(ad.sub(sides[0], sides[1]))


def dual_gate_moe_layer(T, gates, experts, K):
    """Array-level convenience wrapper for a single record.

    ``gates`` is ``(E_pos, E_neg)``; ``experts`` is a sequence of
    ``(P_pos_i, P_neg_i, S_i)`` triples, one per expert.
    """
    e_pos, e_neg = gates
    p_pos = np.hstack([e[0] for e in experts])
    p_neg = np.hstack([e[1] for e in experts])
    s = np.vstack([e[2] for e in experts])
    with ad.no_grad():
        out = dual_gate_moe(Tensor(T), Tensor(e_pos), Tensor(e_neg),
                            Tensor(p_pos), Tensor(p_neg), Tensor(s), K)
    return out.data


def _attention(X: Tensor, wq, wk, wv, wo, heads: int, allowed: np.ndarray) -> Tensor:
    d = X.shape[1]
    dh = d // heads
    Q, Kt, V = ad.matmul(X, wq), ad.matmul(X, wk), ad.matmul(X, wv)
    outs = []
    for hd in range(heads):
        lo, hi = hd * dh, (hd + 1) * dh
        q, k_, v = ad.col_slice(Q, lo, hi), ad.col_slice(Kt, lo, hi), ad.col_slice(V, lo, hi)
        scores = ad.scale(ad.matmul(q, ad.transpose(k_)), 1.0 / math.sqrt(dh))
        outs.append(ad.matmul(ad.softmax_rows(scores, allowed), v))
    return ad.matmul(ad.concat_cols(outs) if heads > 1 else outs[0], wo)


def _check_tokens(tokens: Sequence[int], config: RouterConfig) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise InvalidInputError("empty sequence")
    if ids.size > config.n_max:
        raise InvalidInputError(f"sequence of {ids.size} tokens exceeds n_max={config.n_max}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        bad = int(ids[(ids < 0) | (ids >= config.vocab_size)][0])
        raise InvalidInputError(f"unknown token id {bad}")
    return ids


def forward_batch(params: dict[str, Tensor], config: RouterConfig,
                  token_lists: Sequence[Sequence[int]], trace: list | None = None) -> Tensor:
    """Per-metric predictions (records x N) for a batch of token sequences."""
    ids = [_check_tokens(t, config) for t in token_lists]
    lengths = [len(t) for t in ids]
    bounds = np.cumsum([0] + lengths)
    segments = list(zip(bounds[:-1], bounds[1:]))
    total = int(bounds[-1])

    allowed = np.zeros((total, total), dtype=bool)
    pool = np.zeros((len(ids), total))
    for r, (lo, hi) in enumerate(segments):
        allowed[lo:hi, lo:hi] = True
        pool[r, lo:hi] = 1.0 / (hi - lo)

    X = ad.row_select(params["embed"], np.concatenate(ids))
    for i in range(config.layers):
        p = f"layer{i}."
        X = ad.add(X, _attention(X, params[p + "wq"], params[p + "wk"], params[p + "wv"],
                                 params[p + "wo"], config.attn_heads, allowed))
        X = ad.add(X, dual_gate_moe(X, params[p + "e_pos"], params[p + "e_neg"],
                                    params[p + "p_pos"], params[p + "p_neg"], params[p + "s"],
                                    config.K, segments, trace))
    pooled = ad.matmul(Tensor(pool), X)
    return ad.sigmoid(ad.add(ad.matmul(pooled, params["head_w"]), params["head_b"]))


def combine_prs(head_preds: np.ndarray, weights) -> np.ndarray | float:
    """Weighted sum of per-metric predictions, centred so all-0.5 gives 0.5 exactly."""
    w = np.asarray(weights, dtype=np.float64)
    out = 0.5 + np.sum((np.asarray(head_preds, dtype=np.float64) - 0.5) * w, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def mse_loss(predictions: Tensor, targets) -> Tensor:
    """Mean squared error over heads and batch rows."""
    targets = Tensor(np.asarray(targets, dtype=np.float64).reshape(predictions.shape))
    diff = ad.sub(predictions, targets)
    return ad.mean_all(ad.mul(diff, diff))


def loss(predictions, label_distances) -> float:
    """Array-level per-head MSE, for checking labels against predictions."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(label_distances, dtype=np.float64)
    if p.shape != t.shape:
        raise DataError(f"prediction shape {p.shape} vs label shape {t.shape}")
    return float(np.mean((p - t) ** 2))


# --------------------------------------------------------------------------- checkpoint

MAGIC = b"PRSRCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: RouterConfig
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for arr in self.params.values():
            arr.setflags(write=False)

    def tensors(self) -> dict[str, Tensor]:
        return {name: Tensor(arr) for name, arr in self.params.items()}

    def predict(self, token_lists: Sequence[Sequence[int]]) -> np.ndarray:
        """Head outputs, one row per sequence. Each sequence runs alone."""
        tensors = self.tensors()
        rows = []
        with ad.no_grad():
            for tokens in token_lists:
                rows.append(forward_batch(tensors, self.config, [tokens]).data[0])
        return np.array(rows).reshape(len(rows), self.config.n_metrics)

    def predict_prs(self, token_lists: Sequence[Sequence[int]]) -> np.ndarray:
        return combine_prs(self.predict(token_lists), self.config.weights)

    def to_bytes(self) -> bytes:
        def block(obj) -> bytes:
            raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
            return struct.pack("<I", len(raw)) + raw

        out = [MAGIC, struct.pack("<I", FORMAT_VERSION),
               block(self.config.to_dict()), block(self.meta),
               struct.pack("<I", len(self.params))]
        for name, arr in self.params.items():
            raw_name = name.encode()
            rows, cols = arr.shape
            out.append(struct.pack("<H", len(raw_name)) + raw_name)
            out.append(struct.pack("<II", rows, cols))
            out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(buf):
                raise ParseError("corrupt checkpoint: truncated")
            chunk = buf[pos:pos + n]
            pos += n
            return chunk

        if take(len(MAGIC)) != MAGIC:
            raise ParseError("corrupt checkpoint: bad magic bytes")
        (version,) = struct.unpack("<I", take(4))
        if version != FORMAT_VERSION:
            raise ParseError(f"unsupported checkpoint format version {version}")
        try:
            config = RouterConfig.from_dict(json.loads(take(struct.unpack("<I", take(4))[0])))
            meta = json.loads(take(struct.unpack("<I", take(4))[0]))
        except (ValueError, TypeError) as exc:
            raise ParseError(f"corrupt checkpoint: {exc}") from exc
        (count,) = struct.unpack("<I", take(4))
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", take(2))
            name = take(name_len).decode()
            rows, cols = struct.unpack("<II", take(8))
            data = np.frombuffer(take(8 * rows * cols), dtype="<f8").reshape(rows, cols)
            params[name] = data.astype(np.float64)
        if pos != len(buf):
            raise ParseError("corrupt checkpoint: trailing bytes")
        expected = init_params(config, np.random.default_rng(0))
        if list(expected) != list(params) or any(
                expected[n].shape != params[n].shape for n in expected):
            raise ParseError("corrupt checkpoint: parameter set does not match config")
        return cls(config, params, meta)

    def save(self, path: str | Path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def random_checkpoint(config: RouterConfig) -> Checkpoint:
    """Untrained checkpoint drawn from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    return Checkpoint(config, init_params(config, rng), {"seed": config.seed, "epochs_run": 0,
                                                         "loss_history": []})


# --------------------------------------------------------------------------- training

class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.weight_decay, self.eps = lr, weight_decay, eps
        self.b1, self.b2 = betas
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.t = 0

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(token_lists: Sequence[Sequence[int]], targets, config: RouterConfig,
          progress=None) -> Checkpoint:
    """Fit the router to per-metric distance targets with Adam.

    ``targets`` is a (records x N) array of quality distances. The shuffle
    order and the initial parameters both come from ``config.seed``, so two
    runs with the same inputs produce identical checkpoints. ``progress``,
    if given, is called as ``progress(epoch, mean_loss)``.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if len(token_lists) == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    if targets.shape != (len(token_lists), config.n_metrics):
        raise DataError(f"targets shape {targets.shape} does not match "
                        f"{len(token_lists)} records x {config.n_metrics} metrics")
    for tokens in token_lists:
        _check_tokens(tokens, config)

    rng = np.random.default_rng(config.seed)
    params = {n: Tensor(a, requires_grad=True) for n, a in init_params(config, rng).items()}
    opt = Adam(params, config.learning_rate, config.weight_decay)
    history = []
    n = len(token_lists)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            opt.zero_grad()
            preds = forward_batch(params, config, [token_lists[i] for i in idx])
            batch_loss = mse_loss(preds, targets[idx])
            ad.backward(batch_loss)
            opt.step()
            total += batch_loss.item() * len(idx)
        history.append(total / n)
        log.info("epoch %d/%d loss %.6f", epoch + 1, config.epochs, history[-1])
        if progress is not None:
            progress(epoch, history[-1])
    meta = {"seed": config.seed, "epochs_run": config.epochs, "loss_history": history,
            "train_records": n}
    return Checkpoint(config, {name: t.data.copy() for name, t in params.items()}, meta)
