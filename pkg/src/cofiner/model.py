"""Hashed-embedding window encoder with a softmax tag head, trained with AdamW.

The forward pass is written for a batch of sentences whose tokens are
concatenated; losses are averaged per sentence, then over the batch.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import TaggedSentence

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
BOUNDARY = 0
LOG_FLOOR = 1e-12
PARAM_NAMES = ("E", "W1", "b1", "W2", "b2")

CKPT_MAGIC = b"CFNR"
CKPT_VERSION = 1


def fnv1a_64(text: str) -> int:
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 4096
    embed_dim: int = 32
    window: int = 2
    hidden_dim: int = 64
    num_tags: int = 3
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.vocab_size, self.embed_dim, self.hidden_dim, self.num_tags) < 1 or self.window < 0:
            raise ValueError(f"invalid model dimensions: {self}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must leave room for the boundary bucket")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def width(self) -> int:
        return 2 * self.window + 1


def bucket(token: str, vocab_size: int) -> int:
    # bucket 0 is reserved for out-of-sentence window slots
    return 1 + fnv1a_64(token.lower()) % (vocab_size - 1)


def featurize(sentence: TaggedSentence | Sequence[str], config: ModelConfig) -> np.ndarray:
    """Window bucket indices, shape ``[len(sentence), 2w+1]``."""
    tokens = sentence.tokens if isinstance(sentence, TaggedSentence) else sentence
    ids = [bucket(t, config.vocab_size) for t in tokens]
    w = config.window
    padded = [BOUNDARY] * w + ids + [BOUNDARY] * w
    n = len(ids)
    return np.array([padded[i:i + 2 * w + 1] for i in range(n)], dtype=np.int64).reshape(n, 2 * w + 1)


@dataclass
class ProbBatch:
    """Per-token tag distributions plus token provenance."""

    probs: np.ndarray
    sentence_ids: np.ndarray  # batch-local sentence index per token
    positions: np.ndarray
    lengths: np.ndarray  # token count per batch sentence

    @property
    def num_sentences(self) -> int:
        return len(self.lengths)

    @classmethod
    def single(cls, probs: np.ndarray) -> "ProbBatch":
        n = probs.shape[0]
        return cls(probs, np.zeros(n, dtype=np.int64), np.arange(n), np.array([n]))


@dataclass
class ForwardCache:
    features: np.ndarray
    x: np.ndarray
    z1: np.ndarray
    keep: np.ndarray | None  # inverted-dropout multiplier, None in eval mode
    h: np.ndarray
    probs: np.ndarray
    version: int
    used: bool = False


class CacheError(RuntimeError):
    pass


class TokenClassifier:
    def __init__(self, config: ModelConfig, dtype=np.float32, init: str = "random"):
        self.config = config
        self.dtype = np.dtype(dtype)
        c = config
        rng = np.random.default_rng(c.seed)
        d_in = c.width * c.embed_dim
        if init == "zeros":
            E = np.zeros((c.vocab_size, c.embed_dim))
            W1 = np.zeros((c.hidden_dim, d_in))
            W2 = np.zeros((c.num_tags, c.hidden_dim))
        else:
            E = rng.normal(0.0, 0.1, (c.vocab_size, c.embed_dim))
            W1 = rng.normal(0.0, np.sqrt(2.0 / d_in), (c.hidden_dim, d_in))
            W2 = rng.normal(0.0, np.sqrt(1.0 / c.hidden_dim), (c.num_tags, c.hidden_dim))
        self.params = {
            "E": E, "W1": W1, "b1": np.zeros(c.hidden_dim),
            "W2": W2, "b2": np.zeros(c.num_tags),
        }
        self.params = {k: np.ascontiguousarray(v, dtype=self.dtype) for k, v in self.params.items()}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.version = 0  # bumped on every parameter update

    def astype(self, dtype) -> "TokenClassifier":
        other = TokenClassifier.__new__(TokenClassifier)
        other.config = self.config
        other.dtype = np.dtype(dtype)
        other.params = {k: v.astype(dtype) for k, v in self.params.items()}
        other.grads = {k: np.zeros_like(v) for k, v in other.params.items()}
        other.version = 0
        return other

    def copy(self) -> "TokenClassifier":
        return self.astype(self.dtype)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in PARAM_NAMES:
            h.update(np.ascontiguousarray(self.params[k], dtype=np.float32).tobytes())
        return h.hexdigest()

    def assert_finite(self):
        # a NaN/Inf anywhere makes the sum non-finite
        for k in PARAM_NAMES:
            if not np.isfinite(self.params[k].sum()) or not np.isfinite(self.grads[k].sum()):
                raise FloatingPointError(f"non-finite values in {k}")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: TokenClassifier, features: np.ndarray, train_mode: bool = False,
            rng: np.random.Generator | None = None) -> tuple[np.ndarray, ForwardCache]:
    """Tag distributions for stacked window features ``[T, 2w+1]``."""
    p = model.params
    c = model.config
    T = features.shape[0]
    x = p["E"][features].reshape(T, -1)
    z1 = x @ p["W1"].T + p["b1"]
    h = np.maximum(z1, 0)
    keep = None
    if train_mode and c.dropout > 0:
        if rng is None:
            raise ValueError("train_mode forward needs an rng for dropout")
        keep = (rng.random(h.shape) >= c.dropout).astype(model.dtype) / model.dtype.type(1.0 - c.dropout)
        h = h * keep
    logits = h @ p["W2"].T + p["b2"]
    probs = softmax(logits)
    return probs, ForwardCache(features, x, z1, keep, h, probs, model.version)


def _check_gold(gold: np.ndarray, num_tags: int, n: int):
    if gold.shape != (n,):
        raise ValueError(f"expected {n} gold tags, got shape {gold.shape}")
    if n and (gold.min() < 0 or gold.max() >= num_tags):
        raise ValueError("gold tag index out of range")


def _sentence_mean(batch: ProbBatch, terms: np.ndarray) -> float:
    # sequential per-sentence sums, then divide by each sentence's full length
    sums = np.bincount(batch.sentence_ids, weights=terms, minlength=batch.num_sentences)
    per_sent = sums / batch.lengths
    total = 0.0
    for v in per_sent:
        total += float(v)
    return total / batch.num_sentences


def _token_scale(batch: ProbBatch) -> np.ndarray:
    return 1.0 / (batch.lengths[batch.sentence_ids] * batch.num_sentences)


def fine_loss(batch: ProbBatch, gold) -> tuple[float, np.ndarray]:
    """Token cross-entropy, mean over each sentence, mean over sentences."""
    probs = batch.probs
    gold = np.asarray(gold, dtype=np.int64)
    T = probs.shape[0]
    _check_gold(gold, probs.shape[1], T)
    rows = np.arange(T)
    picked = np.maximum(probs[rows, gold], LOG_FLOOR)
    loss = _sentence_mean(batch, -np.log(picked.astype(np.float64)))
    grad = np.zeros_like(probs)
    grad[rows, gold] = -_token_scale(batch) / picked
    return loss, grad


def marginalize(probs: np.ndarray, tag_matrix: np.ndarray) -> np.ndarray:
    """``p^C = p^F @ M`` with a fixed (sequential over fine tags) summation order."""
    if probs.shape[1] != tag_matrix.shape[0]:
        raise ValueError(f"F2C matrix has {tag_matrix.shape[0]} rows, model emits {probs.shape[1]} tags")
    return (probs[:, :, None] * tag_matrix[None, :, :].astype(probs.dtype)).sum(axis=1)


def coarse_loss(batch: ProbBatch, tag_matrix: np.ndarray, gold_coarse, mask,
                with_coarse_grad: bool = False):
    """Masked cross-entropy on fine probabilities pushed through the F2C matrix.

    Masked-out tokens contribute nothing but still count in each sentence's
    length denominator. Returns ``(loss, dL/dprobs)`` and, if requested, also
    ``dL/dp^C`` (needed when the matrix itself is learned).
    """
    probs = batch.probs
    T = probs.shape[0]
    gold = np.asarray(gold_coarse, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if tag_matrix.ndim != 2 or tag_matrix.shape[0] != probs.shape[1]:
        raise ValueError(f"F2C matrix shape {tag_matrix.shape} does not fit {probs.shape[1]} fine tags")
    if mask.shape != (T,):
        raise ValueError(f"mask length {mask.shape} != {T} tokens")
    _check_gold(gold, tag_matrix.shape[1], T)
    pc = marginalize(probs, tag_matrix)
    rows = np.arange(T)
    picked = np.maximum(pc[rows, gold], LOG_FLOOR)
    terms = np.where(mask, -np.log(picked.astype(np.float64)), 0.0)
    loss = _sentence_mean(batch, terms)
    dpc = np.zeros_like(pc)
    dpc[rows, gold] = np.where(mask, -_token_scale(batch) / picked, 0.0)
    dprobs = dpc @ tag_matrix.T.astype(probs.dtype)
    if with_coarse_grad:
        return loss, dprobs, dpc
    return loss, dprobs


def backward(model: TokenClassifier, cache: ForwardCache, dprobs: np.ndarray) -> None:
    """Accumulate parameter gradients for one forward pass."""
    if cache is None or cache.used:
        raise CacheError("backward needs a fresh forward cache")
    if cache.version != model.version:
        raise CacheError("forward cache predates the last parameter update")
    if dprobs.shape != cache.probs.shape:
        raise CacheError(f"gradient shape {dprobs.shape} != probs shape {cache.probs.shape}")
    cache.used = True
    p, g = model.params, model.grads
    probs = cache.probs
    dlogits = probs * (dprobs - (dprobs * probs).sum(axis=1, keepdims=True))
    g["W2"] += dlogits.T @ cache.h
    g["b2"] += dlogits.sum(axis=0)
    dh = dlogits @ p["W2"]
    if cache.keep is not None:
        dh *= cache.keep
    dz1 = dh * (cache.z1 > 0)
    g["W1"] += dz1.T @ cache.x
    g["b1"] += dz1.sum(axis=0)
    dx = (dz1 @ p["W1"]).reshape(cache.features.shape[0] * cache.features.shape[1], -1)
    # scatter-add rows of dx into E by bucket, summing duplicates in a fixed order
    flat = cache.features.reshape(-1)
    order = np.argsort(flat, kind="stable")
    sorted_ids = flat[order]
    starts = np.flatnonzero(np.concatenate(([True], sorted_ids[1:] != sorted_ids[:-1])))
    g["E"][sorted_ids[starts]] += np.add.reduceat(dx[order], starts, axis=0)


@dataclass
class OptimizerState:
    """AdamW moments keyed by parameter name."""

    lr: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    no_decay: set = field(default_factory=set)


def adamw_update(params: dict, grads: dict, state: OptimizerState) -> None:
    """One AdamW step over matching ``params``/``grads``; zeroes the grads."""
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    step_size = state.lr / bc1
    root_bc2 = np.sqrt(bc2)
    for name, param in params.items():
        grad = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(param)
            state.v[name] = np.zeros_like(param)
        m, v = state.m[name], state.v[name]
        m *= b1
        tmp = grad * (1.0 - b1)
        m += tmp
        v *= b2
        np.multiply(grad, grad, out=tmp)
        tmp *= 1.0 - b2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp /= root_bc2
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= step_size
        param -= tmp
        if state.weight_decay and name not in state.no_decay:
            param *= 1.0 - state.lr * state.weight_decay
        grad.fill(0)


def optimizer_step(model: TokenClassifier, state: OptimizerState,
                   extra_params: dict | None = None, extra_grads: dict | None = None) -> None:
    params, grads = model.params, model.grads
    if extra_params:
        params = {**params, **extra_params}
        grads = {**grads, **extra_grads}
    adamw_update(params, grads, state)
    model.version += 1


# ---------------------------------------------------------------------------
# checkpoints

_CFG_FMT = "<IIIIIdq"


def save_checkpoint(model: TokenClassifier, path) -> str:
    """Write the binary checkpoint; returns its sha256."""
    c = model.config
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<I", CKPT_VERSION)
    buf += struct.pack(_CFG_FMT, c.vocab_size, c.embed_dim, c.window, c.hidden_dim,
                       c.num_tags, c.dropout, c.seed)
    for name in PARAM_NAMES:
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))
    return hashlib.sha256(buf).hexdigest()


def load_checkpoint(path) -> TokenClassifier:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 8
    vals = struct.unpack_from(_CFG_FMT, data, off)
    off += struct.calcsize(_CFG_FMT)
    config = ModelConfig(*vals)
    model = TokenClassifier.__new__(TokenClassifier)
    model.config = config
    model.dtype = np.dtype(np.float32)
    model.params = {}
    for name in PARAM_NAMES:
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        model.params[name] = arr.astype(np.float32)
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    model.grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    model.version = 0
    return model


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_fields() -> list[str]:
    return [f.name for f in fields(ModelConfig)]


def predict_probs(model: TokenClassifier, features: Sequence[np.ndarray], chunk: int = 256) -> list[np.ndarray]:
    """Eval-mode tag distributions for many sentences (read-only)."""
    out = []
    for i in range(0, len(features), chunk):
        block = list(features[i:i + chunk])
        if not block:
            continue
        probs, _ = forward(model, np.concatenate(block), train_mode=False)
        cuts = np.cumsum([len(f) for f in block])[:-1]
        out.extend(np.split(probs, cuts))
    return out


def featurize_corpus(sentences, config: ModelConfig) -> list[np.ndarray]:
    return [featurize(s, config) for s in sentences]
