"""Hashed text features, affine bi-encoders and contrastive training."""

from __future__ import annotations

import hashlib
import math
import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_FEATURE_DIM = 2048
DEFAULT_EMBED_DIM = 128
LOSS_VARIANTS = ("symmetric_infonce", "literal_paper")

_TOKEN_RE = re.compile(r"\w+")


class FeaturizeError(ValueError):
    pass


class EncodeError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


class CheckpointError(ValueError):
    pass


def _bucket(key: str, d_f: int) -> int:
    return zlib.crc32(key.encode("utf-8")) % d_f


def featurize(text: str, d_f: int = DEFAULT_FEATURE_DIM) -> np.ndarray:
    """Hashed counts of word unigrams and character trigrams, L2-normalized."""
    if not text:
        raise FeaturizeError("cannot featurize empty text")
    tokens = _TOKEN_RE.findall(text.casefold())
    if not tokens:
        raise FeaturizeError(f"no extractable n-grams in {text[:40]!r}")
    v = np.zeros(d_f, dtype=np.float64)
    for tok in tokens:
        v[_bucket("w:" + tok, d_f)] += 1.0
        padded = f"#{tok}#"
        for i in range(len(padded) - 2):
            v[_bucket("c:" + padded[i:i + 3], d_f)] += 1.0
    return v / np.linalg.norm(v)


def featurize_many(texts: Sequence[str], d_f: int = DEFAULT_FEATURE_DIM) -> np.ndarray:
    return np.stack([featurize(t, d_f) for t in texts]) if texts else np.zeros((0, d_f))


@dataclass(frozen=True, eq=False)
class EncoderParams:
    w_text: np.ndarray  # (d, d_f)
    b_text: np.ndarray  # (d,)
    w_doc: np.ndarray
    b_doc: np.ndarray
    version: int = 0

    def __post_init__(self):
        d, d_f = self.w_text.shape
        if self.w_doc.shape != (d, d_f) or self.b_text.shape != (d,) or self.b_doc.shape != (d,):
            raise EncodeError("inconsistent parameter shapes")
        for arr in (self.w_text, self.b_text, self.w_doc, self.b_doc):
            if not np.all(np.isfinite(arr)):
                raise EncodeError("parameters contain non-finite entries")
            arr.flags.writeable = False

    @property
    def d(self) -> int:
        return self.w_text.shape[0]

    @property
    def d_f(self) -> int:
        return self.w_text.shape[1]

    @property
    def n_params(self) -> int:
        return 2 * (self.d * self.d_f + self.d)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"w_text": self.w_text, "b_text": self.b_text, "w_doc": self.w_doc, "b_doc": self.b_doc}

    def allclose(self, other: "EncoderParams", atol: float = 0.0) -> bool:
        return all(np.allclose(a, b, rtol=0, atol=atol)
                   for a, b in zip(self.as_dict().values(), other.as_dict().values()))


def init_params(d_f: int = DEFAULT_FEATURE_DIM, d: int = DEFAULT_EMBED_DIM, seed: int = 0,
                tied: bool = False) -> EncoderParams:
    """Uniform(-1/sqrt(d_f), 1/sqrt(d_f)) weights, zero bias.

    ``tied=True`` shares one random projection between both towers, which makes
    the untrained retriever a noisy lexical matcher instead of a random one.
    """
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(d_f)
    w_text = rng.uniform(-bound, bound, size=(d, d_f))
    w_doc = w_text.copy() if tied else rng.uniform(-bound, bound, size=(d, d_f))
    return EncoderParams(w_text, np.zeros(d), w_doc, np.zeros(d), version=0)


def _encode(w, b, f):
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != w.shape[1]:
        raise EncodeError(f"feature dimension {f.shape[-1]} != encoder input {w.shape[1]}")
    z = f @ w.T + b
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    if not np.all(np.isfinite(z)) or np.any(norms == 0):
        raise EncodeError("encoder output is non-finite or zero")
    return z / norms


def encode_query(params: EncoderParams, f) -> np.ndarray:
    return _encode(params.w_text, params.b_text, f)


def encode_doc(params: EncoderParams, f) -> np.ndarray:
    return _encode(params.w_doc, params.b_doc, f)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        raise ValueError("cosine of a zero vector")
    return float(np.clip(np.dot(a, b) / denom, -1.0, 1.0))


def _logsumexp(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)


def _softmax(x, axis):
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def contrastive_loss(q_emb, d_emb, temperature: float = 0.05, variant: str = "symmetric_infonce"):
    """Batch contrastive loss over aligned (query, document) embeddings.

    Returns ``(loss, grad_q, grad_d)`` with gradients taken w.r.t. the raw
    embedding matrices (similarity is the plain dot product).

    ``symmetric_infonce`` averages the query->doc and doc->query softmax
    cross-entropies with in-batch negatives. ``literal_paper`` normalizes
    each matched similarity only by the other matched similarities.
    """
    q = np.asarray(q_emb, dtype=np.float64)
    d = np.asarray(d_emb, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] == 0:
        raise ValueError("empty batch")
    if q.shape != d.shape:
        raise ValueError(f"batch shapes differ: {q.shape} vs {d.shape}")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if variant not in LOSS_VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}")
    b = q.shape[0]
    logits = (q @ d.T) / temperature
    diag = np.diagonal(logits)
    if variant == "symmetric_infonce":
        l_qd = np.mean(_logsumexp(logits, axis=1) - diag)
        l_dq = np.mean(_logsumexp(logits, axis=0) - diag)
        loss = 0.5 * (l_qd + l_dq)
        eye = np.eye(b)
        g_logits = 0.5 * ((_softmax(logits, axis=1) - eye) + (_softmax(logits, axis=0) - eye)) / b
    else:
        loss = float(_logsumexp(diag, axis=0) - np.mean(diag))
        g_logits = np.diag(_softmax(diag, axis=0) - 1.0 / b)
    g_sim = g_logits / temperature
    return float(loss), g_sim @ d, g_sim.T @ q


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    batch_size: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    temperature: float = 0.05
    epochs: int = 5
    seed: int = 0
    loss_variant: str = "symmetric_infonce"
    embed_dim: int = DEFAULT_EMBED_DIM
    feature_dim: int = DEFAULT_FEATURE_DIM

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.warmup_steps < 0 or self.epochs < 0:
            raise ValueError("warmup_steps and epochs must be non-negative")
        if self.batch_size < 1 or self.temperature <= 0:
            raise ValueError("batch_size and temperature must be positive")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss variant {self.loss_variant!r}")
        if self.loss_variant == "symmetric_infonce" and self.batch_size < 2:
            raise ValueError("symmetric_infonce needs batch_size >= 2 for in-batch negatives")


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup to the peak rate, then cosine decay to zero."""
    base = config.learning_rate
    if config.warmup_steps and step < config.warmup_steps:
        return base * (step + 1) / config.warmup_steps
    span = max(1, total_steps - config.warmup_steps)
    progress = min(1.0, (step - config.warmup_steps) / span)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def _tower_backward(w, b, f, g_emb):
    """Backprop through normalize(f @ w.T + b)."""
    z = f @ w.T + b
    norm = np.linalg.norm(z, axis=1, keepdims=True)
    e = z / norm
    g_z = (g_emb - e * np.sum(g_emb * e, axis=1, keepdims=True)) / norm
    return g_z.T @ f, g_z.sum(axis=0)


def batch_loss_and_grads(params: dict[str, np.ndarray], fq, fd, temperature, variant):
    q = _encode(params["w_text"], params["b_text"], fq)
    d = _encode(params["w_doc"], params["b_doc"], fd)
    loss, g_q, g_d = contrastive_loss(q, d, temperature, variant)
    gw_t, gb_t = _tower_backward(params["w_text"], params["b_text"], fq, g_q)
    gw_d, gb_d = _tower_backward(params["w_doc"], params["b_doc"], fd, g_d)
    return loss, {"w_text": gw_t, "b_text": gb_t, "w_doc": gw_d, "b_doc": gb_d}


@dataclass
class TrainResult:
    params: EncoderParams
    loss_curve: list[float] = field(default_factory=list)
    steps_per_epoch: int = 0

    def epoch_means(self) -> list[float]:
        n = self.steps_per_epoch
        return [float(np.mean(self.loss_curve[i:i + n])) for i in range(0, len(self.loss_curve), n)]


def train_retriever(config: TrainConfig, query_texts: Sequence[str], doc_texts: Sequence[str],
                    init: EncoderParams | None = None) -> TrainResult:
    """Train both towers with Adam on aligned (query, document) text pairs.

    Batches are drawn from a seeded shuffle each epoch; a trailing partial
    batch is dropped so every step sees ``batch_size`` pairs.
    """
    if len(query_texts) != len(doc_texts):
        raise ValueError("query and document lists must be aligned")
    n = len(query_texts)
    if n < config.batch_size:
        raise ValueError(f"{n} pairs is fewer than batch_size={config.batch_size}")
    init = init or init_params(config.feature_dim, config.embed_dim, config.seed)
    fq_all = featurize_many(query_texts, init.d_f)
    fd_all = featurize_many(doc_texts, init.d_f)

    params = {k: v.copy() for k, v in init.as_dict().items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    steps_per_epoch = n // config.batch_size
    total = steps_per_epoch * config.epochs
    rng = np.random.default_rng(config.seed)
    curve: list[float] = []
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for s in range(steps_per_epoch):
            idx = order[s * config.batch_size:(s + 1) * config.batch_size]
            loss, grads = batch_loss_and_grads(params, fq_all[idx], fd_all[idx],
                                               config.temperature, config.loss_variant)
            if not math.isfinite(loss):
                raise TrainingDiverged(step, loss)
            curve.append(loss)
            lr = lr_at(step, total, config)
            t = step + 1
            for k in params:
                m[k] = b1 * m[k] + (1 - b1) * grads[k]
                v[k] = b2 * v[k] + (1 - b2) * grads[k] ** 2
                if lr:
                    m_hat = m[k] / (1 - b1 ** t)
                    v_hat = v[k] / (1 - b2 ** t)
                    params[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + eps)
            step += 1
    version = init.version + 1 if total else init.version
    out = EncoderParams(params["w_text"], params["b_text"], params["w_doc"], params["b_doc"], version)
    return TrainResult(out, curve, steps_per_epoch)


# checkpoint layout: magic, format version, params version, d, d_f,
# then w_text, b_text, w_doc, b_doc as little-endian float32, then sha256
_CKPT_MAGIC = b"TSENC\x00"
_CKPT_FORMAT = 1
_CKPT_HEADER = struct.Struct("<6sIqII")


def save_params(params: EncoderParams, path: str | Path) -> None:
    body = _CKPT_HEADER.pack(_CKPT_MAGIC, _CKPT_FORMAT, params.version, params.d, params.d_f)
    for arr in (params.w_text, params.b_text, params.w_doc, params.b_doc):
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_params(path: str | Path) -> EncoderParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"parameter checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _CKPT_HEADER.size + 32:
        raise CheckpointError(f"{path}: file too short")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    magic, fmt, version, d, d_f = _CKPT_HEADER.unpack_from(body)
    if magic != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not an encoder checkpoint")
    if fmt != _CKPT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {fmt}")
    arrays, off = [], _CKPT_HEADER.size
    for shape in ((d, d_f), (d,), (d, d_f), (d,)):
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(body, dtype="<f4", count=count, offset=off)
                      .astype(np.float64).reshape(shape))
        off += 4 * count
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes in checkpoint")
    return EncoderParams(*arrays, version=version)


def write_loss_curve(curve: Sequence[float], path: str | Path) -> None:
    lines = ["step\tloss"] + [f"{i}\t{x:.8f}" for i, x in enumerate(curve)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_loss_curve(path: str | Path) -> list[float]:
    rows = Path(path).read_text().splitlines()[1:]
    return [float(r.split("\t")[1]) for r in rows if r]
