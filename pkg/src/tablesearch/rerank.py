"""True-token-probability reranking and reranker training-set builders."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import httpx
import numpy as np

from .corpus import QuerySample, TableRecord
from .embed import EncoderParams, encode_doc, encode_query, featurize, featurize_many
from .index import SearchResult
from .prompts import CONTEXT_RANKING, assemble_prompt

log = logging.getLogger(__name__)

RQA = "RQA"
CR = "context_ranking"
RAR = "RAR"
RECORD_KINDS = (RQA, CR, RAR)


class RerankError(RuntimeError):
    pass


class ScorerError(RuntimeError):
    def __init__(self, table_id: str, cause: Exception | str):
        super().__init__(f"scoring failed for candidate {table_id!r}: {cause}")
        self.table_id = table_id


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class CandidateScore:
    table_id: str
    prob_true: float
    backend_tag: str
    retrieval_rank: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.prob_true) and 0.0 <= self.prob_true <= 1.0):
            raise ValueError(f"prob_true {self.prob_true} for {self.table_id!r} outside [0, 1]")

    def to_json(self) -> dict:
        return {"table_id": self.table_id, "prob_true": self.prob_true,
                "backend_tag": self.backend_tag, "retrieval_rank": self.retrieval_rank}


class Scorer(Protocol):
    tag: str

    def score(self, query: QuerySample, candidates: Sequence[SearchResult]) -> list[float]: ...


def _unit_draw(*parts) -> float:
    h = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little") / 2.0 ** 64


@dataclass(frozen=True)
class PlantedScorerConfig:
    ground_truth_map: Mapping[str, str]
    noise_epsilon: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise_epsilon <= 1.0:
            raise ValueError("noise_epsilon must lie in [0, 1]")


def planted_score(config: PlantedScorerConfig, sample_id: str, table_id: str) -> float:
    """Ground-truth pairs score in [1 - eps, 1], others in [0, eps]."""
    if sample_id not in config.ground_truth_map:
        raise KeyError(f"unknown sample_id {sample_id!r}")
    u = _unit_draw(config.seed, sample_id, table_id)
    eps = config.noise_epsilon
    if config.ground_truth_map[sample_id] == table_id:
        return 1.0 - eps * u
    return eps * u


class PlantedScorer:
    tag = "planted"

    def __init__(self, config: PlantedScorerConfig):
        self.config = config

    def score(self, query, candidates):
        out = []
        for c in candidates:
            try:
                out.append(planted_score(self.config, query.sample_id, c.table_id))
            except KeyError as exc:
                raise ScorerError(c.table_id, exc) from exc
        return out


class EmbeddingProxyScorer:
    """sigmoid(scale * cosine + offset) between the query and candidate embeddings."""

    tag = "embedding_proxy"

    def __init__(self, params: EncoderParams, tables: Mapping[str, TableRecord],
                 scale: float = 10.0, offset: float = -5.0):
        self.params = params
        self.tables = tables
        self.scale = scale
        self.offset = offset

    def score(self, query, candidates):
        q = encode_query(self.params, featurize(query.query, self.params.d_f))
        texts = []
        for c in candidates:
            t = self.tables.get(c.table_id)
            if t is None or not t.surrogate_text:
                raise ScorerError(c.table_id, "no surrogate text to embed")
            texts.append(t.surrogate_text)
        d = encode_doc(self.params, featurize_many(texts, self.params.d_f))
        z = self.scale * (d @ q) + self.offset
        return [float(x) for x in 1.0 / (1.0 + np.exp(-z))]


class RemoteScorer:
    """POST /score client. One candidate per request unless ``batch`` is set."""

    tag = "remote"

    def __init__(self, endpoint: str, tables: Mapping[str, TableRecord], timeout: float = 30.0,
                 retries: int = 2, batch: bool = False, client: httpx.Client | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.tables = tables
        self.retries = retries
        self.batch = batch
        self.client = client or httpx.Client(timeout=timeout)

    def _payload(self, query, cands):
        items = []
        for c in cands:
            t = self.tables[c.table_id]
            item = {"table_id": c.table_id}
            if t.image_ref:
                item["image_ref"] = t.image_ref
            else:
                item["surrogate_text"] = t.surrogate_text
            items.append(item)
        prompt = assemble_prompt(CONTEXT_RANKING, query.query, [cands[0].table_id], self.tables)
        return {"query_text": query.query,
                "prompt": prompt.to_wire(self.tables)[0]["text"],
                "candidates": items}

    def _post(self, payload, table_id):
        last = None
        for _ in range(self.retries + 1):
            try:
                resp = self.client.post(self.endpoint + "/score", json=payload)
                resp.raise_for_status()
                return {s["table_id"]: float(s["prob_true"]) for s in resp.json()["scores"]}
            except (httpx.HTTPError, KeyError, ValueError, TypeError) as exc:
                last = exc
        raise ScorerError(table_id, last)

    def score(self, query, candidates):
        groups = [list(candidates)] if self.batch else [[c] for c in candidates]
        out = {}
        for group in groups:
            out.update(self._post(self._payload(query, group), group[0].table_id))
        missing = [c.table_id for c in candidates if c.table_id not in out]
        if missing:
            raise ScorerError(missing[0], "backend returned no score")
        return [out[c.table_id] for c in candidates]


def rerank(scorer: Scorer, query: QuerySample, candidates: Sequence[SearchResult], k: int) -> list[CandidateScore]:
    """Score every candidate once and keep the top ``k`` by prob_true.

    Ties fall back to retrieval rank, then table id.
    """
    if not candidates:
        raise RerankError("no candidates to rerank")
    if not 1 <= k <= len(candidates):
        raise RerankError(f"k={k} out of range for {len(candidates)} candidates")
    try:
        probs = scorer.score(query, candidates)
    except ScorerError:
        raise
    except Exception as exc:
        raise ScorerError(candidates[0].table_id if len(candidates) == 1 else "<batch>", exc) from exc
    if len(probs) != len(candidates):
        raise RerankError(f"scorer returned {len(probs)} scores for {len(candidates)} candidates")
    scored = [CandidateScore(c.table_id, float(p), scorer.tag, c.rank) for c, p in zip(candidates, probs)]
    scored.sort(key=lambda s: (-s.prob_true, s.retrieval_rank, s.table_id))
    return scored[:k]


@dataclass(frozen=True)
class RerankTrainingRecord:
    kind: str
    query: str
    context_ids: tuple[str, ...]
    label: object  # str for RQA, "True"/"False" for context_ranking, list[int] for RAR
    sample_id: str = ""
    split: str = "train"

    def __post_init__(self):
        if self.kind not in RECORD_KINDS:
            raise DatasetError(f"unknown record kind {self.kind!r}")
        if self.kind == CR and len(self.context_ids) != 1:
            raise DatasetError("context_ranking records hold exactly one context")
        if self.kind == RAR and not all(1 <= i <= len(self.context_ids) for i in self.label):
            raise DatasetError(f"RAR label {self.label} out of range")

    def to_json(self) -> dict:
        label = list(self.label) if self.kind == RAR else self.label
        return {"kind": self.kind, "sample_id": self.sample_id, "query": self.query,
                "context_ids": list(self.context_ids), "label": label, "split": self.split}


def _negatives(sample: QuerySample, runs: Mapping[str, Sequence[str]], pool_size: int) -> list[str]:
    if sample.sample_id not in runs:
        raise DatasetError(f"no retrieval run for sample {sample.sample_id!r}")
    return [t for t in list(runs[sample.sample_id])[:pool_size] if t != sample.table_id]


def _rng(seed: int, sample_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, int(_unit_draw("sample", sample_id) * 2 ** 32)])


def build_context_ranking_set(samples: Sequence[QuerySample], retrieval_runs: Mapping[str, Sequence[str]],
                              negatives_per_query: int = 20, pool_size: int = 50, seed: int = 0,
                              split: str = "train") -> list[RerankTrainingRecord]:
    out = []
    short = 0
    for s in samples:
        pool = _negatives(s, retrieval_runs, pool_size)
        if not pool:
            raise DatasetError(f"sample {s.sample_id!r}: no non-ground-truth candidates in the pool")
        take = min(negatives_per_query, len(pool))
        short += take < negatives_per_query
        out.append(RerankTrainingRecord(CR, s.query, (s.table_id,), "True", s.sample_id, split))
        picks = _rng(seed, s.sample_id).choice(len(pool), size=take, replace=False)
        out += [RerankTrainingRecord(CR, s.query, (pool[i],), "False", s.sample_id, split) for i in picks]
    if short:
        warnings.warn(f"{short} queries had fewer than {negatives_per_query} negatives available",
                      stacklevel=2)
    return out


def _mixed_contexts(s, runs, context_width, pool_size, seed):
    if context_width < 1:
        raise DatasetError("context_width must be >= 1")
    pool = _negatives(s, runs, pool_size)
    if len(pool) < context_width - 1:
        raise DatasetError(f"sample {s.sample_id!r}: {len(pool)} distractors, need {context_width - 1}")
    rng = _rng(seed, s.sample_id)
    distractors = [pool[i] for i in rng.choice(len(pool), size=context_width - 1, replace=False)]
    contexts = [s.table_id] + distractors
    return [contexts[i] for i in rng.permutation(len(contexts))]


def build_rqa_set(samples, retrieval_runs, context_width: int = 2, seed: int = 0,
                  pool_size: int = 50, split: str = "train") -> list[RerankTrainingRecord]:
    """Ground truth plus ``context_width - 1`` distractors sampled from the top pool, shuffled."""
    out = []
    for s in samples:
        ctx = _mixed_contexts(s, retrieval_runs, context_width, pool_size, seed)
        out.append(RerankTrainingRecord(RQA, s.query, tuple(ctx), s.answer, s.sample_id, split))
    return out


def build_rar_set(samples, retrieval_runs, context_width: int = 2, seed: int = 0,
                  pool_size: int = 50, split: str = "train") -> list[RerankTrainingRecord]:
    out = []
    for s in samples:
        ctx = _mixed_contexts(s, retrieval_runs, context_width, pool_size, seed)
        label = [i + 1 for i, t in enumerate(ctx) if t == s.table_id]
        out.append(RerankTrainingRecord(RAR, s.query, tuple(ctx), label, s.sample_id, split))
    return out


def export_training_sets(records: Sequence[RerankTrainingRecord], path: str | Path) -> dict:
    if not records:
        raise DatasetError("no records to export")
    path = Path(path)
    payload = "".join(json.dumps(r.to_json(), sort_keys=True, ensure_ascii=False) + "\n" for r in records)
    path.write_text(payload, encoding="utf-8")
    counts = Counter(r.kind for r in records)
    by_split = Counter((r.split, r.kind) for r in records)
    manifest = {
        "counts": {k: counts.get(k, 0) for k in RECORD_KINDS},
        "by_split": {sp: {k: by_split.get((sp, k), 0) for k in RECORD_KINDS}
                     for sp in sorted({r.split for r in records})},
        "sha256": hashlib.sha256(payload.encode("utf-8")).hexdigest(),
    }
    path.with_name(path.name + ".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
