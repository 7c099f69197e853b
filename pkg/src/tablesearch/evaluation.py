"""Ranking metrics (MRR@k, recall@k), exact match and smoothed BLEU."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .prompts import Answer

DEFAULT_K_GRID = (1, 10, 20, 30, 40, 50, 100, 150, 200)
RERANK_K_GRID = tuple(range(1, 11))


@dataclass(frozen=True)
class RankedQuery:
    sample_id: str
    candidates: tuple[str, ...]
    ground_truth: str

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError(f"duplicate candidates for {self.sample_id!r}")

    def rank(self) -> int | None:
        try:
            return self.candidates.index(self.ground_truth) + 1
        except ValueError:
            return None


@dataclass(frozen=True)
class RankingRun:
    queries: tuple[RankedQuery, ...]
    stage_tag: str = "retrieval"

    def __post_init__(self):
        object.__setattr__(self, "queries", tuple(self.queries))

    @classmethod
    def from_lists(cls, runs: dict[str, Sequence[str]], truth: dict[str, str], stage_tag="retrieval"):
        return cls(tuple(RankedQuery(sid, tuple(c), truth[sid]) for sid, c in runs.items()), stage_tag)

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"sample_id": q.sample_id, "candidates": list(q.candidates),
                                   "ground_truth": q.ground_truth, "stage_tag": self.stage_tag}) + "\n"
                       for q in self.queries)

    @classmethod
    def read(cls, path: str | Path) -> "RankingRun":
        rows = [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]
        if not rows:
            raise ValueError(f"{path}: empty run file")
        return cls(tuple(RankedQuery(r["sample_id"], tuple(r["candidates"]), r["ground_truth"]) for r in rows),
                   rows[0].get("stage_tag", "retrieval"))


def _check(run: RankingRun, k: int):
    if not run.queries:
        raise ValueError("empty run")
    if k < 1:
        raise ValueError("k must be >= 1")


def mrr_at_k(run: RankingRun, k: int) -> float:
    _check(run, k)
    total = 0.0
    for q in run.queries:
        r = q.rank()
        if r is not None and r <= k:
            total += 1.0 / r
    return total / len(run.queries)


def recall_at_k(run: RankingRun, k: int) -> float:
    _check(run, k)
    hits = sum(1 for q in run.queries if (r := q.rank()) is not None and r <= k)
    return hits / len(run.queries)


@dataclass(frozen=True)
class MetricCurve:
    metric: str
    stage_tag: str
    points: tuple[tuple[int, float], ...]


def metric_curves(run: RankingRun, k_grid: Sequence[int] = DEFAULT_K_GRID) -> list[MetricCurve]:
    if not k_grid:
        raise ValueError("empty k grid")
    ks = sorted(set(int(k) for k in k_grid))
    return [
        MetricCurve("mrr", run.stage_tag, tuple((k, mrr_at_k(run, k)) for k in ks)),
        MetricCurve("recall", run.stage_tag, tuple((k, recall_at_k(run, k)) for k in ks)),
    ]


def format_curves(curves: Iterable[MetricCurve]) -> str:
    lines = ["metric\tstage_tag\tk\tvalue"]
    for c in curves:
        lines += [f"{c.metric}\t{c.stage_tag}\t{k}\t{v:.6f}" for k, v in c.points]
    return "\n".join(lines) + "\n"


def normalize_answer(text: str) -> str:
    return " ".join(text.casefold().split())


@dataclass(frozen=True)
class GenEvalRecord:
    sample_id: str
    prediction: Answer
    reference: str
    task_tag: str = "QA"

    @property
    def metric(self) -> str:
        return "bleu" if self.task_tag == "text_generation" else "accuracy"

    def value(self) -> float:
        first = self.prediction.parsed[0] if self.prediction.parsed else ""
        if self.metric == "accuracy":
            return float(normalize_answer(first) == normalize_answer(self.reference))
        return bleu(" ".join(self.prediction.parsed), [self.reference]) if first.strip() else 0.0


def exact_match_accuracy(records: Sequence[GenEvalRecord]) -> float:
    if not records:
        raise ValueError("no records")
    hits = 0
    for r in records:
        first = r.prediction.parsed[0] if r.prediction.parsed else ""
        hits += normalize_answer(first) == normalize_answer(r.reference)
    return hits / len(records)


def generation_report(records: Sequence[GenEvalRecord]) -> dict[str, dict]:
    """Mean metric per task tag: accuracy for QA / fact verification, BLEU for text generation."""
    by_task: dict[str, list[GenEvalRecord]] = {}
    for r in records:
        by_task.setdefault(r.task_tag, []).append(r)
    return {task: {"metric": rs[0].metric, "n": len(rs), "value": sum(r.value() for r in rs) / len(rs)}
            for task, rs in sorted(by_task.items())}


_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(prediction: str, references: Sequence[str], max_n: int = 4) -> float:
    """Sentence BLEU with clipped precisions and brevity penalty.

    Precisions for n >= 2 get add-one smoothing on numerator and denominator;
    unigram precision is unsmoothed, so disjoint vocabularies score 0.
    """
    pred = tokenize(prediction)
    if not pred:
        raise ValueError("empty prediction")
    refs = [tokenize(r) for r in references]
    if not refs:
        raise ValueError("no references")
    log_p = 0.0
    for n in range(1, max_n + 1):
        counts = _ngrams(pred, n)
        max_ref: Counter = Counter()
        for r in refs:
            for g, c in _ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], c)
        matched = sum(min(c, max_ref[g]) for g, c in counts.items())
        total = sum(counts.values())
        if n == 1:
            if matched == 0:
                return 0.0
            p = matched / total
        else:
            p = (matched + 1) / (total + 1)
        log_p += math.log(p) / max_n
    c = len(pred)
    r = min((abs(len(x) - c), len(x)) for x in refs)[1]
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_p)
