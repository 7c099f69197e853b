"""Table corpus loading, query filtering, pruning and partitioning."""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TASK_TAGS = ("QA", "fact_verification", "text_generation")
SPLITS = ("train", "test")


class CorpusError(ValueError):
    pass


class PruneError(ValueError):
    pass


@dataclass(frozen=True)
class TableRecord:
    table_id: str
    source_dataset: str
    surrogate_text: str | None = None
    image_ref: str | None = None
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.table_id:
            raise CorpusError("table_id must be non-empty")
        if not self.surrogate_text and not self.image_ref:
            raise CorpusError(f"table {self.table_id!r} has neither surrogate_text nor image_ref")

    def to_json(self) -> dict:
        out = {"kind": "table", "table_id": self.table_id, "source_dataset": self.source_dataset}
        if self.surrogate_text is not None:
            out["surrogate_text"] = self.surrogate_text
        if self.image_ref is not None:
            out["image_ref"] = self.image_ref
        if self.metadata:
            out["metadata"] = dict(self.metadata)
        return out


@dataclass(frozen=True)
class QuerySample:
    sample_id: str
    raw_query: str
    table_id: str
    answer: str
    task_tag: str = "QA"
    split: str = "train"
    pruned_query: str = ""

    def __post_init__(self):
        if not self.sample_id:
            raise CorpusError("sample_id must be non-empty")
        if self.task_tag not in TASK_TAGS:
            raise CorpusError(f"sample {self.sample_id!r}: unknown task_tag {self.task_tag!r}")
        if self.split not in SPLITS:
            raise CorpusError(f"sample {self.sample_id!r}: unknown split {self.split!r}")
        if not self.pruned_query:
            object.__setattr__(self, "pruned_query", " ".join(self.raw_query.split()))
        if not self.pruned_query:
            raise CorpusError(f"sample {self.sample_id!r} has an empty query")

    @property
    def query(self) -> str:
        return self.pruned_query

    def to_json(self) -> dict:
        return {
            "kind": "sample",
            "sample_id": self.sample_id,
            "raw_query": self.raw_query,
            "pruned_query": self.pruned_query,
            "table_id": self.table_id,
            "answer": self.answer,
            "task_tag": self.task_tag,
            "split": self.split,
        }


# The two generic-query families ("count the number of rows/columns",
# "describe ... cells") plus close variants. Extend via a rule file.
DEFAULT_REMOVAL_PATTERNS = (
    r"(?i)\bcount\s+the\s+(?:total\s+)?number\s+of\s+(?:rows|columns)\b",
    r"(?i)\b(?:how\s+many|what\s+is\s+the\s+number\s+of)\s+(?:rows|columns)\s+(?:are\s+)?(?:there\s+)?in\s+the\s+table\b",
    r"(?i)\bdescri(?:be|ption\s+of|ptive\s+sentence\s+about)\b[^.?!]*?\bcells?\b",
    r"(?i)\bhighlighted\s+cells?\b",
)

DEFAULT_PRUNE_PATTERNS = (
    r"(?i)\s*show\s+your\s+answer\s+in\s+the\s+json\s+format\b[^{.]*(?:\{[^{}]*\})?\s*\.?",
    r"(?i)\s*(?:please\s+)?(?:output|return|give)\s+(?:the|your)\s+(?:final\s+)?answer\s+in\s+(?:the\s+)?json\s+format\b[^{.]*(?:\{[^{}]*\})?\s*\.?",
)


@dataclass(frozen=True)
class FilterRuleSet:
    removal_patterns: tuple[str, ...] = DEFAULT_REMOVAL_PATTERNS
    prune_patterns: tuple[str, ...] = DEFAULT_PRUNE_PATTERNS

    def __post_init__(self):
        object.__setattr__(self, "removal_patterns", tuple(self.removal_patterns))
        object.__setattr__(self, "prune_patterns", tuple(self.prune_patterns))
        compiled = []
        for pat in self.removal_patterns + self.prune_patterns:
            try:
                compiled.append(re.compile(pat))
            except re.error as exc:
                raise CorpusError(f"pattern {pat!r} does not compile: {exc}") from exc
        n = len(self.removal_patterns)
        object.__setattr__(self, "_removal", tuple(compiled[:n]))
        object.__setattr__(self, "_prune", tuple(compiled[n:]))

    @classmethod
    def from_file(cls, path: str | Path) -> "FilterRuleSet":
        """Read ``{"removal_patterns": [...], "prune_patterns": [...]}``.

        Missing keys fall back to the defaults; ``"extend": true`` appends
        the given patterns to the defaults instead of replacing them.
        """
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"rule file not found: {path}")
        data = json.loads(path.read_text(encoding="utf-8"))
        removal = tuple(data.get("removal_patterns", ()))
        prune = tuple(data.get("prune_patterns", ()))
        if data.get("extend", False):
            return cls(DEFAULT_REMOVAL_PATTERNS + removal, DEFAULT_PRUNE_PATTERNS + prune)
        return cls(removal or DEFAULT_REMOVAL_PATTERNS, prune or DEFAULT_PRUNE_PATTERNS)

    def is_generic(self, query: str) -> bool:
        return any(p.search(query) for p in self._removal)


def filter_generic_queries(samples: Sequence[QuerySample], rules: FilterRuleSet):
    if not rules.removal_patterns:
        raise CorpusError("rule set has no removal patterns")
    kept, removed = [], []
    for s in samples:
        (removed if rules.is_generic(s.raw_query) else kept).append(s)
    return kept, removed


def prune_query(raw_query: str, rules: FilterRuleSet) -> str:
    if not raw_query or not raw_query.strip():
        raise PruneError("query is empty")
    text = raw_query
    # iterate to a fixed point so deletions that splice a new match are also caught
    while True:
        new = text
        for pat in rules._prune:
            new = pat.sub(" ", new)
        new = " ".join(new.split())
        if new == text:
            break
        text = new
    if not text:
        raise PruneError(f"pruning emptied the query {raw_query!r}; a prune pattern is too broad")
    return text


def prune_samples(samples: Iterable[QuerySample], rules: FilterRuleSet) -> list[QuerySample]:
    out = []
    for s in samples:
        try:
            pruned = prune_query(s.raw_query, rules)
        except PruneError as exc:
            raise PruneError(f"sample {s.sample_id!r}: {exc}") from exc
        out.append(replace(s, pruned_query=pruned))
    return out


def split_partition(samples: Sequence, fractions: Sequence[float], seed: int) -> list[list]:
    """Shuffle deterministically and cut into ``len(fractions)`` disjoint parts.

    Sizes are ``floor(f * n)``; the leftover goes to the largest fraction
    (first one on ties).
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(f <= 0 for f in fractions):
        raise ValueError("fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions sum to {sum(fractions)}, expected 1")
    n = len(samples)
    if n < len(fractions):
        raise ValueError(f"{n} samples cannot fill {len(fractions)} partitions")
    sizes = [math.floor(f * n + 1e-9) for f in fractions]
    remainder = n - sum(sizes)
    if remainder < 0:
        raise ValueError("fraction rounding overshoots the sample count")
    sizes[int(np.argmax(fractions))] += remainder
    order = np.random.default_rng(seed).permutation(n)
    parts, start = [], 0
    for size in sizes:
        parts.append([samples[i] for i in order[start:start + size]])
        start += size
    return parts


def load_corpus(path: str | Path) -> tuple[list[TableRecord], list[QuerySample]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    tables: list[TableRecord] = []
    samples: list[QuerySample] = []
    seen_tables: set[str] = set()
    seen_samples: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                kind = obj["kind"]
                if kind == "table":
                    rec = TableRecord(
                        table_id=obj["table_id"],
                        source_dataset=obj.get("source_dataset", ""),
                        surrogate_text=obj.get("surrogate_text"),
                        image_ref=obj.get("image_ref"),
                        metadata={str(k): str(v) for k, v in (obj.get("metadata") or {}).items()},
                    )
                    if rec.table_id in seen_tables:
                        raise CorpusError(f"duplicate table_id {rec.table_id!r}")
                    seen_tables.add(rec.table_id)
                    tables.append(rec)
                elif kind == "sample":
                    s = QuerySample(
                        sample_id=obj["sample_id"],
                        raw_query=obj["raw_query"],
                        table_id=obj["table_id"],
                        answer=obj["answer"],
                        task_tag=obj.get("task_tag", "QA"),
                        split=obj.get("split", "train"),
                        pruned_query=obj.get("pruned_query", ""),
                    )
                    if s.sample_id in seen_samples:
                        raise CorpusError(f"duplicate sample_id {s.sample_id!r}")
                    seen_samples.add(s.sample_id)
                    samples.append(s)
                else:
                    raise CorpusError(f"unknown kind {kind!r}")
            except (json.JSONDecodeError, KeyError, TypeError, CorpusError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed record: {exc}") from exc
    for s in samples:
        if s.table_id not in seen_tables:
            raise CorpusError(f"sample {s.sample_id!r} references unknown table {s.table_id!r}")
    return tables, samples


def corpus_lines(tables: Iterable[TableRecord], samples: Iterable[QuerySample]) -> list[str]:
    lines = [json.dumps(t.to_json(), sort_keys=True, ensure_ascii=False) for t in tables]
    lines += [json.dumps(s.to_json(), sort_keys=True, ensure_ascii=False) for s in samples]
    return lines


def write_corpus(path: str | Path, tables, samples, extra: dict | None = None) -> dict:
    """Write the corpus plus a ``<name>.manifest.json`` sidecar; return the manifest."""
    path = Path(path)
    tables, samples = list(tables), list(samples)
    payload = ("\n".join(corpus_lines(tables, samples)) + "\n").encode("utf-8")
    path.write_bytes(payload)
    manifest = {
        "tables": len(tables),
        "samples": len(samples),
        "samples_by_split": {sp: sum(s.split == sp for s in samples) for sp in SPLITS},
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    if extra:
        manifest.update(extra)
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def corpus_hash(tables: Iterable[TableRecord]) -> str:
    h = hashlib.sha256()
    for t in tables:
        h.update(json.dumps(t.to_json(), sort_keys=True).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()
