"""Instruction templates for context ranking, ranking and answer generation."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

from .corpus import TableRecord

QA = "retrieval_augmented_qa"
CONTEXT_RANKING = "context_ranking"
RANKING = "retrieval_augmented_ranking"
PROMPT_KINDS = (QA, CONTEXT_RANKING, RANKING)

# answer schemas
PHRASE = "phrase"
TRUE_FALSE = "true_false"
PASSAGE_INDEXES = "passage_indexes"


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    kind: str
    instruction_text: str
    answer_schema: str
    single_passage: bool = False

    def __post_init__(self):
        if self.kind not in PROMPT_KINDS:
            raise PromptError(f"unknown prompt kind {self.kind!r}")
        if self.instruction_text.count("{question}") != 1:
            raise PromptError("instruction_text must contain {question} exactly once")


# "access" is kept as written in the original template; override via config if desired.
DEFAULT_TEMPLATES = {
    QA: PromptTemplate(QA, "Answer the following question from context. {question}", PHRASE),
    CONTEXT_RANKING: PromptTemplate(
        CONTEXT_RANKING,
        "For the question {question}, access whether the passage is relevant to the question.",
        TRUE_FALSE, single_passage=True),
    RANKING: PromptTemplate(
        RANKING,
        "For the question {question}, find all passages from the context that are relevant to the question.",
        PASSAGE_INDEXES),
}


@dataclass(frozen=True)
class Segment:
    text: str = ""
    table_id: str | None = None

    @property
    def is_image(self) -> bool:
        return self.table_id is not None


@dataclass(frozen=True)
class AssembledPrompt:
    kind: str
    question: str
    segments: tuple[Segment, ...]
    answer_schema: str

    @property
    def context_ids(self) -> list[str]:
        return [s.table_id for s in self.segments if s.is_image]

    def render(self) -> str:
        parts = [f"<image {s.table_id}>" if s.is_image else s.text for s in self.segments]
        return " ".join(parts)

    def to_wire(self, tables: Mapping[str, TableRecord]) -> list[dict]:
        """Segments as wire objects; an image slot carries image_ref when known, else surrogate_text."""
        out = []
        for s in self.segments:
            if not s.is_image:
                out.append({"type": "text", "text": s.text})
                continue
            t = tables[s.table_id]
            slot = {"type": "image", "table_id": s.table_id}
            if t.image_ref:
                slot["image_ref"] = t.image_ref
            else:
                slot["surrogate_text"] = t.surrogate_text
            out.append(slot)
        return out


def assemble_prompt(kind: str, question: str, contexts: Sequence[str],
                    tables: Mapping[str, TableRecord] | None = None,
                    templates: Mapping[str, PromptTemplate] = DEFAULT_TEMPLATES) -> AssembledPrompt:
    if kind not in templates:
        raise PromptError(f"unknown prompt kind {kind!r}")
    tpl = templates[kind]
    contexts = list(contexts)
    if not contexts:
        raise PromptError("at least one context is required")
    if tpl.single_passage and len(contexts) != 1:
        raise PromptError(f"{kind} takes exactly one passage, got {len(contexts)}")
    if tables is not None:
        missing = [c for c in contexts if c not in tables]
        if missing:
            raise PromptError(f"unresolvable table id {missing[0]!r}")
    segments = [Segment(tpl.instruction_text.replace("{question}", question))]
    if tpl.single_passage:
        segments += [Segment("Passage:"), Segment(table_id=contexts[0])]
    else:
        for i, tid in enumerate(contexts, start=1):
            segments += [Segment(f"Passage {i}:"), Segment(table_id=tid)]
    return AssembledPrompt(kind, question, tuple(segments), tpl.answer_schema)


@dataclass(frozen=True)
class Answer:
    raw: str
    parsed: tuple[str, ...]
    parse_status: str  # "structured" | "fallback_raw"

    def to_json(self) -> dict:
        return {"raw": self.raw, "parsed": list(self.parsed), "parse_status": self.parse_status}

    def serialize(self) -> str:
        return json.dumps({"answer": list(self.parsed)}, ensure_ascii=False)


_decoder = json.JSONDecoder()
_BOOL_RE = re.compile(r"^\W*(true|false)\W*$", re.IGNORECASE)


def _find_answer_object(raw: str):
    start = raw.find("{")
    while start != -1:
        try:
            obj, _ = _decoder.raw_decode(raw, start)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict) and "answer" in obj:
            value = obj["answer"]
            if isinstance(value, list):
                return [str(v) for v in value]
            if isinstance(value, (str, int, float, bool)):
                return [str(value)]
        start = raw.find("{", start + 1)
    return None


def _canonical_bool(token: str) -> str | None:
    m = _BOOL_RE.match(token)
    return m.group(1).capitalize() if m else None


def parse_answer(raw: str, schema: str = PHRASE) -> Answer:
    """Extract ``{"answer": [...]}`` from anywhere in ``raw``; never raises."""
    raw = raw if isinstance(raw, str) else str(raw)
    found = _find_answer_object(raw)
    trimmed = raw.strip()
    if schema == TRUE_FALSE:
        candidates = found if found else [trimmed]
        labels = [_canonical_bool(c) for c in candidates]
        if labels and all(labels):
            return Answer(raw, tuple(labels), "structured")
        return Answer(raw, (trimmed,), "fallback_raw")
    if schema == PASSAGE_INDEXES:
        if found is None:
            found = re.findall(r"\d+", trimmed) or None
        if found and all(re.fullmatch(r"\s*\d+\s*", x) for x in found):
            return Answer(raw, tuple(str(int(x)) for x in found), "structured")
        return Answer(raw, (trimmed,), "fallback_raw")
    if found is not None:
        return Answer(raw, tuple(found), "structured")
    return Answer(raw, (trimmed,), "fallback_raw")
