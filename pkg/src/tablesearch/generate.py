"""Generation backends and the retrieve -> rerank -> generate pipeline."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Mapping, Protocol

import httpx

from . import cost
from .corpus import FilterRuleSet, QuerySample, TableRecord, prune_query
from .embed import EncoderParams, encode_query, featurize
from .index import VectorIndex
from .prompts import QA, AssembledPrompt, assemble_prompt, parse_answer
from .rerank import Scorer, rerank


class GenerationError(RuntimeError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception | str):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage


class Generator(Protocol):
    tag: str

    def generate(self, prompt: AssembledPrompt) -> str: ...


class EchoGenerator:
    """Offline test backend.

    Returns the known answer for the question when that question's ground-truth
    table is among the prompt contexts, otherwise an empty answer list.
    """

    tag = "echo"

    def __init__(self, answers: Mapping[str, tuple[str, str]]):
        # question text -> (ground-truth table id, answer)
        self.answers = answers

    @classmethod
    def from_samples(cls, samples) -> "EchoGenerator":
        return cls({s.query: (s.table_id, s.answer) for s in samples})

    def generate(self, prompt: AssembledPrompt) -> str:
        hit = self.answers.get(prompt.question)
        if hit and hit[0] in prompt.context_ids:
            return json.dumps({"answer": [hit[1]]})
        return json.dumps({"answer": []})


class RemoteGenerator:
    tag = "remote"

    def __init__(self, endpoint: str, tables: Mapping[str, TableRecord], max_output_tokens: int = 256,
                 timeout: float = 60.0, retries: int = 1, client: httpx.Client | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.tables = tables
        self.max_output_tokens = max_output_tokens
        self.retries = retries
        self.client = client or httpx.Client(timeout=timeout)

    def generate(self, prompt: AssembledPrompt) -> str:
        payload = {"prompt_segments": prompt.to_wire(self.tables),
                   "answer_schema": prompt.answer_schema,
                   "max_output_tokens": self.max_output_tokens}
        last = None
        for _ in range(self.retries + 1):
            try:
                resp = self.client.post(self.endpoint + "/generate", json=payload)
                resp.raise_for_status()
                return str(resp.json()["text"])
            except (httpx.HTTPError, KeyError, ValueError, TypeError) as exc:
                last = exc
        raise GenerationError(f"generation backend failed: {last}")


@dataclass
class PipelineSettings:
    n_retrieve: int = 50
    n_rerank: int = 10
    k_keep: int = 1

    def __post_init__(self):
        if not 1 <= self.k_keep <= self.n_rerank <= self.n_retrieve:
            raise ValueError("need 1 <= k_keep <= n_rerank <= n_retrieve")


@dataclass
class Pipeline:
    """Bundles immutable snapshots; ``answer`` may run concurrently for distinct queries."""

    tables: Mapping[str, TableRecord]
    params: EncoderParams
    index: VectorIndex
    scorer: Scorer
    generator: Generator
    rules: FilterRuleSet = field(default_factory=FilterRuleSet)
    samples_by_query: Mapping[str, QuerySample] = field(default_factory=dict)
    scorer_flops: cost.FlopsModel | None = None
    generator_flops: cost.FlopsModel | None = None

    def resolve(self, query) -> QuerySample:
        if isinstance(query, QuerySample):
            return query
        known = self.samples_by_query.get(query)
        if known is not None:
            return known
        pruned = prune_query(query, self.rules)
        known = self.samples_by_query.get(pruned)
        if known is not None:
            return known
        return QuerySample("adhoc", query, "", "", pruned_query=pruned)

    def answer(self, query, settings: PipelineSettings = PipelineSettings()):
        """Run prune -> encode -> search -> rerank -> assemble -> generate -> parse.

        Returns ``(Answer, trace)``. Everything in the trace except ``timings``
        is a deterministic function of the inputs.
        """
        trace: dict = {"settings": {"n_retrieve": settings.n_retrieve, "n_rerank": settings.n_rerank,
                                    "k_keep": settings.k_keep},
                       "timings": {}}

        def run(stage, component, fn):
            start = time.perf_counter_ns()
            try:
                return fn()
            except PipelineError:
                raise
            except Exception as exc:
                raise PipelineError(stage, exc) from exc
            finally:
                trace["timings"][f"{stage}/{component}"] = (start, time.perf_counter_ns())

        sample = run("retrieval", "query pruning", lambda: self.resolve(query))
        trace["query"] = sample.raw_query
        trace["pruned_query"] = sample.query
        trace["sample_id"] = sample.sample_id
        q_emb = run("retrieval", "query encoding",
                    lambda: encode_query(self.params, featurize(sample.query, self.params.d_f)))
        hits = run("retrieval", "index search", lambda: self.index.search(q_emb, settings.n_retrieve))
        trace["retrieval"] = [h.to_json() for h in hits]
        if not hits:
            raise PipelineError("retrieval", "no candidates retrieved; refusing to generate without context")
        pool = hits[: settings.n_rerank]
        trace["n_scored"] = len(pool)
        # score and order the whole pool so the trace carries the full reranked list
        ranked = run("reranking", f"scoring (top-{len(pool)})",
                     lambda: rerank(self.scorer, sample, pool, len(pool)))
        trace["rerank"] = [c.to_json() for c in ranked]
        contexts = [c.table_id for c in ranked[: settings.k_keep]]

        def _generate():
            prompt = assemble_prompt(QA, sample.query, contexts, self.tables)
            return prompt, self.generator.generate(prompt)

        prompt, raw = run("generation", f"generation (top-{len(contexts)})", _generate)
        answer = parse_answer(raw, prompt.answer_schema)
        trace["generation"] = {"contexts": contexts, "prompt": prompt.render(), **answer.to_json()}
        return answer, trace

    def ledger_records(self, trace: dict) -> list[cost.StageRecord]:
        records = []
        for key in trace["timings"]:
            stage, component = key.split("/", 1)
            flops = None
            if component == "query encoding":
                flops = cost.encoder_flops(self.params.d * self.params.d_f + self.params.d)
            elif stage == "reranking" and self.scorer_flops is not None:
                flops = cost.estimate_flops(cost.FlopsModel(self.scorer_flops.per_pass_flops, trace["n_scored"]))
            elif stage == "generation" and self.generator_flops is not None:
                flops = cost.estimate_flops(self.generator_flops)
            records.append(cost.record_stage(trace, stage, component, flops=flops))
        return records


def strip_timings(trace: dict) -> dict:
    return {k: v for k, v in trace.items() if k != "timings"}
