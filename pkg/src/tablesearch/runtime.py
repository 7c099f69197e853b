"""Load on-disk artifacts into a ready-to-query pipeline."""

from __future__ import annotations

import logging
import warnings
from pathlib import Path

from . import cost
from .config import ConfigError, PipelineConfig
from .corpus import FilterRuleSet, load_corpus
from .embed import encode_query, featurize, load_params
from .generate import EchoGenerator, Pipeline, PipelineError, PipelineSettings, RemoteGenerator
from .index import IndexVersionWarning, SearchResult, load as load_index
from .rerank import (EmbeddingProxyScorer, PlantedScorer, PlantedScorerConfig, RemoteScorer, RerankError,
                     ScorerError, rerank)

log = logging.getLogger(__name__)


class MissingArtifact(FileNotFoundError):
    pass


def require(path: str | None, what: str) -> Path:
    if not path:
        raise MissingArtifact(f"no {what} configured (--{what})")
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{what} artifact not found: {p}")
    return p


def load_rules(cfg: PipelineConfig) -> FilterRuleSet:
    if cfg.rules:
        return FilterRuleSet.from_file(cfg.rules)
    return FilterRuleSet()


def build_pipeline(cfg: PipelineConfig) -> Pipeline:
    tables, samples = load_corpus(require(cfg.corpus, "corpus"))
    params = load_params(require(cfg.params, "params"))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", IndexVersionWarning)
        index = load_index(require(cfg.index, "index"), expected_encoder_version=params.version)
    for w in caught:
        log.warning("%s", w.message)
    table_map = {t.table_id: t for t in tables}
    if cfg.scorer == "planted":
        scorer = PlantedScorer(PlantedScorerConfig({s.sample_id: s.table_id for s in samples},
                                                   cfg.epsilon, cfg.seed))
    elif cfg.scorer == "proxy":
        scorer = EmbeddingProxyScorer(params, table_map)
    elif cfg.scorer == "remote":
        scorer = RemoteScorer(cfg.scorer_endpoint, table_map)
    else:
        raise ConfigError(f"unknown scorer {cfg.scorer!r}")
    if cfg.gen == "echo":
        generator = EchoGenerator.from_samples(samples)
    else:
        generator = RemoteGenerator(cfg.gen_endpoint, table_map)
    by_query = {}
    for s in samples:
        by_query.setdefault(s.raw_query, s)
        by_query.setdefault(s.query, s)
    return Pipeline(
        tables=table_map, params=params, index=index, scorer=scorer, generator=generator,
        rules=load_rules(cfg), samples_by_query=by_query,
        scorer_flops=cost.FlopsModel(cfg.scorer_pass_flops) if cfg.scorer_pass_flops else None,
        generator_flops=cost.FlopsModel(cfg.gen_pass_flops) if cfg.gen_pass_flops else None,
    )


def settings_from(cfg: PipelineConfig, **overrides) -> PipelineSettings:
    values = {"n_retrieve": cfg.n_retrieve, "n_rerank": cfg.n_rerank, "k_keep": cfg.k_keep}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineSettings(**values)


def retrieve_payload(pipeline: Pipeline, query: str, n: int) -> dict:
    sample = pipeline.resolve(query)
    q = encode_query(pipeline.params, featurize(sample.query, pipeline.params.d_f))
    return {"query": query, "pruned_query": sample.query,
            "results": [h.to_json() for h in pipeline.index.search(q, n)]}


def rerank_payload(pipeline: Pipeline, query: str, settings: PipelineSettings) -> dict:
    hits = retrieve_payload(pipeline, query, settings.n_retrieve)["results"]
    pool = [SearchResult(**h) for h in hits[: settings.n_rerank]]
    sample = pipeline.resolve(query)
    # the whole pool is reordered here; the answer path keeps only k_keep
    try:
        scored = rerank(pipeline.scorer, sample, pool, len(pool))
    except (ScorerError, RerankError) as exc:
        raise PipelineError("reranking", exc) from exc
    return {"query": query, "pruned_query": sample.query,
            "retrieval": [p.to_json() for p in pool], "rerank": [s.to_json() for s in scored]}
