"""End-to-end exit criteria, one test per criterion, each at its stated tolerance."""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from tablesearch.cli import main
from tablesearch.corpus import FilterRuleSet, filter_generic_queries, prune_query, QuerySample
from tablesearch.cost import FlopsModel, estimate_flops, render_ledger
from tablesearch.embed import (TrainConfig, contrastive_loss, encode_doc, encode_query, featurize_many,
                               init_params, train_retriever)
from tablesearch.evaluation import RankingRun, bleu, mrr_at_k, recall_at_k
from tablesearch.generate import EchoGenerator, Pipeline, PipelineSettings
from tablesearch.index import build
from tablesearch.rerank import PlantedScorer, PlantedScorerConfig, build_context_ranking_set, build_rar_set
from tablesearch.synthetic import planted_corpus

from conftest import unit_rows
from test_cost import declared_rows
from test_embed import numeric_grad, rel_err
from test_evaluation import CLIPPING_ORACLE
from test_index import full_scan, with_ties
from test_rerank import fake_runs, make_samples

pytestmark = pytest.mark.acceptance
DATA = Path(__file__).parent / "data"


def test_1_index_matches_full_scan(verdict):
    rng = np.random.default_rng(2024)
    ids, x = with_ties(rng, 1000, 64)
    idx = build(list(zip(ids, x)))
    queries = unit_rows(rng, 100, 64)
    t0 = time.perf_counter()
    got = [[r.table_id for r in idx.search(q, 50)] for q in queries]
    elapsed = time.perf_counter() - t0
    matches = sum(g == full_scan(ids, x, q, 50) for g, q in zip(got, queries))
    ok = matches == 100 and elapsed < 5
    assert verdict(1, ok, f"index oracle {matches}/100 queries identical, search {elapsed:.3f}s (< 5s)")


def ranking_run(params, index, tables, samples, n):
    q = encode_query(params, featurize_many([s.query for s in samples], params.d_f))
    return RankingRun.from_lists({s.sample_id: [h.table_id for h in index.search(v, n)] for s, v in zip(samples, q)},
                                 {s.sample_id: s.table_id for s in samples})


def doc_index(params, tables):
    emb = encode_doc(params, featurize_many([t.surrogate_text for t in tables], params.d_f))
    return build([(t.table_id, e) for t, e in zip(tables, emb)], encoder_version=params.version)


def test_2_contrastive_training_efficacy(verdict):
    tables, samples = planted_corpus(500, keep_prob=0.5, seed=0)
    by_id = {t.table_id: t for t in tables}
    cfg = TrainConfig(seed=0)
    init = init_params(cfg.feature_dim, cfg.embed_dim, cfg.seed)
    before = ranking_run(init, doc_index(init, tables), tables, samples, 10)
    t0 = time.perf_counter()
    res = train_retriever(cfg, [s.query for s in samples], [by_id[s.table_id].surrogate_text for s in samples], init)
    elapsed = time.perf_counter() - t0
    after = ranking_run(res.params, doc_index(res.params, tables), tables, samples, 10)
    r0, r1, m1 = recall_at_k(before, 1), recall_at_k(after, 1), mrr_at_k(after, 10)
    ok = r1 >= 0.90 and m1 >= 0.93 and r0 <= 0.05 and elapsed < 60
    assert verdict(2, ok, f"recall@1 {r0:.3f} -> {r1:.3f} (>= 0.90), MRR@10 {m1:.3f} (>= 0.93), "
                          f"training {elapsed:.1f}s (< 60s)")


def test_3_gradients_match_finite_differences(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        q, d = unit_rows(rng, 8, 16), unit_rows(rng, 8, 16)
        _, gq, gd = contrastive_loss(q, d)
        worst = max(worst, rel_err(gq, numeric_grad(lambda: contrastive_loss(q, d)[0], q)),
                    rel_err(gd, numeric_grad(lambda: contrastive_loss(q, d)[0], d)))
    assert verdict(3, worst < 1e-4, f"worst relative gradient error over 20 batches of 8: {worst:.2e} (< 1e-4)")


def planted_pipeline(seed, eps, scorer_seed=0):
    tables, samples = planted_corpus(300, keep_prob=0.25, noise_tokens=4, seed=seed)
    params = init_params(seed=5, tied=True)
    pipe = Pipeline(tables={t.table_id: t for t in tables}, params=params, index=doc_index(params, tables),
                    scorer=PlantedScorer(PlantedScorerConfig({s.sample_id: s.table_id for s in samples},
                                                             eps, scorer_seed)),
                    generator=EchoGenerator.from_samples(samples))
    return pipe, samples


def stage_runs(pipe, samples, settings):
    truth = {s.sample_id: s.table_id for s in samples}
    retrieval, reranked = {}, {}
    for s in samples:
        _, trace = pipe.answer(s, settings)
        retrieval[s.sample_id] = [h["table_id"] for h in trace["retrieval"]]
        reranked[s.sample_id] = [c["table_id"] for c in trace["rerank"]]
    return RankingRun.from_lists(retrieval, truth), RankingRun.from_lists(reranked, truth, "rerank")


def test_4_rerank_lift(verdict):
    settings = PipelineSettings(10, 10, 1)
    pipe, samples = planted_pipeline(11, 0.0)
    before, after = stage_runs(pipe, samples, settings)
    exact = recall_at_k(after, 1) == recall_at_k(before, 10)
    wins = {}
    for eps in (0.1, 0.3):
        wins[eps] = 0
        for rep in range(20):
            pipe, samples = planted_pipeline(100 + rep, eps, scorer_seed=rep)
            before_r, after_r = stage_runs(pipe, samples, settings)
            wins[eps] += mrr_at_k(after_r, 1) >= mrr_at_k(before_r, 1)
    ok = exact and all(w >= 19 for w in wins.values())
    assert verdict(4, ok, f"eps=0 rerank recall@1 {recall_at_k(after, 1):.3f} == retrieval recall@10 "
                          f"{recall_at_k(before, 10):.3f}; MRR@1 not worse in {wins[0.1]}/20 (eps 0.1), "
                          f"{wins[0.3]}/20 (eps 0.3), need >= 19")


def test_5_metric_golden(verdict):
    run = RankingRun.from_lists({"q1": ["g1", "x", "y"], "q2": ["x", "g2", "y"], "q3": ["x", "y", "z"]},
                                {"q1": "g1", "q2": "g2", "q3": "g3"})
    checks = [
        mrr_at_k(run, 5) == 0.5,
        recall_at_k(run, 2) == 2 / 3,
        mrr_at_k(RankingRun.from_lists({"q": ["a", "b", "g"]}, {"q": "g"}), 10) == 1 / 3,
        mrr_at_k(RankingRun.from_lists({"q": ["a", "b", "g"]}, {"q": "g"}), 1) == 0.0,
        bleu("the cat sat on the mat", ["the cat sat on the mat"]) == 1.0,
        bleu("alpha beta gamma delta", ["one two three four"]) == 0.0,
        abs(bleu("the the the the", ["the cat"]) - CLIPPING_ORACLE) < 1e-9,
    ]
    assert verdict(5, all(checks), f"{sum(checks)}/{len(checks)} golden metric values exact")


def test_6_dataset_builders(verdict):
    samples = make_samples(100)
    recs = build_context_ranking_set(samples, fake_runs(samples))
    pos, neg = sum(r.label == "True" for r in recs), sum(r.label == "False" for r in recs)
    many = make_samples(1000)
    rar = build_rar_set(many, fake_runs(many, seed=5), context_width=3, seed=8)
    violations = sum(len(r.label) != 1 or r.context_ids[r.label[0] - 1] != s.table_id for r, s in zip(rar, many))
    ok = (pos, neg, violations) == (100, 2000, 0)
    assert verdict(6, ok, f"context ranking {pos} positive + {neg} negative (want 100 + 2000); "
                          f"RAR label violations {violations}/1000")


def test_7_cost_ledger(verdict):
    rows = json.loads((DATA / "table4_rows.json").read_text())
    ledger = render_ledger(declared_rows(rows))
    retrieval, reranking, _ = ledger.stages
    ok = (retrieval.latency_us == 57_000 and reranking.flops == 4.3e13 == estimate_flops(FlopsModel(4.3e12, 10))
          and ledger.total_latency_us == 1_387_000)
    assert verdict(7, ok, f"retrieval subtotal {retrieval.latency_ms:g} ms, reranking FLOPs {reranking.flops:.3g}, "
                          f"total {ledger.total_latency_ms:,.0f} ms")


def test_8_end_to_end_determinism(verdict, tmp_path, capsys):
    c, p, i = tmp_path / "c.jsonl", tmp_path / "p.bin", tmp_path / "i.bin"
    assert main(["synth", "--out", str(c), "--n-docs", "200", "--seed", "6", "--json-suffix"]) == 0
    assert main(["train", "--corpus", str(c), "--params", str(p), "--epochs", "2", "--seed", "6"]) == 0
    assert main(["index", "--corpus", str(c), "--params", str(p), "--index", str(i)]) == 0
    flags = ["--corpus", str(c), "--params", str(p), "--index", str(i), "--scorer", "planted", "--gen", "echo",
             "--seed", "6"]
    query = json.loads(next(l for l in c.read_text().splitlines() if '"sample"' in l))["raw_query"]
    assert main(["answer", query, *flags, "--trace", str(tmp_path / "a.json")]) == 0
    assert main(["answer", query, *flags, "--trace", str(tmp_path / "b.json")]) == 0
    capsys.readouterr()
    identical = (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    t0 = time.perf_counter()
    assert main(["bench", *flags, "--queries", "50"]) == 0
    elapsed = time.perf_counter() - t0
    bench = json.loads(capsys.readouterr().out)
    ok = identical and bench["queries"] == 50 and elapsed < 10
    assert verdict(8, ok, f"traces byte-identical: {identical}; 50-query batch {elapsed:.2f}s (< 10s)")


def test_9_filtering_fidelity(verdict):
    cases = [json.loads(l) for l in (DATA / "filter_golden.jsonl").read_text().splitlines() if l.strip()]
    rules = FilterRuleSet()
    samples = [QuerySample(f"g{i}", c["raw_query"], "t", "a") for i, c in enumerate(cases)]
    kept, removed = filter_generic_queries(samples, rules)
    kept_ids = {s.sample_id for s in kept}
    mismatches = 0
    for s, c in zip(samples, cases):
        mismatches += (s.sample_id not in kept_ids) != c["removed"]
        if not c["removed"]:
            mismatches += prune_query(c["raw_query"], rules) != c["pruned"]
    kept2, _ = filter_generic_queries(kept, rules)
    idempotent = kept2 == kept and all(prune_query(c["pruned"], rules) == c["pruned"]
                                       for c in cases if not c["removed"])
    families = {"rows/columns": any("count the number" in c["raw_query"].lower() and c["removed"] for c in cases),
                "cells": any("cells" in c["raw_query"].lower() and c["removed"] for c in cases),
                "json suffix": any("json format" in c["raw_query"].lower() and not c["removed"] for c in cases)}
    ok = mismatches == 0 and idempotent and all(families.values()) and len(cases) == 30
    assert verdict(9, ok, f"{len(cases)} golden cases, {mismatches} mismatches, idempotent: {idempotent}, "
                          f"{len(removed)} removed")
