"""Command line entry point: ``tablesearch <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import cost, evaluation
from .config import ConfigError, PipelineConfig, resolve_config
from .corpus import (CorpusError, PruneError, corpus_hash, filter_generic_queries, load_corpus,
                     prune_samples, split_partition, write_corpus)
from .embed import (TrainConfig, encode_doc, featurize_many, init_params, load_params, save_params,
                    train_retriever, write_loss_curve)
from .generate import PipelineError, strip_timings
from .index import Backend, build, save as save_index
from .runtime import MissingArtifact, build_pipeline, load_rules, require, rerank_payload, retrieve_payload, settings_from
from .synthetic import planted_corpus

log = logging.getLogger("tablesearch")

JSON_SUFFIX = " Show your answer in the JSON format {answer: [a list of answer strings]}"

PIPELINE_FLAGS = {
    "--corpus": dict(type=str), "--params": dict(type=str), "--index": dict(type=str),
    "--rules": dict(type=str), "--n-retrieve": dict(type=int), "--n-rerank": dict(type=int),
    "--k-keep": dict(type=int), "--scorer": dict(choices=["planted", "proxy", "remote"]),
    "--scorer-endpoint": dict(type=str), "--epsilon": dict(type=float),
    "--gen": dict(choices=["echo", "remote"]), "--gen-endpoint": dict(type=str),
    "--seed": dict(type=int), "--k-grid": dict(type=str), "--backend": dict(choices=["exact", "partitioned"]),
}


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_synth(cfg: PipelineConfig, args) -> dict:
    tables, samples = planted_corpus(args.n_docs, keep_prob=args.keep_prob, noise_tokens=args.noise_tokens,
                                     seed=cfg.seed)
    n_test = int(round(len(samples) * args.test_fraction))
    order = np.random.default_rng(cfg.seed).permutation(len(samples))
    test_ids = {samples[i].sample_id for i in order[:n_test]}
    samples = [replace(s, split="test") if s.sample_id in test_ids else s for s in samples]
    if args.json_suffix:
        samples = [replace(s, raw_query=s.raw_query + JSON_SUFFIX, pruned_query="") for s in samples]
    return write_corpus(require_out(args.out), tables, samples)


def require_out(path) -> Path:
    if not path:
        raise ConfigError("--out is required")
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def cmd_ingest(cfg: PipelineConfig, args) -> dict:
    tables, samples = load_corpus(require(cfg.corpus, "corpus"))
    rules = load_rules(cfg)
    kept, removed = [], []
    # filter each split on its own so no sample moves between splits
    for split in ("train", "test"):
        k, r = filter_generic_queries([s for s in samples if s.split == split], rules)
        kept += k
        removed += r
    kept = prune_samples(kept, rules)
    fractions = [float(x) for x in args.fractions.split(",")]
    train = [s for s in kept if s.split == "train"]
    partitions = {}
    if len(train) >= len(fractions):
        parts = split_partition(train, fractions, cfg.seed)
        partitions = {f"part{i}": sorted(s.sample_id for s in p) for i, p in enumerate(parts)}
    out = require_out(args.out)
    manifest = write_corpus(out, tables, kept, extra={
        "removed": len(removed), "kept": len(kept), "fractions": fractions,
        "partition_sizes": {k: len(v) for k, v in partitions.items()},
    })
    out.with_name(out.name + ".partitions.json").write_text(json.dumps(partitions, indent=1, sort_keys=True) + "\n")
    print(f"kept {len(kept)} samples, removed {len(removed)}", file=sys.stderr)
    return manifest


def cmd_train(cfg: PipelineConfig, args) -> dict:
    tables, samples = load_corpus(require(cfg.corpus, "corpus"))
    table_map = {t.table_id: t for t in tables}
    pairs = [(s.query, table_map[s.table_id].surrogate_text) for s in samples if s.split == "train"]
    if any(d is None for _, d in pairs):
        raise CorpusError("training needs surrogate_text on every referenced table")
    tc = TrainConfig(learning_rate=args.lr, warmup_steps=args.warmup_steps, batch_size=args.batch_size,
                     temperature=args.temperature, epochs=args.epochs, seed=cfg.seed,
                     loss_variant=args.loss_variant, embed_dim=args.embed_dim, feature_dim=args.feature_dim)
    out = require_out(cfg.params or args.out)
    init = init_params(tc.feature_dim, tc.embed_dim, tc.seed, tied=args.tied_init)
    if tc.epochs == 0:
        params, curve = init, []
    else:
        result = train_retriever(tc, [q for q, _ in pairs], [d for _, d in pairs], init)
        params, curve = result.params, result.loss_curve
    save_params(params, out)
    curve_path = Path(args.loss_curve) if args.loss_curve else out.with_name(out.name + ".loss.tsv")
    write_loss_curve(curve, curve_path)
    return {"params": str(out), "version": params.version, "steps": len(curve),
            "first_loss": curve[0] if curve else None, "last_loss": curve[-1] if curve else None,
            "loss_curve": str(curve_path)}


def cmd_index(cfg: PipelineConfig, args) -> dict:
    tables, _ = load_corpus(require(cfg.corpus, "corpus"))
    params = load_params(require(cfg.params, "params"))
    texts = [t.surrogate_text for t in tables]
    if any(t is None for t in texts):
        raise CorpusError("indexing needs surrogate_text on every table")
    emb = encode_doc(params, featurize_many(texts, params.d_f))
    backend = Backend() if cfg.backend == "exact" else Backend.partitioned(seed=cfg.seed)
    idx = build([(t.table_id, e) for t, e in zip(tables, emb)], backend, params.version, corpus_hash(tables))
    out = require_out(cfg.index or args.out)
    save_index(idx, out)
    return {"index": str(out), "size": len(idx), "backend": idx.backend.kind,
            "num_lists": idx.num_lists, "encoder_version": idx.encoder_version}


def cmd_retrieve(cfg, args) -> dict:
    return retrieve_payload(build_pipeline(cfg), args.query, args.n or cfg.n_retrieve)


def cmd_rerank(cfg, args) -> dict:
    return rerank_payload(build_pipeline(cfg), args.query, settings_from(cfg))


def cmd_answer(cfg, args) -> dict:
    pipeline = build_pipeline(cfg)
    ans, trace = pipeline.answer(args.query, settings_from(cfg))
    ledger = cost.render_ledger(pipeline.ledger_records(trace))
    if args.trace:
        Path(args.trace).write_text(json.dumps(strip_timings(trace), indent=1, sort_keys=True) + "\n")
    print(ledger.to_text(), file=sys.stderr)
    return {"answer": ans.to_json(), "trace": strip_timings(trace)}


def _pipeline_runs(pipeline, samples, settings):
    retrieval, reranked, records, ledgers = {}, {}, [], []
    for s in samples:
        ans, trace = pipeline.answer(s, settings)
        retrieval[s.sample_id] = [h["table_id"] for h in trace["retrieval"]]
        ranked = [c["table_id"] for c in trace["rerank"]]
        reranked[s.sample_id] = ranked
        records.append(evaluation.GenEvalRecord(s.sample_id, ans, s.answer, s.task_tag))
        ledgers.append(pipeline.ledger_records(trace))
    return retrieval, reranked, records, ledgers


def cmd_eval(cfg, args) -> dict:
    curves = []
    report: dict = {}
    if args.run:
        for path in args.run:
            run = evaluation.RankingRun.read(path)
            curves += evaluation.metric_curves(run, cfg.k_grid)
    else:
        pipeline = build_pipeline(cfg)
        _, samples = load_corpus(cfg.corpus)
        samples = [s for s in samples if s.split == args.split][: args.limit or None]
        if not samples:
            raise CorpusError(f"no {args.split} samples to evaluate")
        retrieval, reranked, records, _ = _pipeline_runs(pipeline, samples, settings_from(cfg))
        truth = {s.sample_id: s.table_id for s in samples}
        r_run = evaluation.RankingRun.from_lists(retrieval, truth, "retrieval")
        rr_run = evaluation.RankingRun.from_lists(reranked, truth, "rerank")
        curves += evaluation.metric_curves(r_run, cfg.k_grid)
        curves += evaluation.metric_curves(rr_run, evaluation.RERANK_K_GRID[: cfg.n_rerank])
        report["generation"] = evaluation.generation_report(records)
        if args.out_dir:
            out = Path(args.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / "retrieval.run.jsonl").write_text(r_run.to_jsonl())
            (out / "rerank.run.jsonl").write_text(rr_run.to_jsonl())
    text = evaluation.format_curves(curves)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "curves.tsv").write_text(text)
    report["curves"] = [{"metric": c.metric, "stage_tag": c.stage_tag, "points": [list(p) for p in c.points]}
                        for c in curves]
    return report


def cmd_bench(cfg, args) -> dict:
    pipeline = build_pipeline(cfg)
    _, samples = load_corpus(cfg.corpus)
    samples = samples[: args.queries]
    t0 = time.perf_counter()
    _, _, records, ledgers = _pipeline_runs(pipeline, samples, settings_from(cfg))
    wall = time.perf_counter() - t0
    ledger = cost.render_ledger(cost.mean_records(ledgers))
    print(ledger.to_text(), file=sys.stderr)
    return {"queries": len(samples), "wall_seconds": round(wall, 4),
            "exact_match": evaluation.exact_match_accuracy(records),
            "mean_latency_ms": ledger.total_latency_ms}


def cmd_serve(cfg, args) -> None:
    import uvicorn

    from .service import create_app

    app = create_app(build_pipeline(cfg), settings_from(cfg))
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "train": cmd_train, "index": cmd_index,
    "retrieve": cmd_retrieve, "rerank": cmd_rerank, "answer": cmd_answer, "eval": cmd_eval,
    "bench": cmd_bench, "serve": cmd_serve,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML file with pipeline settings")
    common.add_argument("-v", "--verbose", action="store_true")
    for flag, kw in PIPELINE_FLAGS.items():
        common.add_argument(flag, default=None, **kw)

    parser = argparse.ArgumentParser(prog="tablesearch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a planted synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-docs", type=int, default=500)
    p.add_argument("--keep-prob", type=float, default=0.5)
    p.add_argument("--noise-tokens", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--json-suffix", action="store_true", help="append an answer-format instruction to queries")

    p = sub.add_parser("ingest", parents=[common], help="filter, prune and partition a corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--fractions", default="0.2,0.5,0.3")

    p = sub.add_parser("train", parents=[common], help="train the bi-encoder")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup-steps", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--temperature", type=float, default=0.05)
    p.add_argument("--loss-variant", default="symmetric_infonce", choices=["symmetric_infonce", "literal_paper"])
    p.add_argument("--embed-dim", type=int, default=128)
    p.add_argument("--feature-dim", type=int, default=2048)
    p.add_argument("--loss-curve")
    p.add_argument("--tied-init", action="store_true",
                   help="start both towers from one projection; unseen words then stay aligned")

    p = sub.add_parser("index", parents=[common], help="embed tables and build the vector index")
    p.add_argument("--out")

    for name, help_ in (("retrieve", "top-n tables for a query"), ("rerank", "retrieve then rerank"),
                        ("answer", "full retrieve-rerank-generate run")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("query")
        if name == "retrieve":
            p.add_argument("-n", type=int)
        if name == "answer":
            p.add_argument("--trace", help="write the deterministic trace here")

    p = sub.add_parser("eval", parents=[common], help="ranking curves and generation metrics")
    p.add_argument("--run", action="append", help="ranking run file (repeatable)")
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int)
    p.add_argument("--out-dir")

    p = sub.add_parser("bench", parents=[common], help="time a batch of queries and print the cost ledger")
    p.add_argument("--queries", type=int, default=50)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    flags = {k.lstrip("-").replace("-", "_"): getattr(args, k.lstrip("-").replace("-", "_"))
             for k in PIPELINE_FLAGS}
    try:
        cfg = resolve_config(flags, args.config)
        log.info("effective config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
        result = COMMANDS[args.command](cfg, args)
    except (ConfigError, CorpusError, PruneError, MissingArtifact, FileNotFoundError, PipelineError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if result is not None:
        _emit(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
