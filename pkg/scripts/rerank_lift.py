"""Retrieval vs rerank MRR/recall over k = 1..10 on the planted pipeline, for several noise levels.

The untrained tied encoder leaves retrieval imperfect, so the planted reranker
has ground truth to promote.

    python3 scripts/rerank_lift.py --eps 0 0.1 0.3 0.6
"""

import argparse

from tablesearch.embed import encode_doc, featurize_many, init_params
from tablesearch.evaluation import RERANK_K_GRID, RankingRun, format_curves, metric_curves
from tablesearch.generate import EchoGenerator, Pipeline, PipelineSettings
from tablesearch.index import build
from tablesearch.rerank import PlantedScorer, PlantedScorerConfig
from tablesearch.synthetic import planted_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--docs", type=int, default=300)
    ap.add_argument("--keep-prob", type=float, default=0.25)
    ap.add_argument("--noise-tokens", type=int, default=4)
    ap.add_argument("--eps", type=float, nargs="+", default=[0.0, 0.3, 0.6, 0.9])
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--tsv", help="also write all curves here")
    args = ap.parse_args()

    tables, samples = planted_corpus(args.docs, keep_prob=args.keep_prob, noise_tokens=args.noise_tokens,
                                     seed=args.seed)
    params = init_params(seed=5, tied=True)
    emb = encode_doc(params, featurize_many([t.surrogate_text for t in tables], params.d_f))
    index = build([(t.table_id, e) for t, e in zip(tables, emb)])
    truth = {s.sample_id: s.table_id for s in samples}
    settings = PipelineSettings(10, 10, 1)
    all_curves = []
    for eps in args.eps:
        pipe = Pipeline({t.table_id: t for t in tables}, params, index,
                        PlantedScorer(PlantedScorerConfig(truth, eps, args.seed)), EchoGenerator.from_samples(samples))
        retrieval, reranked = {}, {}
        for s in samples:
            _, trace = pipe.answer(s, settings)
            retrieval[s.sample_id] = [h["table_id"] for h in trace["retrieval"]]
            reranked[s.sample_id] = [c["table_id"] for c in trace["rerank"]]
        before = metric_curves(RankingRun.from_lists(retrieval, truth, "retrieval"), RERANK_K_GRID)
        after = metric_curves(RankingRun.from_lists(reranked, truth, f"rerank_eps{eps:g}"), RERANK_K_GRID)
        all_curves += after if all_curves else before + after
        print(f"\neps = {eps:g}")
        print(f"{'k':>3}  {'MRR ret':>8}  {'MRR rr':>8}  {'gap':>6}  {'R ret':>6}  {'R rr':>6}")
        for (k, mb), (_, ma), (_, rb), (_, ra) in zip(before[0].points, after[0].points,
                                                      before[1].points, after[1].points):
            print(f"{k:>3}  {mb:>8.3f}  {ma:>8.3f}  {ma - mb:>+6.3f}  {rb:>6.3f}  {ra:>6.3f}")
    if args.tsv:
        with open(args.tsv, "w") as fh:
            fh.write(format_curves(all_curves))


if __name__ == "__main__":
    main()
