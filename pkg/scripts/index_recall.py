"""Partitioned-backend recall against the exact backend, on isotropic and clustered data.

    python3 scripts/index_recall.py --docs 5000 --dims 16 64 128
"""

import argparse
import math
import time

import numpy as np

from tablesearch.index import Backend, build


def unit(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def dataset(kind, rng, n, d, clusters=30):
    if kind == "random":
        return unit(rng.standard_normal((n, d))), unit(rng.standard_normal((100, d)))
    centres = unit(rng.standard_normal((clusters, d)))
    x = unit(centres[rng.integers(0, clusters, n)] + 0.15 * rng.standard_normal((n, d)) / math.sqrt(d))
    q = unit(x[rng.choice(n, 100, replace=False)] + 0.05 * rng.standard_normal((100, d)))
    return x, q


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--docs", type=int, default=5000)
    ap.add_argument("--dims", type=int, nargs="+", default=[16, 64, 128])
    ap.add_argument("--n", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'data':<10}{'d':>5}{'lists':>7}{'probes':>8}{'recall':>8}{'exact ms':>10}{'ivf ms':>8}")
    for kind in ("random", "clustered"):
        for d in args.dims:
            x, queries = dataset(kind, rng, args.docs, d)
            ids = [f"t{i:06d}" for i in range(args.docs)]
            exact = build(list(zip(ids, x)))
            ivf = build(list(zip(ids, x)), Backend.partitioned(seed=args.seed))
            hits, t_exact, t_ivf = 0, 0.0, 0.0
            for q in queries:
                t0 = time.perf_counter()
                truth = {r.table_id for r in exact.search(q, args.n)}
                t1 = time.perf_counter()
                got = {r.table_id for r in ivf.search(q, args.n)}
                t_ivf += time.perf_counter() - t1
                t_exact += t1 - t0
                hits += len(truth & got)
            recall = hits / (args.n * len(queries))
            print(f"{kind:<10}{d:>5}{ivf.num_lists:>7}{ivf.probes:>8}{recall:>8.3f}"
                  f"{1000 * t_exact / len(queries):>10.3f}{1000 * t_ivf / len(queries):>8.3f}")


if __name__ == "__main__":
    main()
