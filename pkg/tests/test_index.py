import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tablesearch.index import (Backend, IndexFileError, IndexVersionWarning, VectorIndexError, build, load,
                               save)

from conftest import unit_rows


def full_scan(ids, matrix, q, n):
    """Independent oracle: exact dot products via fsum, python sort on (-score, id)."""
    m = np.asarray(matrix, dtype=np.float32).astype(np.float64)
    qq = np.asarray(q, dtype=np.float32).astype(np.float64)
    scored = [(-math.fsum(m[i] * qq), ids[i]) for i in range(len(ids))]
    return [tid for _, tid in sorted(scored)[:n]]


def with_ties(rng, n, d):
    x = unit_rows(rng, n, d)
    # every tenth vector duplicates an earlier one, so exact score ties occur
    for i in range(10, n, 10):
        x[i] = x[rng.integers(0, i)]
    ids = [f"t{j:04d}" for j in rng.permutation(n)]
    return ids, x


def test_single_vector(rng):
    v = unit_rows(rng, 1, 8)[0]
    idx = build([("only", v)])
    assert len(idx) == 1
    for q in unit_rows(rng, 5, 8):
        res = idx.search(q, 3)
        assert [(r.table_id, r.rank) for r in res] == [("only", 1)]


def test_duplicate_id_named(rng):
    v = unit_rows(rng, 2, 4)
    with pytest.raises(VectorIndexError, match="'a'"):
        build([("a", v[0]), ("a", v[1])])


def test_build_rejects_bad_vectors(rng):
    with pytest.raises(VectorIndexError):
        build([])
    with pytest.raises(VectorIndexError):
        build([("a", np.ones(4) / 2), ("b", np.ones(3) / math.sqrt(3))])
    with pytest.raises(VectorIndexError, match="unit norm"):
        build([("a", np.ones(4))])


def test_query_equal_to_stored_vector(rng):
    x = unit_rows(rng, 50, 16)
    idx = build([(f"d{i}", v) for i, v in enumerate(x)])
    top = idx.search(x[17], 1)[0]
    assert top.table_id == "d17" and top.rank == 1
    assert top.score == pytest.approx(1.0, abs=1e-6)


def test_search_errors(rng):
    idx = build([("a", unit_rows(rng, 1, 4)[0])])
    with pytest.raises(VectorIndexError):
        idx.search(np.ones(5) / math.sqrt(5), 1)
    with pytest.raises(ValueError):
        idx.search(np.ones(4) / 2, 0)


def test_n_larger_than_corpus_returns_everything_sorted(rng):
    ids, x = with_ties(rng, 30, 8)
    idx = build(list(zip(ids, x)))
    q = unit_rows(rng, 1, 8)[0]
    res = idx.search(q, 100)
    assert [r.table_id for r in res] == full_scan(ids, x, q, 100)
    assert [r.rank for r in res] == list(range(1, 31))


def test_exact_matches_full_scan_oracle_with_ties(rng):
    ids, x = with_ties(rng, 1000, 32)
    idx = build(list(zip(ids, x)))
    queries = unit_rows(rng, 100, 32)
    # a few queries sit exactly on duplicated vectors, forcing ties at rank 1
    queries[:5] = x[[10, 20, 30, 40, 50]]
    t0 = time.perf_counter()
    got = [[r.table_id for r in idx.search(q, 50)] for q in queries]
    assert time.perf_counter() - t0 < 5
    assert sum(g == full_scan(ids, x, q, 50) for g, q in zip(got, queries)) == 100


def test_tie_order_is_ascending_id():
    v = np.array([1.0, 0.0])
    w = np.array([0.0, 1.0])
    idx = build([("zeta", v), ("alpha", v), ("mid", w), ("beta", v)])
    assert [r.table_id for r in idx.search(v, 4)] == ["alpha", "beta", "zeta", "mid"]
    assert [r.table_id for r in idx.search(v, 2)] == ["alpha", "beta"]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 40), st.integers(1, 40))
def test_prefix_monotonicity(seed, n1, n2):
    rng = np.random.default_rng(seed)
    ids, x = with_ties(rng, 40, 6)
    idx = build(list(zip(ids, x)))
    q = unit_rows(rng, 1, 6)[0]
    small, large = sorted((n1, n2))
    a, b = idx.search(q, small), idx.search(q, large)
    assert b[: len(a)] == a
    scores = [r.score for r in b]
    assert scores == sorted(scores, reverse=True)


def test_save_load_round_trip(tmp_path, rng):
    x = unit_rows(rng, 100, 16)
    idx = build([(f"t{i}", v) for i, v in enumerate(x)], encoder_version=2, corpus_hash="ab" * 32)
    save(idx, tmp_path / "i.bin")
    back = load(tmp_path / "i.bin")
    assert back.ids == idx.ids and back.encoder_version == 2 and back.corpus_hash == "ab" * 32
    for q in unit_rows(rng, 20, 16):
        assert back.search(q, 10) == idx.search(q, 10)


def test_partitioned_round_trip(tmp_path, rng):
    x = unit_rows(rng, 200, 16)
    idx = build([(f"t{i}", v) for i, v in enumerate(x)], Backend.partitioned(seed=3))
    save(idx, tmp_path / "p.bin")
    back = load(tmp_path / "p.bin")
    assert back.backend == idx.backend and back.num_lists == idx.num_lists == 15
    assert back.probes == 4
    for q in unit_rows(rng, 20, 16):
        assert back.search(q, 10) == idx.search(q, 10)


def test_truncated_file_checksum(tmp_path, rng):
    idx = build([(f"t{i}", v) for i, v in enumerate(unit_rows(rng, 10, 4))])
    save(idx, tmp_path / "i.bin")
    raw = (tmp_path / "i.bin").read_bytes()
    (tmp_path / "i.bin").write_bytes(raw[:-7])
    with pytest.raises(IndexFileError, match="checksum"):
        load(tmp_path / "i.bin")


def test_version_mismatch_warns(tmp_path, rng):
    idx = build([("a", unit_rows(rng, 1, 4)[0])], encoder_version=3)
    save(idx, tmp_path / "i.bin")
    with pytest.warns(IndexVersionWarning, match="3"):
        load(tmp_path / "i.bin", expected_encoder_version=4)


def clustered(rng, n, d, n_clusters, spread=0.15):
    centers = unit_rows(rng, n_clusters, d)
    x = centers[rng.integers(0, n_clusters, n)] + spread * rng.standard_normal((n, d)) / math.sqrt(d)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def partitioned_recall(x, queries, n, **kw):
    ids = [f"t{i:05d}" for i in range(len(x))]
    exact = build(list(zip(ids, x)))
    approx = build(list(zip(ids, x)), Backend.partitioned(**kw))
    hits = 0
    for q in queries:
        truth = {r.table_id for r in exact.search(q, n)}
        hits += len(truth & {r.table_id for r in approx.search(q, n)})
    return hits / (n * len(queries)), approx


def test_partitioned_recall_floor_on_clustered_data(rng):
    x = clustered(rng, 2000, 32, 20)
    # queries are perturbed corpus points
    queries = x[rng.choice(len(x), 50, replace=False)] + 0.05 * rng.standard_normal((50, 32))
    queries /= np.linalg.norm(queries, axis=1, keepdims=True)
    recall, idx = partitioned_recall(x, queries, 10)
    assert idx.num_lists == 45 and idx.probes == 12
    assert recall >= 0.9


def test_partitioned_all_probes_is_exact(rng):
    x = unit_rows(rng, 300, 16)
    recall, _ = partitioned_recall(x, unit_rows(rng, 20, 16), 10, num_lists=8, probes=8)
    assert recall == 1.0


def test_partitioned_deterministic(rng):
    x = unit_rows(rng, 300, 16)
    a = build([(f"t{i}", v) for i, v in enumerate(x)], Backend.partitioned(seed=1))
    b = build([(f"t{i}", v) for i, v in enumerate(x)], Backend.partitioned(seed=1))
    assert np.array_equal(a.assignments, b.assignments)
    q = unit_rows(rng, 1, 16)[0]
    assert a.search(q, 20) == b.search(q, 20)
