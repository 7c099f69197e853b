import json

import pytest

from tablesearch.cli import main
from tablesearch.config import ConfigError, resolve_config
from tablesearch.corpus import QuerySample, TableRecord, write_corpus
from tablesearch.embed import init_params, load_params, read_loss_curve

SMALL = ["--feature-dim", "512", "--embed-dim", "32"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 and out.strip() else None), err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("ws")
    paths = {k: d / v for k, v in {"raw": "raw.jsonl", "corpus": "corpus.jsonl", "params": "enc.bin",
                                   "index": "index.bin"}.items()}
    assert main(["synth", "--out", str(paths["raw"]), "--n-docs", "120", "--seed", "4", "--json-suffix"]) == 0
    assert main(["ingest", "--corpus", str(paths["raw"]), "--out", str(paths["corpus"]), "--seed", "4"]) == 0
    assert main(["train", "--corpus", str(paths["corpus"]), "--params", str(paths["params"]), "--epochs", "3",
                 "--warmup-steps", "2", "--batch-size", "16", *SMALL]) == 0
    assert main(["index", "--corpus", str(paths["corpus"]), "--params", str(paths["params"]),
                 "--index", str(paths["index"])]) == 0
    return paths


def pipe_flags(ws):
    return ["--corpus", ws["corpus"], "--params", ws["params"], "--index", ws["index"]]


def test_ingest_prunes_and_is_deterministic(workspace, tmp_path, capsys):
    code, m1, err = run(capsys, "ingest", "--corpus", workspace["raw"], "--out", tmp_path / "a.jsonl", "--seed", "4")
    assert code == 0 and "kept 120 samples, removed 0" in err
    _, m2, _ = run(capsys, "ingest", "--corpus", workspace["raw"], "--out", tmp_path / "b.jsonl", "--seed", "4")
    assert m1["sha256"] == m2["sha256"]
    assert m1["partition_sizes"] == {"part0": 19, "part1": 49, "part2": 28}  # floors 19/48/28, remainder to the largest
    first = json.loads(next(l for l in (tmp_path / "a.jsonl").read_text().splitlines() if '"sample"' in l))
    assert "JSON format" in first["raw_query"] and "JSON" not in first["pruned_query"]


def test_ingest_missing_rule_file(workspace, tmp_path, capsys):
    code, _, err = run(capsys, "ingest", "--corpus", workspace["raw"], "--out", tmp_path / "x.jsonl",
                       "--rules", tmp_path / "nope.json")
    assert code == 2 and "nope.json" in err


def test_train_writes_checkpoint_and_curve(workspace):
    curve = read_loss_curve(workspace["params"].with_name("enc.bin.loss.tsv"))
    assert len(curve) == 3 * 6  # 96 train samples / 16 per batch, 3 epochs
    assert sum(curve[-6:]) < sum(curve[:6])
    assert load_params(workspace["params"]).version == 1


def test_train_zero_epochs_is_initialization(workspace, tmp_path, capsys):
    code, res, _ = run(capsys, "train", "--corpus", workspace["corpus"], "--params", tmp_path / "p.bin",
                       "--epochs", "0", "--seed", "9", *SMALL)
    assert code == 0 and res["steps"] == 0
    assert load_params(tmp_path / "p.bin").allclose(init_params(512, 32, seed=9), atol=1e-7)


def test_train_missing_corpus(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--corpus", tmp_path / "none.jsonl", "--params", tmp_path / "p.bin")
    assert code == 2 and "corpus" in err


def test_retrieve_more_than_index_size(tmp_path, capsys):
    tables = [TableRecord("t1", "demo", surrogate_text="red apples | 3"),
              TableRecord("t2", "demo", surrogate_text="blue sky | 9")]
    samples = [QuerySample("q1", "red apples", "t1", "3")]
    write_corpus(tmp_path / "c.jsonl", tables, samples)
    assert run(capsys, "train", "--corpus", tmp_path / "c.jsonl", "--params", tmp_path / "p.bin",
               "--epochs", "0", *SMALL)[0] == 0
    assert run(capsys, "index", "--corpus", tmp_path / "c.jsonl", "--params", tmp_path / "p.bin",
               "--index", tmp_path / "i.bin")[0] == 0
    code, res, _ = run(capsys, "retrieve", "red apples", "-n", "3", "--corpus", tmp_path / "c.jsonl",
                       "--params", tmp_path / "p.bin", "--index", tmp_path / "i.bin")
    assert code == 0 and [r["rank"] for r in res["results"]] == [1, 2]


def test_rerank_without_index_names_artifact(workspace, tmp_path, capsys):
    code, _, err = run(capsys, "rerank", "anything", "--corpus", workspace["corpus"], "--params",
                       workspace["params"], "--index", tmp_path / "missing.bin")
    assert code == 2 and "index" in err and "missing.bin" in err


def test_answer_structured_with_ledger(workspace, tmp_path, capsys):
    q = json.loads(next(l for l in workspace["corpus"].read_text().splitlines() if '"sample"' in l))
    code, res, err = run(capsys, "answer", q["raw_query"], *pipe_flags(workspace), "--trace", tmp_path / "t.json")
    assert code == 0 and res["answer"]["parse_status"] == "structured"
    assert res["trace"]["pruned_query"] == q["pruned_query"]
    assert "Subtotal" in err and "Total" in err
    assert json.loads((tmp_path / "t.json").read_text()) == res["trace"]


def test_eval_from_pipeline_and_run_files(workspace, tmp_path, capsys):
    code, rep, _ = run(capsys, "eval", *pipe_flags(workspace), "--out-dir", tmp_path, "--k-grid", "1,5,10")
    assert code == 0
    tags = {(c["metric"], c["stage_tag"]) for c in rep["curves"]}
    assert tags == {("mrr", "retrieval"), ("recall", "retrieval"), ("mrr", "rerank"), ("recall", "rerank")}
    assert (tmp_path / "curves.tsv").read_text().startswith("metric\tstage_tag\tk\tvalue")
    code, rep2, _ = run(capsys, "eval", "--run", tmp_path / "retrieval.run.jsonl", "--k-grid", "1,5,10")
    assert rep2["curves"] == [c for c in rep["curves"] if c["stage_tag"] == "retrieval"]


def test_bench(workspace, capsys):
    code, res, err = run(capsys, "bench", *pipe_flags(workspace), "--queries", "10")
    assert code == 0 and res["queries"] == 10 and "Total" in err


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.yaml"
    cfg_file.write_text("n_retrieve: 30\nn_rerank: 5\nseed: 1\nepsilon: 0.2\n")
    env = {"TABRAG_N_RERANK": "7", "TABRAG_SEED": "2"}
    cfg = resolve_config({"seed": 3, "n_retrieve": None}, str(cfg_file), env)
    assert (cfg.n_retrieve, cfg.n_rerank, cfg.seed, cfg.epsilon, cfg.k_keep) == (30, 7, 3, 0.2, 1)
    assert resolve_config({}, None, {}).n_retrieve == 50
    with pytest.raises(ConfigError):
        resolve_config({"k_keep": 20}, None, {})
    with pytest.raises(ConfigError):
        resolve_config({"scorer": "remote", "scorer_endpoint": "not a url"}, None, {})
    (tmp_path / "bad.json").write_text('{"bogus": 1}')
    with pytest.raises(ConfigError, match="bogus"):
        resolve_config({}, str(tmp_path / "bad.json"), {})


def test_rerank_unknown_query_with_planted_scorer(workspace, capsys):
    code, _, err = run(capsys, "rerank", "a query nobody planted", *pipe_flags(workspace))
    assert code == 2 and "[reranking]" in err and "adhoc" in err


def test_tied_init_zero_epochs(workspace, tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--corpus", workspace["corpus"], "--params", tmp_path / "p.bin",
                     "--epochs", "0", "--tied-init", *SMALL)
    p = load_params(tmp_path / "p.bin")
    assert code == 0 and (p.w_text == p.w_doc).all()
