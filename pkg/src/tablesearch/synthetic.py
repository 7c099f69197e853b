"""Planted synthetic table corpora with known ground truth."""

from __future__ import annotations

import string

import numpy as np

from .corpus import QuerySample, TableRecord


def make_vocabulary(size: int, rng: np.random.Generator) -> list[str]:
    letters = np.array(list(string.ascii_lowercase))
    words: set[str] = set()
    out = []
    while len(out) < size:
        w = "".join(rng.choice(letters, size=int(rng.integers(4, 9))))
        if w not in words:
            words.add(w)
            out.append(w)
    return out


def planted_corpus(n_docs: int = 500, doc_len: int = 16, keep_prob: float = 0.5,
                   noise_tokens: int = 0, vocab_size: int = 3000, seed: int = 0,
                   split: str = "train", raw_suffix: str = ""):
    """Return ``(tables, samples)`` with one query per table.

    Each table's surrogate text is ``doc_len`` vocabulary words; its query keeps
    each word with probability ``keep_prob`` (at least two survive) and adds
    ``noise_tokens`` random words. The answer is a word unique to the table.
    """
    rng = np.random.default_rng(seed)
    vocab = make_vocabulary(vocab_size + n_docs, rng)
    answers, vocab = vocab[:n_docs], vocab[n_docs:]
    tables, samples = [], []
    width = len(str(n_docs - 1))
    for i in range(n_docs):
        tid = f"t{i:0{width}d}"
        words = list(rng.choice(vocab, size=doc_len, replace=False))
        text = " ".join(words) + f" | answer {answers[i]}"
        tables.append(TableRecord(tid, "synthetic", surrogate_text=text,
                                  image_ref=f"images/{tid}.png"))
        keep = rng.random(doc_len) < keep_prob
        if keep.sum() < 2:
            keep[rng.choice(doc_len, size=2, replace=False)] = True
        q_words = [w for w, k in zip(words, keep) if k]
        if noise_tokens:
            q_words += list(rng.choice(vocab, size=noise_tokens))
            rng.shuffle(q_words)
        query = " ".join(q_words) + raw_suffix
        samples.append(QuerySample(f"q{i:0{width}d}", query, tid, answers[i], "QA", split))
    return tables, samples
