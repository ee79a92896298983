"""Multi-reference caption metrics: corpus BLEU-4, ROUGE-L, and CIDEr.

All three operate on tokenized sentences.  BLEU is computed at the corpus
level without smoothing; ROUGE-L and CIDEr are per-record scores averaged
over the corpus.  A paired bootstrap utility supports system comparisons.
"""

from __future__ import annotations

from collections import Counter

import numpy as np


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _validate(candidates, references) -> None:
    if not candidates:
        raise ValueError("empty candidate set")
    if len(candidates) != len(references):
        raise ValueError("candidates and references must align one to one")
    for refs in references:
        if not refs:
            raise ValueError("every record needs at least one reference")


def bleu4(candidates: list[list[str]], references: list[list[list[str]]]) -> float:
    """Corpus-level BLEU with n = 1..4, uniform weights, no smoothing.

    Modified n-gram precision clips candidate counts by the maximum count in
    any reference of the record; the brevity penalty uses, per record, the
    reference length closest to the candidate length (ties go to the shorter
    reference).
    """
    _validate(candidates, references)
    matches = np.zeros(4)
    totals = np.zeros(4)
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        cand_len += len(cand)
        ref_len += min(sorted(len(r) for r in refs), key=lambda L: abs(L - len(cand)))
        for n in range(1, 5):
            counts = _ngrams(cand, n)
            if not counts:
                continue
            max_ref = Counter()
            for ref in refs:
                for gram, c in _ngrams(ref, n).items():
                    if c > max_ref[gram]:
                        max_ref[gram] = c
            totals[n - 1] += sum(counts.values())
            matches[n - 1] += sum(min(c, max_ref[gram]) for gram, c in counts.items())
    if cand_len == 0 or np.any(totals == 0) or np.any(matches == 0):
        return 0.0
    log_precision = np.mean(np.log(matches / totals))
    brevity = 1.0 if cand_len > ref_len else float(np.exp(1.0 - ref_len / cand_len))
    return float(brevity * np.exp(log_precision))


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[len(b)]


def rouge_l(candidates: list[list[str]], references: list[list[list[str]]], beta: float = 1.2) -> float:
    """Mean over records of the best LCS-based F-measure against any reference."""
    _validate(candidates, references)
    scores = []
    for cand, refs in zip(candidates, references):
        best = 0.0
        for ref in refs:
            lcs = _lcs_length(cand, ref)
            if lcs == 0:
                continue
            precision = lcs / len(cand)
            recall = lcs / len(ref)
            f = (1 + beta**2) * precision * recall / (recall + beta**2 * precision)
            best = max(best, f)
        scores.append(best)
    return float(np.mean(scores))


def cider(candidates: list[list[str]], references: list[list[list[str]]]) -> float:
    """Consensus scoring with tf-idf n-gram vectors, n = 1..4.

    Document frequency of an n-gram is the number of records whose reference
    set contains it; idf = log(N / max(df, 1)).  The per-record score is the
    per-n cosine between candidate and reference vectors averaged over
    references and n, scaled by 10.
    """
    _validate(candidates, references)
    n_records = len(candidates)
    doc_freq: list[Counter] = [Counter() for _ in range(4)]
    for refs in references:
        for n in range(1, 5):
            grams = set()
            for ref in refs:
                grams.update(_ngrams(ref, n))
            for gram in grams:
                doc_freq[n - 1][gram] += 1

    def tfidf(counts: Counter, n: int) -> dict:
        return {
            gram: c * np.log(n_records / max(doc_freq[n - 1][gram], 1.0))
            for gram, c in counts.items()
        }

    def cosine(u: dict, v: dict) -> float:
        nu = np.sqrt(sum(x * x for x in u.values()))
        nv = np.sqrt(sum(x * x for x in v.values()))
        if nu == 0.0 or nv == 0.0:
            return 0.0
        dot = sum(x * v[g] for g, x in u.items() if g in v)
        return dot / (nu * nv)

    scores = []
    for cand, refs in zip(candidates, references):
        per_n = []
        for n in range(1, 5):
            cand_vec = tfidf(_ngrams(cand, n), n)
            sims = [cosine(cand_vec, tfidf(_ngrams(ref, n), n)) for ref in refs]
            per_n.append(float(np.mean(sims)))
        scores.append(10.0 * float(np.mean(per_n)))
    return float(np.mean(scores))


def evaluate_captions(
    candidates: list[list[str]], references: list[list[list[str]]]
) -> dict[str, float]:
    return {
        "bleu4": bleu4(candidates, references),
        "rouge_l": rouge_l(candidates, references),
        "cider": cider(candidates, references),
    }


def paired_bootstrap(
    metric_fn,
    candidates_a: list[list[str]],
    candidates_b: list[list[str]],
    references: list[list[list[str]]],
    n_resamples: int = 1000,
    seed: int = 0,
) -> dict[str, float]:
    """Resample records with replacement and report how often system A wins.

    Returns the fractions of resamples where A scores strictly higher, where B
    does, and where they tie.
    """
    _validate(candidates_a, references)
    _validate(candidates_b, references)
    rng = np.random.default_rng(seed)
    n = len(references)
    wins_a = wins_b = ties = 0
    for _ in range(n_resamples):
        idx = rng.integers(0, n, size=n)
        cands_a = [candidates_a[i] for i in idx]
        cands_b = [candidates_b[i] for i in idx]
        refs = [references[i] for i in idx]
        score_a = metric_fn(cands_a, refs)
        score_b = metric_fn(cands_b, refs)
        if score_a > score_b:
            wins_a += 1
        elif score_b > score_a:
            wins_b += 1
        else:
            ties += 1
    return {
        "win_a": wins_a / n_resamples,
        "win_b": wins_b / n_resamples,
        "ties": ties / n_resamples,
    }
