"""Word-overlap metrics: ROUGE-L, BLEU-2 and a simplified METEOR.

All three lowercase the text and keep alphanumeric word runs only.
"""
from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

from .labeler import words

BLEU_EPS = 1e-9


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(ref: str, hyp: str) -> dict[str, float]:
    r, h = words(ref), words(hyp)
    lcs = lcs_length(r, h)
    p = lcs / len(h) if h else 0.0
    rec = lcs / len(r) if r else 0.0
    f = 2 * p * rec / (p + rec) if p + rec > 0 else 0.0
    return {"precision": p, "recall": rec, "f": f}


def _ngrams(toks: Sequence[str], n: int) -> Counter:
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def bleu_2(refs: str | Sequence[str], hyp: str) -> float:
    """Sentence BLEU with uniform weights over 1- and 2-grams.

    Each precision is (clipped matches + eps) / (hyp n-grams + eps), so a
    hypothesis with no bigram matches scores near zero instead of undefined.
    """
    if isinstance(refs, str):
        refs = [refs]
    ref_toks = [words(r) for r in refs]
    h = words(hyp)
    if not h or not ref_toks:
        return 0.0
    log_p = 0.0
    for n in (1, 2):
        counts = _ngrams(h, n)
        max_ref: Counter = Counter()
        for r in ref_toks:
            max_ref |= _ngrams(r, n)
        clipped = sum(min(c, max_ref[g]) for g, c in counts.items())
        log_p += 0.5 * math.log((clipped + BLEU_EPS) / (sum(counts.values()) + BLEU_EPS))
    # closest reference length, shorter wins ties
    ref_len = min((abs(len(r) - len(h)), len(r)) for r in ref_toks)[1]
    bp = 1.0 if len(h) >= ref_len else math.exp(1.0 - ref_len / len(h))
    return bp * math.exp(log_p)


def align(ref: Sequence[str], hyp: Sequence[str]) -> list[tuple[int, int]]:
    """Exact unigram alignment: each hyp word takes the leftmost unused equal ref word."""
    used = [False] * len(ref)
    pairs = []
    for i, w in enumerate(hyp):
        for j, r in enumerate(ref):
            if not used[j] and r == w:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def count_chunks(pairs: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_simplified(ref: str, hyp: str) -> float:
    """Exact-match METEOR without stemming or synonyms.

    F_mean = 10PR/(R+9P), penalty = 0.5 (chunks/matches)^3.
    """
    r, h = words(ref), words(hyp)
    pairs = align(r, h)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, rec = m / len(h), m / len(r)
    fmean = 10 * p * rec / (rec + 9 * p)
    penalty = 0.5 * (count_chunks(pairs) / m) ** 3
    return fmean * (1.0 - penalty)
