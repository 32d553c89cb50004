"""Entity/relation overlap score in the style of RadGraph F1.

Entities come from a lexicon extractor rather than a trained parser:

* observations are labeler mentions, typed by their status
  (``OBS-DP`` present, ``OBS-DA`` absent, ``OBS-U`` uncertain);
* anatomy spans come from ``data/anatomy.txt``, absorbing an immediately
  preceding side word ("right", "left", "both", "bilateral"); a side word with
  no anatomy after it becomes an anatomy entity of its own.

Relations are (observation, located_in, anatomy) for every observation and
anatomy entity that share a sentence. The score is the mean of entity F1 and
relation F1, each computed on multisets of (normalized text, type) keys.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from functools import lru_cache

from .labeler import _read_data, find_mentions, match_phrases, sentences, words

OBS_TYPE = {"positive": "OBS-DP", "negative": "OBS-DA", "uncertain": "OBS-U"}
SIDE_WORDS = frozenset({"right", "left", "both", "bilateral"})


@lru_cache(maxsize=1)
def anatomy_lexicon() -> dict[tuple[str, ...], str]:
    return {tuple(words(p)): "ANAT" for p in _read_data("anatomy.txt")}


@dataclass(frozen=True)
class Graph:
    entities: tuple[tuple[str, str], ...]
    relations: tuple[tuple[str, str, str], ...]


def extract_graph(text: str) -> Graph:
    by_sentence: dict[int, list] = {}
    for m in find_mentions(text):
        by_sentence.setdefault(m.sentence, []).append(m)
    table = anatomy_lexicon()
    entities, relations = [], []
    for si, toks in enumerate(sentences(text)):
        mentions = by_sentence.get(si, [])
        taken = {i for m in mentions for i in range(m.start, m.end)}
        obs = [(m.text, OBS_TYPE[m.status]) for m in mentions]
        anat = []
        used = set(taken)
        for start, end, _ in match_phrases(toks, table, taken):
            if start > 0 and toks[start - 1] in SIDE_WORDS and start - 1 not in used:
                start -= 1
            used.update(range(start, end))
            anat.append((" ".join(toks[start:end]), "ANAT"))
        for i, t in enumerate(toks):
            if t in SIDE_WORDS and i not in used:
                anat.append((t, "ANAT"))
        entities += obs + anat
        relations += [(o[0], o[1], a[0]) for o in obs for a in anat]
    return Graph(tuple(entities), tuple(relations))


def multiset_f1(ref: Counter, hyp: Counter) -> float:
    """F1 of multiset overlap; two empty sets agree perfectly."""
    n_ref, n_hyp = sum(ref.values()), sum(hyp.values())
    if n_ref == 0 and n_hyp == 0:
        return 1.0
    if n_ref == 0 or n_hyp == 0:
        return 0.0
    hit = sum((ref & hyp).values())
    return 2.0 * hit / (n_ref + n_hyp)


def radgraph_f1_proxy(ref: str, hyp: str) -> float:
    g_ref, g_hyp = extract_graph(ref), extract_graph(hyp)
    if not g_hyp.entities and g_ref.entities:
        return 0.0
    e = multiset_f1(Counter(g_ref.entities), Counter(g_hyp.entities))
    r = multiset_f1(Counter(g_ref.relations), Counter(g_hyp.relations))
    return 0.5 * (e + r)
