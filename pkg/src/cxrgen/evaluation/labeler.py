"""Rule-based finding labeler for report text.

Pipeline per sentence: lexicon mention lookup (longest phrase wins), then a
negation check (a cue before the mention, inside the same clause), then an
uncertainty check (a cue anywhere in the sentence), else positive. Across
mentions of one finding, positive beats uncertain beats negative. Findings never
mentioned are absent. "No Finding" is positive exactly when nothing else is
positive or uncertain.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from ..radex.findings import FINDINGS, NO_FINDING

STATUSES = ("positive", "negative", "uncertain", "absent")
SCORE = {"positive": 1.0, "uncertain": 0.5, "negative": 0.0, "absent": 0.0}

NEGATION_CUES = (
    ("no",), ("without",), ("no", "evidence", "of"), ("clear", "of"), ("negative", "for"),
    ("free", "of"), ("absence", "of"), ("not",), ("resolution", "of"),
)
UNCERTAINTY_CUES = (
    ("may",), ("cannot", "exclude"), ("cannot", "be", "excluded"), ("can", "not", "be", "excluded"),
    ("difficult", "to", "exclude"), ("not", "excluded"), ("possible",), ("possibly",),
    ("questionable",), ("suspicious", "for"), ("concerning", "for"), ("likely",), ("probable",),
    ("versus",),
)
# a negation cue does not reach past these words
SCOPE_BREAKS = frozenset({"but", "however", "although", "though", "except", "aside"})

_WORD_RE = re.compile(r"[a-z0-9]+")
_SENT_RE = re.compile(r"[.;!?\n]+")


def words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def sentences(text: str) -> list[list[str]]:
    out = [words(s) for s in _SENT_RE.split(text)]
    return [s for s in out if s]


def _read_data(name: str) -> list[str]:
    raw = resources.files("cxrgen.evaluation").joinpath("data", name).read_text(encoding="utf-8")
    return [ln for ln in raw.splitlines() if ln.strip() and not ln.startswith("#")]


@lru_cache(maxsize=1)
def lexicon() -> dict[tuple[str, ...], str]:
    """phrase tokens -> finding, from the shipped ``lexicon.tsv``."""
    table = {}
    for ln in _read_data("lexicon.tsv"):
        finding, phrase = ln.split("\t")
        if finding not in FINDINGS:
            raise ValueError(f"lexicon names unknown finding {finding!r}")
        table[tuple(words(phrase))] = finding
    return table


def match_phrases(tokens: list[str], table: dict[tuple[str, ...], str], taken: set[int] | None = None):
    """Left-to-right, longest-first, non-overlapping matches as (start, end, value)."""
    taken = taken or set()
    lengths = sorted({len(k) for k in table}, reverse=True)
    out = []
    i = 0
    while i < len(tokens):
        for n in lengths:
            key = tuple(tokens[i:i + n])
            if len(key) == n and key in table and not taken.intersection(range(i, i + n)):
                out.append((i, i + n, table[key]))
                i += n
                break
        else:
            i += 1
    return out


def _has_cue(tokens: list[str], cues, lo: int, hi: int) -> bool:
    for cue in cues:
        n = len(cue)
        for j in range(lo, hi - n + 1):
            if tuple(tokens[j:j + n]) == cue:
                return True
    return False


@dataclass(frozen=True)
class Mention:
    sentence: int
    start: int
    end: int
    finding: str
    text: str
    status: str


def _status(tokens: list[str], start: int, end: int) -> str:
    lo = 0
    for j in range(start - 1, -1, -1):
        if tokens[j] in SCOPE_BREAKS:
            lo = j + 1
            break
    if _has_cue(tokens, NEGATION_CUES, lo, start):
        return "negative"
    if _has_cue(tokens, UNCERTAINTY_CUES, 0, len(tokens)):
        return "uncertain"
    return "positive"


def find_mentions(text: str) -> list[Mention]:
    table = lexicon()
    out = []
    for si, toks in enumerate(sentences(text)):
        for start, end, finding in match_phrases(toks, table):
            out.append(Mention(si, start, end, finding, " ".join(toks[start:end]), _status(toks, start, end)))
    return out


@dataclass(frozen=True)
class LabelVector:
    statuses: tuple[str, ...]

    def __post_init__(self):
        if len(self.statuses) != len(FINDINGS):
            raise ValueError(f"expected {len(FINDINGS)} statuses")

    @property
    def scores(self) -> tuple[float, ...]:
        return tuple(SCORE[s] for s in self.statuses)

    def status(self, finding: str) -> str:
        return self.statuses[FINDINGS.index(finding)]

    def positives(self) -> frozenset[str]:
        return frozenset(f for f, s in zip(FINDINGS, self.statuses) if s == "positive")

    def as_dict(self) -> dict[str, str]:
        return dict(zip(FINDINGS, self.statuses))


_RANK = {"absent": 0, "negative": 1, "uncertain": 2, "positive": 3}


def label_report(text: str) -> LabelVector:
    best = {f: "absent" for f in FINDINGS}
    for m in find_mentions(text):
        if _RANK[m.status] > _RANK[best[m.finding]]:
            best[m.finding] = m.status
    others = [best[f] for f in FINDINGS if f != NO_FINDING]
    best[NO_FINDING] = "absent" if any(s in ("positive", "uncertain") for s in others) else "positive"
    return LabelVector(tuple(best[f] for f in FINDINGS))
