"""Word-level tokenizer shared by the toy language model.

Text is lowercased and split into word runs and single punctuation marks.
The first six ids are reserved for special tokens.
"""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import EmptyCorpus

PAD, BOS, EOS, UNK, IMG, SEP = range(6)
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>", "<img>", "<sep>")
MAX_TOKENS = 2048

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")
_NO_SPACE_BEFORE = set(".,;:!?)%")
_JOINERS = set("-/")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    out: list[str] = []
    glue = False
    for tok in tokens:
        if not out or glue or tok in _NO_SPACE_BEFORE or tok in _JOINERS:
            out.append(tok)
        else:
            out.append(" " + tok)
        glue = tok in _JOINERS or tok == "("
    return "".join(out)


def normalize(text: str) -> str:
    """Canonical form that ``decode(encode(text))`` reproduces for in-vocab text."""
    return detokenize(tokenize(text))


@dataclass(frozen=True)
class Vocab:
    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:6]) != SPECIALS:
            raise ValueError("vocab must start with the six special tokens")
        mapping = {t: i for i, t in enumerate(self.id_to_token)}
        if len(mapping) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocab")
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


def build_vocab(corpus: Iterable[str], max_size: int = 512) -> Vocab:
    """Most frequent tokens first, ties broken lexicographically."""
    if max_size < 7:
        raise ValueError("max_size must leave room for at least one regular token")
    counts: Counter[str] = Counter()
    n_docs = 0
    for text in corpus:
        n_docs += 1
        counts.update(tokenize(text))
    if n_docs == 0:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    for special in SPECIALS:
        counts.pop(special, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: max_size - len(SPECIALS)]]
    return Vocab(SPECIALS + tuple(kept))


def encode(text: str, vocab: Vocab, max_len: int = MAX_TOKENS) -> list[int]:
    lookup = vocab.token_to_id
    return [lookup.get(tok, UNK) for tok in tokenize(text)[:max_len]]


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    """Inverse of :func:`encode`; special tokens other than UNK are dropped."""
    toks = []
    for i in ids:
        i = int(i)
        if i == UNK:
            toks.append(SPECIALS[UNK])
        elif i >= len(SPECIALS):
            toks.append(vocab.id_to_token[i])
    return detokenize(toks)
