"""Embedding-similarity proxies built on the trained language model's token table.

``embed_similarity`` mirrors BERTScore's greedy matching (each token takes its
best cosine partner, F of the two directions); ``chex_similarity`` mirrors the
CheXbert vector cosine with mean-pooled token vectors. Neither uses contextual
encoders, so both are proxies and are reported as such.
"""
from __future__ import annotations

import numpy as np

from ..errors import EmbedderMissing
from ..tokenizer import Vocab, encode


class Embedder:
    def __init__(self, table: np.ndarray, vocab: Vocab):
        if table.shape[0] < len(vocab):
            raise ValueError("embedding table smaller than vocabulary")
        self.vocab = vocab
        norms = np.linalg.norm(table, axis=1, keepdims=True)
        self.table = np.array(table, dtype=np.float64)
        self.unit = self.table / np.maximum(norms, 1e-12)

    @classmethod
    def from_bundle(cls, bundle) -> "Embedder":
        return cls(bundle.L["L.tok"].data.copy(), bundle.vocab)

    def ids(self, text: str) -> list[int]:
        return encode(text, self.vocab)


def _need(embedder) -> Embedder:
    if embedder is None:
        raise EmbedderMissing("an embedder is required; build one with Embedder.from_bundle")
    return embedder


def embed_similarity(ref: str, hyp: str, embedder: Embedder | None) -> float:
    emb = _need(embedder)
    r, h = emb.ids(ref), emb.ids(hyp)
    if not r or not h:
        return 0.0
    sim = emb.unit[h] @ emb.unit[r].T
    p = float(sim.max(axis=1).mean())
    rec = float(sim.max(axis=0).mean())
    if p + rec <= 0:
        return float(np.clip(min(p, rec), -1.0, 1.0))
    return float(np.clip(2 * p * rec / (p + rec), -1.0, 1.0))


def chex_similarity(ref: str, hyp: str, embedder: Embedder | None) -> float:
    emb = _need(embedder)
    r, h = emb.ids(ref), emb.ids(hyp)
    if not r or not h:
        return 0.0
    a, b = emb.table[r].mean(axis=0), emb.table[h].mean(axis=0)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return float(np.clip(a @ b / denom, -1.0, 1.0))
