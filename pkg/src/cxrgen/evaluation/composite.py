"""Linear RadCliQ-style composite (lower is better).

The published metric uses learned coefficients that are not available; this
proxy keeps the direction (every component lowers the score) and exposes the
weights.
"""
from __future__ import annotations

from typing import Mapping, Sequence

from ..errors import MissingComponent

COMPONENTS = ("bleu_2", "embed_sim", "chex_sim", "radgraph_f1")
DEFAULT_WEIGHTS = (1.0, 0.5, 0.5, 1.0)
DEFAULT_OFFSET = 3.0


def radcliq_proxy(metrics: Mapping[str, float], weights: Sequence[float] = DEFAULT_WEIGHTS,
                  offset: float = DEFAULT_OFFSET) -> float:
    if len(weights) != len(COMPONENTS):
        raise ValueError(f"need {len(COMPONENTS)} weights")
    if any(w < 0 for w in weights):
        raise ValueError("weights must be nonnegative")
    missing = [k for k in COMPONENTS if k not in metrics]
    if missing:
        raise MissingComponent(f"missing metric components: {missing}")
    return offset - sum(w * float(metrics[k]) for w, k in zip(weights, COMPONENTS))
