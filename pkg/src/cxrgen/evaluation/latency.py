"""Seconds-per-instance timing for generation and summarization."""
from __future__ import annotations

import statistics
import time
from typing import Sequence

from ..model import ModelBundle, generate_ids_batch
from ..radex.corpus import CorpusRecord
from ..tensor import single_threaded
from .report import TASKS, task_inputs, token_budget


def latency_harness(bundle: ModelBundle, records: Sequence[CorpusRecord], repeats: int = 1,
                    max_new_tokens: int = 80, stop_at_eos: bool = True,
                    tasks: Sequence[str] = TASKS) -> dict[str, dict]:
    """Time one greedy decode per instance, ``repeats`` times, single threaded.

    One untimed pass over the first instance warms caches first.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if not records:
        raise ValueError("no records to time")
    out = {}
    with single_threaded():
        for task in tasks:
            pairs = task_inputs(records, task)
            budget = token_budget(bundle, [p[0] for p in pairs], max_new_tokens)
            generate_ids_batch(bundle, [records[0].image], [pairs[0][0]], budget, stop_at_eos)
            samples = []
            for _ in range(repeats):
                for r, (instr, _) in zip(records, pairs):
                    t0 = time.perf_counter()
                    generate_ids_batch(bundle, [r.image], [instr], budget, stop_at_eos)
                    samples.append(time.perf_counter() - t0)
            out[task] = {
                "mean": statistics.fmean(samples),
                "median": statistics.median(samples),
                "std": statistics.pstdev(samples),
                "min": min(samples),
                "max": max(samples),
                "n": len(samples),
                "max_new_tokens": budget,
                "samples": samples,
            }
    return out
