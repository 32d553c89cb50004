"""Run a bundle over the held-out split and score both tasks.

Generation: image + the canonical findings instruction -> Findings text.
Summarization: image + "<instruction> Findings: <findings>" -> Impression.

Aggregate columns follow the ablation table header: R-L, M, B-2, BS, CX, RG, RC
(BS, CX, RG are artifact-local proxies, RC the linear composite). The AUC table
scores the labeler's reading of each generated Findings text against the
planted labels, one column per finding in the fixed category order.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import DegenerateLabels
from ..model import ModelBundle, generate_ids_batch, iter_chunks
from ..radex.corpus import CANONICAL_REPORT_PROMPT, CANONICAL_SUMMARY_PROMPT, CorpusRecord, summary_instruction
from ..radex.findings import FINDINGS
from ..tensor import single_threaded
from ..tokenizer import decode
from .auc import auc
from .composite import radcliq_proxy
from .embed import Embedder, chex_similarity, embed_similarity
from .labeler import label_report
from .lexical import bleu_2, meteor_simplified, rouge_l
from .radgraph import radgraph_f1_proxy

TASKS = ("generation", "summarization")
TABLE_COLUMNS = ("R-L", "M", "B-2", "BS", "CX", "RG", "RC")
AUC_MIN_POSITIVES = 20
PROXY_NOTE = ("BS, CX and RG are proxies computed with artifact-local components "
              "(LM token embeddings and a lexicon extractor); RC is a linear composite with fixed weights.")


def score_pair(ref: str, hyp: str, embedder: Embedder) -> dict[str, float]:
    m = {
        "R-L": rouge_l(ref, hyp)["f"],
        "M": meteor_simplified(ref, hyp),
        "B-2": bleu_2(ref, hyp),
        "BS": embed_similarity(ref, hyp, embedder),
        "CX": chex_similarity(ref, hyp, embedder),
        "RG": radgraph_f1_proxy(ref, hyp),
    }
    m["RC"] = radcliq_proxy({"bleu_2": m["B-2"], "embed_sim": m["BS"], "chex_sim": m["CX"], "radgraph_f1": m["RG"]})
    return m


def task_inputs(records: Sequence[CorpusRecord], task: str) -> list[tuple[str, str]]:
    """(instruction, reference) per record for one task."""
    out = []
    for r in records:
        secs = r.sections or {}
        if task == "generation":
            out.append((CANONICAL_REPORT_PROMPT, secs["findings_text"]))
        elif task == "summarization":
            out.append((summary_instruction(CANONICAL_SUMMARY_PROMPT, secs["findings_text"]), secs["impression_text"]))
        else:
            raise ValueError(f"unknown task {task!r}")
    return out


def token_budget(bundle: ModelBundle, instructions: Sequence[str], max_new_tokens: int) -> int:
    longest = max(len(bundle.prompt_ids(i)) for i in instructions)
    return max(1, min(max_new_tokens, bundle.cfg.max_context - bundle.cfg.n_patches - longest))


def generate_texts(bundle: ModelBundle, images: Sequence[np.ndarray], instructions: Sequence[str],
                   max_new_tokens: int, chunk: int = 64) -> list[str]:
    budget = token_budget(bundle, instructions, max_new_tokens)
    out = []
    idx = list(range(len(images)))
    for part in iter_chunks(idx, chunk):
        ids = generate_ids_batch(bundle, [images[i] for i in part], [instructions[i] for i in part], budget)
        out += [decode(g, bundle.vocab) for g in ids]
    return out


def _mean(rows: list[dict[str, float]]) -> dict[str, float]:
    return {c: float(np.mean([r[c] for r in rows])) if rows else 0.0 for c in TABLE_COLUMNS}


def auc_table(records: Sequence[CorpusRecord], hypotheses: Sequence[str]) -> dict[str, dict]:
    scores = [label_report(h).scores for h in hypotheses]
    table = {}
    for j, f in enumerate(FINDINGS):
        labels = [f in r.labels() for r in records]
        n_pos = int(sum(labels))
        try:
            value = auc([s[j] for s in scores], labels)
        except DegenerateLabels:
            value = None
        table[f] = {"auc": value, "positives": n_pos, "negatives": len(labels) - n_pos}
    return table


def evaluate_bundle(bundle: ModelBundle, records: Sequence[CorpusRecord], embedder: Embedder | None = None,
                    max_new_tokens: int = 80, split: str = "test", tasks: Sequence[str] = TASKS,
                    with_auc: bool = True, chunk: int = 64) -> dict:
    """Metric report: per-instance rows and means per task, plus the AUC table."""
    recs = [r for r in records if r.split == split]
    if not recs:
        raise ValueError(f"no records in split {split!r}")
    embedder = embedder or Embedder.from_bundle(bundle)
    report: dict = {"n_instances": len(recs), "split": split, "note": PROXY_NOTE, "columns": list(TABLE_COLUMNS)}
    images = [r.image for r in recs]
    with single_threaded():
        for task in tasks:
            pairs = task_inputs(recs, task)
            hyps = generate_texts(bundle, images, [p[0] for p in pairs], max_new_tokens, chunk)
            rows = []
            for r, (_, ref), hyp in zip(recs, pairs, hyps):
                rows.append({"record_id": r.record_id, "reference": ref, "hypothesis": hyp,
                             **score_pair(ref, hyp, embedder)})
            report[task] = {"mean": _mean(rows), "rows": rows}
            if task == "generation" and with_auc:
                report["auc"] = auc_table(recs, hyps)
    return report


def format_table(rows: dict[str, dict[str, dict[str, float]]]) -> str:
    """Plain-text table: one line per setting, generation then summarization columns."""
    head = ["setting"] + [f"gen {c}" for c in TABLE_COLUMNS] + [f"sum {c}" for c in TABLE_COLUMNS]
    lines = ["\t".join(head)]
    for name, tasks in rows.items():
        vals = [f"{tasks[t][c]:.4f}" for t in TASKS for c in TABLE_COLUMNS]
        lines.append("\t".join([name] + vals))
    return "\n".join(lines)
