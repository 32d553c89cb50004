import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cxrgen.errors import DegenerateLabels, EmbedderMissing, MissingComponent
from cxrgen.evaluation.auc import auc
from cxrgen.evaluation.composite import radcliq_proxy
from cxrgen.evaluation.embed import Embedder, chex_similarity, embed_similarity
from cxrgen.evaluation.labeler import label_report, lexicon
from cxrgen.evaluation.lexical import bleu_2, meteor_simplified, rouge_l
from cxrgen.evaluation.radgraph import extract_graph, radgraph_f1_proxy
from cxrgen.radex.corpus import build_corpus
from cxrgen.radex.findings import FINDINGS
from cxrgen.tokenizer import build_vocab

from oracles import (
    auc_oracle, bleu_2_oracle, meteor_oracle, radgraph_oracle, random_pairs, rouge_l_oracle, toks,
)

PAIRS = random_pairs(100, seed=0)


# ------------------------------------------------------------------ ROUGE-L


def test_rouge_fixture():
    r = rouge_l("no acute cardiopulmonary abnormality", "no acute abnormality")
    assert r["precision"] == 1.0 and r["recall"] == 0.75
    assert abs(r["f"] - 6 / 7) < 1e-12


def test_rouge_edges():
    assert rouge_l("the heart is normal", "the heart is normal")["f"] == 1.0
    assert rouge_l("the heart", "lungs clear")["f"] == 0.0
    assert rouge_l("the heart", "") == {"precision": 0.0, "recall": 0.0, "f": 0.0}


def test_rouge_oracle():
    assert max(abs(rouge_l(a, b)["f"] - rouge_l_oracle(a, b)) for a, b in PAIRS) < 1e-10


# -------------------------------------------------------------------- BLEU


def test_bleu_identity_and_brevity():
    s = "the heart size is normal"
    assert abs(bleu_2(s, s) - 1.0) < 1e-12
    assert abs(bleu_2(s, "the heart size") - math.exp(1 - 5 / 3)) < 1e-9


def test_bleu_oracle():
    assert max(abs(bleu_2(a, b) - bleu_2_oracle(a, b)) for a, b in PAIRS) < 1e-10


def test_bleu_zero_bigram_near_zero():
    assert bleu_2("heart normal", "normal heart x") < 1e-3


# ------------------------------------------------------------------ METEOR


def test_meteor_identity_value():
    assert abs(meteor_simplified("a b c d e", "a b c d e") - (1 - 0.5 * (1 / 5) ** 3)) < 1e-12


def test_meteor_zero_and_order():
    assert meteor_simplified("the heart", "lungs clear") == 0.0
    ref = "the heart size is normal"
    assert meteor_simplified(ref, "normal is size heart the") < meteor_simplified(ref, ref)


def test_meteor_oracle():
    assert max(abs(meteor_simplified(a, b) - meteor_oracle(a, b)) for a, b in PAIRS) < 1e-10


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_identity_is_max_and_shuffles_never_help(seed):
    a, b = random_pairs(1, seed)[0]
    shuffled = " ".join(np.random.default_rng(seed).permutation(toks(a)))
    assert rouge_l(a, a)["f"] == 1.0 and abs(bleu_2(a, a) - 1.0) < 1e-9
    assert rouge_l(a, shuffled)["f"] <= rouge_l(a, a)["f"]
    assert meteor_simplified(a, shuffled) <= meteor_simplified(a, a)
    assert meteor_simplified(a, b) <= meteor_simplified(a, a) + 1e-12
    # LCS is bounded by the bag overlap
    ra, rb = toks(a), toks(b)
    overlap = sum(min(ra.count(w), rb.count(w)) for w in set(rb))
    assert rouge_l(a, b)["f"] <= 2 * overlap / (len(ra) + len(rb)) + 1e-12


# --------------------------------------------------------------------- AUC


def test_auc_edges():
    assert auc([0.1, 0.2, 0.8, 0.9], [False, False, True, True]) == 1.0
    assert auc([0.5] * 6, [True, False] * 3) == 0.5
    with pytest.raises(DegenerateLabels):
        auc([0.1, 0.2], [True, True])


def test_auc_oracle_twenty_points():
    rng = np.random.default_rng(3)
    for _ in range(100):
        s = rng.choice([0.0, 0.5, 1.0, 0.25], size=20)
        y = rng.random(20) < 0.4
        y[0], y[1] = True, False
        assert abs(auc(s, y) - auc_oracle(s, y)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_auc_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=15).round(1)
    y = np.arange(15) % 3 == 0
    assert abs(auc(s, y) - auc(np.exp(2 * s) + 7, y)) < 1e-12


# ----------------------------------------------------------------- labeler


def test_labeler_fixtures():
    v = label_report("No evidence of pneumothorax or pleural effusion.")
    assert v.status("Pneumothorax") == "negative" and v.status("Pleural Effusion") == "negative"
    assert label_report("Small right pleural effusion.").status("Pleural Effusion") == "positive"
    v = label_report("Superimposed hilar adenopathy is difficult to exclude.")
    assert lexicon()[("hilar", "adenopathy")] == "Enlarged Cardiomediastinum"
    assert v.status("Enlarged Cardiomediastinum") == "uncertain"


def test_label_vector_shape_and_scores():
    v = label_report("There is a small left pleural effusion. Cardiomegaly may be present. No pneumothorax.")
    assert len(v.statuses) == 14 and len(v.scores) == 14
    assert v.scores[FINDINGS.index("Pleural Effusion")] == 1.0
    assert v.scores[FINDINGS.index("Cardiomegaly")] == 0.5
    assert v.scores[FINDINGS.index("Pneumothorax")] == 0.0
    assert v.status("Edema") == "absent" and v.status("No Finding") == "absent"
    assert label_report("The lungs are clear.").status("No Finding") == "positive"


def test_labeler_agreement_on_synthetic_reports():
    recs = [r for r in build_corpus(500, seed=11)]
    agree = sum(label_report(r.sections["findings_text"]).positives() == r.labels() for r in recs)
    assert agree / len(recs) >= 0.95


def test_labeler_pure():
    text = "There is a small nodule in the right upper lung. No pneumothorax."
    assert label_report(text) == label_report(text)


# ---------------------------------------------------------------- RadGraph


def test_radgraph_constructed_pair():
    ref = "Small right pleural effusion and pneumothorax."
    hyp = "Small right pleural effusion and edema."
    # entities: 2 of 3 shared; relations: 1 of 2 shared
    f1_e, f1_r = 2 * 2 / (3 + 3), 2 * 1 / (2 + 2)
    assert len(extract_graph(ref).entities) == 3 and len(extract_graph(ref).relations) == 2
    assert abs(radgraph_f1_proxy(ref, hyp) - (f1_e + f1_r) / 2) < 1e-12


def test_radgraph_edges():
    t = "There is a small nodule in the right upper lung."
    assert radgraph_f1_proxy(t, t) == 1.0
    assert radgraph_f1_proxy(t, "zebra quartz") == 0.0


def test_radgraph_oracle():
    corpus = [r.sections["findings_text"] for r in build_corpus(60, seed=5) if r.sections]
    rng = np.random.default_rng(9)
    for _ in range(100):
        a, b = (corpus[int(i)] for i in rng.integers(len(corpus), size=2))
        assert abs(radgraph_f1_proxy(a, b) - radgraph_oracle(extract_graph(a), extract_graph(b))) < 1e-10


# --------------------------------------------------------------- composite


def test_radcliq_arithmetic():
    m = {"bleu_2": 0.1, "embed_sim": 0.2, "chex_sim": 0.3, "radgraph_f1": 0.2}
    assert abs(radcliq_proxy(m) - 2.45) < 1e-12
    with pytest.raises(MissingComponent):
        radcliq_proxy({"bleu_2": 0.1})


def test_radcliq_maxima_minimal():
    best = radcliq_proxy({"bleu_2": 1, "embed_sim": 1, "chex_sim": 1, "radgraph_f1": 1})
    rng = np.random.default_rng(0)
    for _ in range(50):
        m = dict(zip(("bleu_2", "embed_sim", "chex_sim", "radgraph_f1"), rng.uniform(0, 1, 4)))
        assert radcliq_proxy(m) >= best


def test_radcliq_argmin_scale_invariant():
    rng = np.random.default_rng(1)
    cands = [dict(zip(("bleu_2", "embed_sim", "chex_sim", "radgraph_f1"), rng.uniform(0, 1, 4))) for _ in range(20)]
    w = (0.3, 1.2, 0.7, 2.0)
    pick = lambda ws: min(range(20), key=lambda i: radcliq_proxy(cands[i], ws, offset=0.0))
    assert pick(w) == pick(tuple(5 * x for x in w))


# -------------------------------------------------------------- embeddings


@pytest.fixture(scope="module")
def embedder():
    vocab = build_vocab(["the heart is normal small large effusion lungs clear"], 32)
    table = np.random.default_rng(0).normal(size=(len(vocab), 8))
    return Embedder(table, vocab)


def test_embed_identity_and_empty(embedder):
    s = "the heart is normal"
    assert abs(embed_similarity(s, s, embedder) - 1.0) < 1e-12
    assert abs(chex_similarity(s, s, embedder) - 1.0) < 1e-12
    assert embed_similarity(s, "", embedder) == 0.0 and chex_similarity(s, "", embedder) == 0.0
    with pytest.raises(EmbedderMissing):
        embed_similarity(s, s, None)


def test_embed_bounds(embedder):
    for a, b in random_pairs(30, 2):
        assert -1 <= embed_similarity(a, b, embedder) <= 1
        assert -1 <= chex_similarity(a, b, embedder) <= 1
