"""Acceptance gate: one test per headline criterion, each reported as a PASS/FAIL line.

The slow criteria (full training for the AUC check, five ablation seeds) share
module-scoped fixtures so each expensive run happens once.
"""
import json
import time

import numpy as np
import pytest

from cxrgen import tensor as T
from cxrgen.cli import main
from cxrgen.evaluation.auc import auc
from cxrgen.evaluation.composite import radcliq_proxy
from cxrgen.evaluation.embed import Embedder, chex_similarity, embed_similarity
from cxrgen.evaluation.labeler import label_report
from cxrgen.evaluation.latency import latency_harness
from cxrgen.evaluation.lexical import bleu_2, meteor_simplified, rouge_l
from cxrgen.evaluation.radgraph import extract_graph, radgraph_f1_proxy
from cxrgen.evaluation.report import AUC_MIN_POSITIVES, evaluate_bundle
from cxrgen.model import ModelBundle, ModelConfig, generate_batch
from cxrgen.radex.corpus import build_corpus, caption_text
from cxrgen.radex.findings import FINDINGS, LATERAL, LUNG_FINDINGS, FindingSpec, finding_phrase, finding_sentence
from cxrgen.tensor import Tensor, finite_diff_check
from cxrgen.trainer import (
    StageConfig, TrainState, WarmupConfig, ablation_stage_configs, default_stage_configs, loss_stage1,
    loss_stage2, loss_stage3, make_batch, run_ablation, run_pipeline, sequence_nll, train_step,
)
from cxrgen.tokenizer import build_vocab, decode, encode

from oracles import (
    auc_oracle, bleu_2_oracle, lcs_oracle, meteor_oracle, radgraph_oracle, random_pairs, rouge_l_oracle, toks,
)

SEEDS = range(10)


def detail(request, text):
    request.node.criterion_detail = text


# ------------------------------------------------------------- gradients


def _op_cases(rng):
    """(name, function of the inputs, inputs) for every differentiable op."""
    x = lambda *s: Tensor(rng.normal(size=s))
    mask = np.where(np.tri(4, 5, 1) > 0, 0.0, -np.inf)
    return [
        ("add", lambda a, b: T.add(a, b), [x(3, 4), x(3, 4)]),
        ("add_bias", lambda a, b: T.add(a, b), [x(2, 3, 4), x(4)]),
        ("add_scalar", lambda a: T.add_scalar(a, 1.5), [x(3, 4)]),
        ("sub", lambda a, b: T.sub(a, b), [x(3, 4), x(3, 4)]),
        ("mul", lambda a, b: T.mul(a, b), [x(3, 4), x(3, 4)]),
        ("scale", lambda a: T.scale(a, -0.7), [x(3, 4)]),
        ("gelu", lambda a: T.gelu(a), [x(3, 4)]),
        ("layernorm", lambda a, g, b: T.layernorm(a, g, b), [x(3, 6), x(6), x(6)]),
        ("matmul", lambda a, b: T.matmul(a, b), [x(3, 4), x(4, 2)]),
        ("bmm", lambda a, b: T.bmm(a, b), [x(2, 3, 4), x(2, 4, 2)]),
        ("reshape", lambda a: T.reshape(a, (4, 3)), [x(3, 4)]),
        ("transpose", lambda a: T.transpose(a, (1, 2, 0)), [x(2, 3, 4)]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [x(3, 2), x(3, 4)]),
        ("take_rows", lambda a: T.take_rows(a, [2, 0, 2]), [x(4, 3)]),
        ("embedding_lookup", lambda a: T.embedding_lookup(a, [[1, 3], [3, 0]]), [x(5, 3)]),
        ("sum_all", lambda a: T.reshape(T.sum_all(a), (1,)), [x(3, 4)]),
        ("mean", lambda a: T.reshape(T.mean(a), (1,)), [x(3, 4)]),
        ("l2_norm_sq", lambda a: T.reshape(T.l2_norm_sq(a), (1,)), [x(3, 4)]),
        ("softmax", lambda a: T.softmax(a), [x(3, 5)]),
        ("softmax_masked", lambda a: T.softmax(a, mask), [x(4, 5)]),
        ("softmax_cross_entropy", lambda a: T.reshape(T.softmax_cross_entropy(a, [1, 0, 4]), (1,)), [x(3, 5)]),
    ]


GRAD_CFG = ModelConfig(patch_size=8, e_dim=8, e_layers=1, e_heads=2, p_hidden=8, l_dim=8, l_layers=1, l_heads=2,
                       init_std=0.3)
GRAD_TEXT = "the heart size is normal . there is a small left pleural effusion . no pneumothorax"


def _stage_losses(seed):
    """(name, loss closure, parameters to check) for the three stage objectives on a random bundle."""
    rng = np.random.default_rng(100 + seed)
    base = ModelBundle.init(build_vocab([GRAD_TEXT], 32), seed, GRAD_CFG)
    imgs = list(rng.uniform(0, 1, (2, 32, 32)))
    out = []
    b1 = base.copy()
    b1.set_freeze(E=True, L=True, P=False)
    out.append(("stage1", lambda: loss_stage1(b1, imgs, ["small left pleural effusion", "no pneumothorax"]), b1))
    b2 = base.copy()
    b2.set_freeze(E=False, P=False, L=False)
    out.append(("stage2", lambda: loss_stage2(b2, imgs, ["is there effusion", ""], ["small effusion", "heart normal"],
                                              0.01), b2))
    b3 = base.copy()
    b3.set_freeze(E=False, P=False, L=False)
    rep = make_batch(b3, imgs[:1], [""], ["there is a small left pleural effusion"])
    ins = make_batch(b3, imgs[1:], ["summarize the heart size is normal"], ["normal heart"])
    out.append(("stage3", lambda: loss_stage3(b3, rep, ins, (1.0, 0.5, 0.01)), b3))
    return out


def _abs_grad_gap(loss_fn, p, idx, h=1e-5):
    """Largest |analytic| or |central difference| over coordinates whose gradient should vanish."""
    T.zero_grads([p])
    p.requires_grad = True
    T.backward(loss_fn())
    gap = float(np.abs(p.grad.reshape(-1)[idx]).max())
    flat = p.data.reshape(-1)
    with T.no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            gap = max(gap, abs(fp - fm) / (2 * h))
    return gap


@pytest.mark.criterion("gradient correctness: every op and stage loss, 10 seeds, < 1e-4, < 60 s")
def test_gradient_correctness(request):
    t0 = time.perf_counter()
    worst, zero_grad_gap = {}, 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        for name, fn, inputs in _op_cases(rng):
            readout_rng = np.random.default_rng(1000 + seed)
            out_shape = fn(*inputs).shape
            r = Tensor(readout_rng.normal(size=out_shape))
            for i, target in enumerate(inputs):
                f = lambda _x, fn=fn, inputs=inputs: T.sum_all(T.mul(fn(*inputs), r))
                worst[name] = max(worst.get(name, 0.0), finite_diff_check(f, target))
        for name, loss_fn, bundle in _stage_losses(seed):
            pick = np.random.default_rng(seed)
            for pname, p in bundle.trainable_parameters().items():
                idx = pick.choice(p.data.size, size=min(3, p.data.size), replace=False)
                if pname.endswith("attn.bk"):
                    # softmax ignores a per-row constant, so the key bias gets an exactly zero
                    # gradient; relative error is meaningless there, check the zero absolutely
                    zero_grad_gap = max(zero_grad_gap, _abs_grad_gap(loss_fn, p, idx))
                    continue
                err = finite_diff_check(lambda _x: loss_fn(), p, indices=idx)
                worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    detail(request, f"max relative error {max(worst.values()):.1e} over {len(worst)} ops and losses, "
                    f"key-bias zero gradient within {zero_grad_gap:.0e}, {elapsed:.1f} s")
    assert not bad, bad
    assert zero_grad_gap < 1e-8
    assert elapsed < 60


# ------------------------------------------------------------------ freeze


@pytest.fixture(scope="module")
def corpus0():
    return build_corpus(2000, seed=0)


@pytest.mark.criterion("freeze invariance: 100 stage-1 steps leave E and L bit-identical, move every P weight")
def test_freeze_invariance(request, corpus0):
    from cxrgen.trainer import init_bundle, stage_pools, stage_schedule

    bundle = init_bundle(corpus0, 0)
    before = {k: v.copy() for k, v in bundle.state_arrays().items()}
    cfg = StageConfig(1, learning_rate=3e-3, epochs=10, max_steps=100)
    schedule = stage_schedule(cfg, stage_pools(corpus0, cfg), 0)
    assert len(schedule) == 100
    state = TrainState(bundle, 0)
    state.begin_stage(cfg, len(schedule))
    with T.single_threaded():
        for step in schedule:
            recs = step["main"]
            train_step(state, lambda: loss_stage1(bundle, [r.image for r in recs], [r.target for r in recs]))
    after = bundle.state_arrays()
    frozen_same = all(np.array_equal(before[k], after[k]) for k in before if k[0] in "EL")
    moved = [float(np.mean(before[k] != after[k])) for k in before if k[0] == "P"]
    detail(request, f"E/L identical: {frozen_same}; fraction of P weights changed: {min(moved):.4f}")
    assert frozen_same
    assert min(moved) == 1.0


# -------------------------------------------------------------- composition


@pytest.mark.criterion("loss composition: lambda=0 equals CE to 1e-12, stage 3 linear in alpha to 1e-9")
def test_loss_composition(request, corpus0):
    from cxrgen.trainer import init_bundle

    rng = np.random.default_rng(0)
    worst_ce, worst_lin = 0.0, 0.0
    for seed in range(5):
        bundle = init_bundle(corpus0, seed)
        bundle.set_freeze(E=False, P=False, L=False)
        recs = [corpus0[i] for i in rng.choice(len(corpus0), 6, replace=False)]
        args = ([r.image for r in recs[:3]], [r.instruction for r in recs[:3]], [r.target for r in recs[:3]])
        ce = sequence_nll(bundle, make_batch(bundle, *args)).item()
        worst_ce = max(worst_ce, abs(loss_stage2(bundle, *args, lam=0.0).item() - ce))
        rep = make_batch(bundle, [r.image for r in recs[3:5]], ["", ""], [r.target for r in recs[3:5]])
        ins = make_batch(bundle, [recs[5].image], [recs[5].instruction], [recs[5].target])
        for _ in range(4):
            a, a2 = tuple(rng.uniform(0, 2, 3)), tuple(rng.uniform(0, 2, 3))
            lhs = loss_stage3(bundle, rep, ins, tuple(x + y for x, y in zip(a, a2))).item()
            rhs = loss_stage3(bundle, rep, ins, a).item() + loss_stage3(bundle, rep, ins, a2).item()
            worst_lin = max(worst_lin, abs(lhs - rhs))
    detail(request, f"lambda=0 gap {worst_ce:.1e}, linearity gap {worst_lin:.1e}")
    assert worst_ce < 1e-12 and worst_lin < 1e-9


# ------------------------------------------------------------------ overfit


@pytest.mark.criterion("overfit: 8 captions below 0.01 NLL/token within 2000 steps, < 5 min, verbatim decode")
def test_overfit_eight_captions(request, corpus0):
    from cxrgen.trainer import init_bundle

    recs = [r for r in corpus0 if r.kind == "caption" and r.split == "train"][:8]
    bundle = init_bundle(corpus0, 0)
    cfg = StageConfig(2, learning_rate=1e-3, lam=0.0, warmup_ratio=0.0, epochs=2000)
    state = TrainState(bundle, 0)
    state.begin_stage(cfg, 2000)
    images, captions = [r.image for r in recs], [r.target for r in recs]
    t0 = time.perf_counter()
    loss, steps = float("inf"), 0
    with T.single_threaded():
        while steps < 2000 and loss >= 0.01:
            loss = train_step(state, lambda: loss_stage2(bundle, images, [""] * 8, captions, 0.0))
            steps += 1
        elapsed = time.perf_counter() - t0
        with T.no_grad():
            final = sequence_nll(bundle, make_batch(bundle, images, [""] * 8, captions)).item()
        decoded = generate_batch(bundle, images, [""] * 8, max_new_tokens=60)
    exact = sum(d == decode(encode(c, bundle.vocab), bundle.vocab) for d, c in zip(decoded, captions))
    detail(request, f"NLL {final:.4f} after {steps} steps, {elapsed:.0f} s, {exact}/8 verbatim")
    assert final < 0.01 and steps <= 2000 and elapsed < 300
    assert exact == 8, list(zip(decoded, captions))


# ---------------------------------------------------------------- ablation

ABLATION_SEEDS = range(5)


@pytest.fixture(scope="module")
def ablation_results():
    t0 = time.perf_counter()
    results = [run_ablation(build_corpus(2000, seed=s), s) for s in ABLATION_SEEDS]
    return results, time.perf_counter() - t0


@pytest.mark.criterion("ablation ordering: full >= (b) >= (a) >= baseline on test ROUGE-L in >= 4 of 5 seeds, < 30 min")
def test_ablation_ordering(request, ablation_results):
    results, elapsed = ablation_results
    held, cells = 0, []
    for res in results:
        rl = [res["rows"][k]["generation"]["R-L"] for k in ("baseline", "(a)", "(b)", "full")]
        cells.append("/".join(f"{v:.3f}" for v in rl))
        held += rl[3] >= rl[2] >= rl[1] >= rl[0]
    detail(request, f"{held}/5 seeds ordered, {elapsed / 60:.1f} min; R-L base/(a)/(b)/full: {'; '.join(cells)}")
    assert held >= 4
    assert elapsed < 30 * 60


# ----------------------------------------------------------------- metrics


@pytest.mark.criterion("metric oracles: five metrics match brute-force oracles on 100 cases to 1e-10, plus fixture")
def test_metric_oracles(request):
    pairs = random_pairs(100, seed=42, max_len=10)
    gaps = {
        "rouge_l": max(abs(rouge_l(a, b)["f"] - rouge_l_oracle(a, b)) for a, b in pairs),
        "bleu_2": max(abs(bleu_2(a, b) - bleu_2_oracle(a, b)) for a, b in pairs),
        "meteor": max(abs(meteor_simplified(a, b) - meteor_oracle(a, b)) for a, b in pairs),
    }
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(100):
        s = rng.choice([0.0, 0.5, 1.0], size=30)
        y = rng.random(30) < 0.3
        y[:2] = [True, False]
        worst = max(worst, abs(auc(s, y) - auc_oracle(s, y)))
    gaps["auc"] = worst
    texts = [r.sections["findings_text"] for r in build_corpus(200, seed=42) if r.sections]
    worst = 0.0
    for i in range(100):
        a, b = texts[int(rng.integers(len(texts)))], texts[int(rng.integers(len(texts)))]
        worst = max(worst, abs(radgraph_f1_proxy(a, b) - radgraph_oracle(extract_graph(a), extract_graph(b))))
    gaps["radgraph_f1"] = worst
    ref, hyp = "no acute cardiopulmonary abnormality", "no acute abnormality"
    lcs = lcs_oracle(toks(ref), toks(hyp))
    expected = 2 * (lcs / 3) * (lcs / 4) / (lcs / 3 + lcs / 4)
    fixture_gap = abs(rouge_l(ref, hyp)["f"] - expected)
    detail(request, ", ".join(f"{k} {v:.1e}" for k, v in gaps.items()) + f"; fixture gap {fixture_gap:.1e}")
    assert all(v < 1e-10 for v in gaps.values())
    assert fixture_gap < 1e-6


# --------------------------------------------------------- labeler and AUC


@pytest.fixture(scope="module")
def trained(corpus0):
    """Default warm-up plus all three stages on the seed-0 corpus, evaluated on its test split."""
    result = run_pipeline(default_stage_configs(), corpus0, 0, warmup=WarmupConfig())
    bundle = result.state.bundle
    report = evaluate_bundle(bundle, corpus0, Embedder.from_bundle(bundle))
    return bundle, report


@pytest.mark.criterion("labeler fidelity: >= 95% agreement on 500 reports; AUC > 0.80 per finding with >= 20 positives")
def test_labeler_and_auc(request, trained):
    recs = build_corpus(500, seed=123)
    agree = sum(label_report(r.sections["findings_text"] if r.sections else r.target).positives() == r.labels()
                for r in recs) / len(recs)
    _, report = trained
    counted = {f: v["auc"] for f, v in report["auc"].items() if v["positives"] >= AUC_MIN_POSITIVES}
    low = {f: round(a, 3) for f, a in counted.items() if not a > 0.8}
    detail(request, f"agreement {agree:.3f}; {len(counted)} findings counted, min AUC "
                    f"{min(counted.values()):.3f}" + (f"; below 0.80: {low}" if low else ""))
    assert agree >= 0.95
    assert counted and not low


# The normal-anatomy statement that contradicts each finding's positive sentence.
ANTONYMS = {
    "Pleural Effusion": "No pleural effusion is seen.",
    "Pneumothorax": "No pneumothorax is seen.",
    "Cardiomegaly": "The heart size is within normal limits.",
    "Enlarged Cardiomediastinum": "The cardiomediastinal contours are within normal limits.",
    "Fracture": "No acute osseous abnormality.",
    **{f: "The lungs are clear." for f in LUNG_FINDINGS},
}


def paraphrase_margins(sim, emb) -> np.ndarray:
    """sim(sentence, phrase) - sim(sentence, antonym) over the whole phrase bank."""
    out = []
    for f, antonym in ANTONYMS.items():
        lats = ("left", "right", "bilateral") if f in LATERAL else ("none",)
        for lat in lats:
            for sev in ("small", "moderate", "large"):
                spec = FindingSpec(f, lat, sev)
                sentence = finding_sentence(spec)
                out.append(sim(sentence, finding_phrase(spec), emb) - sim(sentence, antonym, emb))
    return np.array(out)


def test_trained_embedder_ranks_paraphrase_above_antonym(trained):
    bundle, _ = trained
    margins = paraphrase_margins(embed_similarity, Embedder.from_bundle(bundle))
    assert len(margins) == 81
    assert margins.mean() > 0
    assert (margins > 0).sum() > len(margins) / 2


@pytest.mark.xfail(strict=True, reason="mean-pooled static token vectors do not encode negation")
def test_pooled_embedder_ranks_paraphrase_above_antonym(trained):
    bundle, _ = trained
    margins = paraphrase_margins(chex_similarity, Embedder.from_bundle(bundle))
    assert margins.mean() > 0


# ---------------------------------------------------------------- RadCliQ


@pytest.mark.criterion("RadCliQ monotonicity: raising any one component strictly lowers the composite (1000 vectors)")
def test_radcliq_monotone(request):
    rng = np.random.default_rng(7)
    keys = ("bleu_2", "embed_sim", "chex_sim", "radgraph_f1")
    checked = 0
    for _ in range(1000):
        m = dict(zip(keys, rng.uniform(-1, 1, 4)))
        base = radcliq_proxy(m)
        for k in keys:
            bumped = dict(m, **{k: m[k] + float(rng.uniform(1e-6, 0.5))})
            assert radcliq_proxy(bumped) < base, (m, k)
            checked += 1
    detail(request, f"{checked} single-component increases, all strictly lower")


# ------------------------------------------------------------- determinism

SHORT_RUN = """\
[warmup]
max_steps = 30

[stage1]
max_steps = 20

[stage2]
max_steps = 30

[stage3]
max_steps = 30
"""


@pytest.mark.criterion("determinism: two end-to-end runs with one seed give byte-identical metric reports")
def test_end_to_end_determinism(request, tmp_path):
    cfg = tmp_path / "short.ini"
    cfg.write_text(SHORT_RUN)
    for name in ("a", "b"):
        assert main(["pipeline", "--n", "2000", "--seed", "11", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "metrics.json").read_bytes()
    b = (tmp_path / "b" / "metrics.json").read_bytes()
    ckpts = all((tmp_path / "a" / f"stage{k}.ckpt").read_bytes() == (tmp_path / "b" / f"stage{k}.ckpt").read_bytes()
                for k in (1, 2, 3))
    detail(request, f"metrics.json {len(a)} bytes, identical: {a == b}; checkpoints identical: {ckpts}")
    assert a == b and ckpts
    n_test = sum(json.loads(line)["split"] == "test" for line in (tmp_path / "a" / "corpus.jsonl").open())
    assert json.loads(a)["n_instances"] == n_test


# ----------------------------------------------------------------- latency


@pytest.mark.criterion("latency validity: mean within [min, max]; doubling generation length does not lower the mean")
def test_latency_harness(request, trained, corpus0):
    bundle, _ = trained
    test = [r for r in corpus0 if r.split == "test"][:20]
    short = latency_harness(bundle, test, repeats=2, max_new_tokens=20, stop_at_eos=False)
    long = latency_harness(bundle, test, repeats=2, max_new_tokens=40, stop_at_eos=False)
    lines = []
    for task in short:
        for stats in (short[task], long[task]):
            assert stats["min"] <= stats["mean"] <= stats["max"]
            assert stats["n"] == 40
        assert long[task]["max_new_tokens"] == 2 * short[task]["max_new_tokens"]
        lines.append(f"{task} {short[task]['mean'] * 1e3:.1f} -> {long[task]['mean'] * 1e3:.1f} ms")
        assert long[task]["mean"] >= short[task]["mean"]
    detail(request, "; ".join(lines))
