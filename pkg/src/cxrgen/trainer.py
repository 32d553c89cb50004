"""Three-stage curriculum: recognition, reasoning, reporting.

Stage 1 trains only the projector on caption pairs (empty instruction).
Stage 2 trains every component on instruction pairs with an L2 penalty.
Stage 3 trains every component on a weighted sum of a report-generation NLL,
an instruction-following (summarization) NLL and the L2 penalty.

Each stage starts a fresh Adam state and learning-rate schedule from the
previous stage's final parameters. All randomness comes from one integer seed
through named sub-streams, so a stage can be rerun from its predecessor's
checkpoint and reproduce the same trajectory.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import file_sha256, save_checkpoint
from .errors import (
    EmptyTermWithPositiveAlpha, FrozenSetViolation, MissingConfig, MissingSampleKind, NegativeLambda,
    NoGradients, StageFailure, ValidationError,
)
from .model import COMPONENTS, ModelBundle, ModelConfig
from .radex.corpus import KINDS, CorpusRecord, caption_text, sub_rng
from .tensor import Tensor
from .tokenizer import EOS, Vocab, build_vocab, encode

STAGE_TRAINABLE = {1: frozenset({"P"}), 2: frozenset(COMPONENTS), 3: frozenset(COMPONENTS)}
STAGE_KINDS = {1: ("caption",), 2: ("instruction",), 3: ("report", "summarization-pair")}
SCHEDULERS = ("cosine",)
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class StageConfig:
    stage_id: int
    trainable: frozenset = frozenset()
    lam: float = 0.01
    alphas: tuple[float, float, float] = (1.0, 1.0, 0.01)
    learning_rate: float = 1e-4
    epochs: int = 1
    batch_size: int = 8
    warmup_ratio: float = 0.03
    scheduler: str = "cosine"
    weight_decay: float = 0.0
    kinds: tuple[str, ...] = ()
    max_steps: int = 0  # 0 means no cap
    report_fraction: float = 0.5  # stage 3: share of each batch drawn from the report pool

    def __post_init__(self):
        if self.stage_id not in STAGE_TRAINABLE:
            raise ValidationError(f"stage_id must be 1, 2 or 3, got {self.stage_id}")
        trainable = frozenset(self.trainable) or STAGE_TRAINABLE[self.stage_id]
        object.__setattr__(self, "trainable", trainable)
        if trainable != STAGE_TRAINABLE[self.stage_id]:
            raise FrozenSetViolation(
                f"stage {self.stage_id} must train exactly {sorted(STAGE_TRAINABLE[self.stage_id])}, "
                f"got {sorted(trainable)}"
            )
        if self.lam < 0:
            raise NegativeLambda(f"lambda must be >= 0, got {self.lam}")
        alphas = tuple(float(a) for a in self.alphas)
        if len(alphas) != 3 or any(a < 0 for a in alphas):
            raise ValidationError(f"alphas must be three nonnegative numbers, got {self.alphas}")
        object.__setattr__(self, "alphas", alphas)
        if self.learning_rate <= 0 or self.epochs < 0 or self.batch_size < 1 or self.max_steps < 0:
            raise ValidationError("learning_rate > 0, epochs >= 0, batch_size >= 1 and max_steps >= 0 required")
        if self.stage_id == 3 and self.batch_size < 2:
            raise ValidationError("stage 3 batches need room for both tasks (batch_size >= 2)")
        if not 0 <= self.warmup_ratio < 1:
            raise ValidationError("warmup_ratio must lie in [0, 1)")
        if self.scheduler not in SCHEDULERS:
            raise ValidationError(f"unknown scheduler {self.scheduler!r}")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if not 0 < self.report_fraction < 1:
            raise ValidationError("report_fraction must lie in (0, 1)")
        object.__setattr__(self, "kinds", tuple(self.kinds) or STAGE_KINDS[self.stage_id])

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["trainable"] = sorted(self.trainable)
        d["alphas"] = list(self.alphas)
        d["kinds"] = list(self.kinds)
        return d


@dataclass(frozen=True)
class WarmupConfig:
    """Pretraining stand-in run before stage 1 (stage id 0).

    The recognition stage only moves the projector and relies on a vision
    encoder that already extracts stable features and a language model that
    already writes the target language and attends to prefix embeddings; at
    desk scale there are no pretrained ones to import. The ``trainable``
    components are therefore first trained to caption every train-split image
    of the listed kinds (the caption of its planted findings, after an empty
    instruction), reading the image prefix (``with_images``) or no prefix at
    all. P stays at its initial values.
    """
    kinds: tuple[str, ...] = KINDS
    learning_rate: float = 2e-3
    epochs: int = 6
    batch_size: int = 16
    warmup_ratio: float = 0.03
    scheduler: str = "cosine"
    weight_decay: float = 0.0
    max_steps: int = 0
    with_images: bool = True
    trainable: frozenset[str] = frozenset({"E", "L"})

    stage_id = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 0 or self.batch_size < 1 or self.max_steps < 0:
            raise ValidationError("learning_rate > 0, epochs >= 0, batch_size >= 1 and max_steps >= 0 required")
        if not 0 <= self.warmup_ratio < 1:
            raise ValidationError("warmup_ratio must lie in [0, 1)")
        if self.scheduler not in SCHEDULERS:
            raise ValidationError(f"unknown scheduler {self.scheduler!r}")
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "trainable", frozenset(self.trainable))
        if not self.kinds:
            raise ValidationError("warm-up needs at least one record kind")
        if not self.trainable or not self.trainable <= {"E", "L"}:
            raise FrozenSetViolation("warm-up trains a nonempty subset of E and L; P is left to stage 1")
        if "E" in self.trainable and not self.with_images:
            raise ValidationError("training E in the warm-up needs with_images")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kinds"] = list(self.kinds)
        d["trainable"] = sorted(self.trainable)
        return d


def default_stage_configs() -> list[StageConfig]:
    """Quality schedule used by ``train`` and ``pipeline``.

    Rates sit above the 1e-4 quoted for full-size models: from-scratch toy
    components need larger steps. The L2 and auxiliary weights are scaled to
    the summed-squares magnitude of a 64-wide model, where 1e-2 swamps the CE term.
    """
    return [
        StageConfig(1, learning_rate=3e-3, lam=0.0, epochs=2),
        StageConfig(2, learning_rate=1e-3, lam=1e-4, epochs=4),
        StageConfig(3, learning_rate=1e-3, alphas=(1.0, 1.0, 1e-4), epochs=12),
    ]


def ablation_stage_configs() -> list[StageConfig]:
    """Shorter stage 3 so five seeds of the ablation fit a 30 minute budget."""
    cfgs = default_stage_configs()
    cfgs[2] = dataclasses.replace(cfgs[2], epochs=4)
    return cfgs


# ---------------------------------------------------------------- config file

_INI_KEYS = {
    "trainable": lambda s: frozenset(c.strip() for c in s.split(",") if c.strip()),
    "lambda": float,
    "alphas": lambda s: tuple(float(a) for a in s.split(",")),
    "learning_rate": float,
    "epochs": int,
    "batch_size": int,
    "warmup_ratio": float,
    "scheduler": str.strip,
    "weight_decay": float,
    "kinds": lambda s: tuple(k.strip() for k in s.split(",") if k.strip()),
    "max_steps": int,
    "report_fraction": float,
}


_WARMUP_KEYS = {
    "enabled": lambda s: _flag(s),
    "with_images": lambda s: _flag(s),
    "trainable": _INI_KEYS["trainable"],
    "learning_rate": float,
    "epochs": int,
    "batch_size": int,
    "warmup_ratio": float,
    "scheduler": str.strip,
    "weight_decay": float,
    "kinds": _INI_KEYS["kinds"],
    "max_steps": int,
}


def _flag(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _section(cp: configparser.ConfigParser, name: str, keys: Mapping[str, Callable]) -> dict:
    out = {}
    for key, raw in cp.items(name):
        if key not in keys:
            raise ValidationError(f"[{name}] unknown key {key!r}")
        try:
            out[key] = keys[key](raw)
        except ValueError as e:
            raise ValidationError(f"[{name}] {key}: {e}") from None
    return out


@dataclass
class RunPlan:
    """Everything a config file resolves to."""
    stages: list[StageConfig]
    warmup: WarmupConfig | None = field(default_factory=WarmupConfig)
    model: dict[str, str] = field(default_factory=dict)


def parse_config(text: str) -> RunPlan:
    """INI text -> three stage configs, the warm-up and optional ``[model]`` overrides.

    Sections ``[stage1]``, ``[stage2]``, ``[stage3]`` are required. ``[warmup]``
    is optional (defaults apply; ``enabled = false`` skips it). Unknown keys are
    rejected so that typos do not silently fall back to defaults.
    """
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ValidationError(f"config is not valid INI: {e}") from None
    unknown = set(cp.sections()) - {"stage1", "stage2", "stage3", "warmup", "model"}
    if unknown:
        raise ValidationError(f"unknown config sections {sorted(unknown)}")
    defaults = default_stage_configs()
    stages = []
    for k in (1, 2, 3):
        name = f"stage{k}"
        if not cp.has_section(name):
            raise MissingConfig(f"config lacks a [{name}] section")
        base = defaults[k - 1].to_dict()
        kwargs = {f: base[f] for f in ("lam", "alphas", "learning_rate", "epochs", "batch_size",
                                       "warmup_ratio", "scheduler", "weight_decay", "max_steps",
                                       "report_fraction")}
        for key, value in _section(cp, name, _INI_KEYS).items():
            kwargs["lam" if key == "lambda" else key] = value
        stages.append(StageConfig(k, **kwargs))
    warmup: WarmupConfig | None = WarmupConfig()
    if cp.has_section("warmup"):
        kwargs = _section(cp, "warmup", _WARMUP_KEYS)
        warmup = WarmupConfig(**kwargs) if kwargs.pop("enabled", True) else None
    model = {}
    if cp.has_section("model"):
        fields = {f.name for f in dataclasses.fields(ModelConfig)}
        model = _section(cp, "model", {f: str.strip for f in fields})
    return RunPlan(stages, warmup, model)


def format_config(stages: Sequence[StageConfig], model: Mapping[str, object] | None = None,
                  warmup: WarmupConfig | None = WarmupConfig()) -> str:
    lines = []
    if warmup is None:
        lines += ["[warmup]", "enabled = false", ""]
    else:
        lines += [
            "[warmup]",
            "enabled = true",
            f"trainable = {','.join(sorted(warmup.trainable))}",
            f"with_images = {str(warmup.with_images).lower()}",
            f"learning_rate = {warmup.learning_rate!r}",
            f"epochs = {warmup.epochs}",
            f"batch_size = {warmup.batch_size}",
            f"warmup_ratio = {warmup.warmup_ratio!r}",
            f"scheduler = {warmup.scheduler}",
            f"weight_decay = {warmup.weight_decay!r}",
            f"kinds = {','.join(warmup.kinds)}",
            f"max_steps = {warmup.max_steps}",
            "",
        ]
    for s in stages:
        lines += [
            f"[stage{s.stage_id}]",
            f"trainable = {','.join(sorted(s.trainable))}",
            f"lambda = {s.lam!r}",
            f"alphas = {','.join(repr(a) for a in s.alphas)}",
            f"learning_rate = {s.learning_rate!r}",
            f"epochs = {s.epochs}",
            f"batch_size = {s.batch_size}",
            f"warmup_ratio = {s.warmup_ratio!r}",
            f"scheduler = {s.scheduler}",
            f"weight_decay = {s.weight_decay!r}",
            f"kinds = {','.join(s.kinds)}",
            f"max_steps = {s.max_steps}",
            f"report_fraction = {s.report_fraction!r}",
            "",
        ]
    if model:
        lines.append("[model]")
        lines += [f"{k} = {v}" for k, v in model.items()]
        lines.append("")
    return "\n".join(lines)


def load_config(path: str | Path) -> RunPlan:
    path = Path(path)
    if not path.exists():
        raise MissingConfig(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))


# -------------------------------------------------------------------- batches


@dataclass
class Batch:
    images: np.ndarray | None     # [B, S, S]; None for text-only language modelling
    prompts: list[list[int]]      # [SEP] instruction [SEP]
    targets: list[list[int]]      # target ids, EOS not included

    def __len__(self) -> int:
        return len(self.prompts)


def make_batch(bundle: ModelBundle, images: Sequence[np.ndarray], instructions: Sequence[str],
               targets: Sequence[str]) -> Batch:
    if not (len(images) == len(instructions) == len(targets)):
        raise ValueError("images, instructions and targets must align")
    return Batch(
        np.stack([np.asarray(im, dtype=np.float64) for im in images]) if len(images) else np.zeros((0, 0, 0)),
        [bundle.prompt_ids(i) for i in instructions],
        [encode(t, bundle.vocab) for t in targets],
    )


def records_batch(bundle: ModelBundle, records: Sequence[CorpusRecord]) -> Batch:
    return make_batch(bundle, [r.image for r in records], [r.instruction for r in records],
                      [r.target for r in records])


def sequence_nll(bundle: ModelBundle, batch: Batch) -> Tensor:
    """Mean NLL per target token (target ids plus the closing EOS), teacher forced."""
    if len(batch) == 0:
        raise EmptyTermWithPositiveAlpha("empty batch")
    text_only = batch.images is None
    n = 0 if text_only else bundle.cfg.n_patches
    seqs = [p + t + [EOS] for p, t in zip(batch.prompts, batch.targets)]
    width = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), width), dtype=np.int64)
    rows, gold = [], []
    S = n + width
    for b, (p, t) in enumerate(zip(batch.prompts, batch.targets)):
        ids[b, : len(seqs[b])] = seqs[b]
        first = b * S + n + len(p) - 1
        rows += range(first, first + len(t) + 1)
        gold += t + [EOS]
    prefix = None if text_only else bundle.image_prefix(batch.images)
    h = bundle.L.hidden(prefix, ids)
    h = T.take_rows(T.reshape(h, (-1, h.shape[2])), rows)
    return T.softmax_cross_entropy(bundle.L.head(h), gold)


def l2_penalty(bundle: ModelBundle) -> Tensor:
    """Sum of squares over every E, P and L parameter."""
    total = None
    for p in bundle.parameters():
        term = T.l2_norm_sq(p)
        total = term if total is None else T.add(total, term)
    return total


def _require(bundle: ModelBundle, stage: int) -> None:
    if bundle.trainable_components() != STAGE_TRAINABLE[stage]:
        raise FrozenSetViolation(
            f"stage {stage} needs trainable {sorted(STAGE_TRAINABLE[stage])}, "
            f"bundle has {sorted(bundle.trainable_components())}"
        )


def loss_stage1(bundle: ModelBundle, images, captions) -> Tensor:
    """Caption NLL given the projected image and an empty instruction; only P learns."""
    _require(bundle, 1)
    if isinstance(captions, str):
        images, captions = [images], [captions]
    return sequence_nll(bundle, make_batch(bundle, images, [""] * len(captions), captions))


def loss_stage2(bundle: ModelBundle, images, instructions, targets, lam: float) -> Tensor:
    """Cross-entropy plus lam * sum of squared parameters."""
    if lam < 0:
        raise NegativeLambda(f"lambda must be >= 0, got {lam}")
    _require(bundle, 2)
    if isinstance(targets, str):
        images, instructions, targets = [images], [instructions], [targets]
    ce = sequence_nll(bundle, make_batch(bundle, images, instructions, targets))
    if lam == 0:
        return ce
    return T.add(ce, T.scale(l2_penalty(bundle), lam))


def stage3_terms(bundle: ModelBundle, report_batch: Batch | None, instr_batch: Batch | None,
                 alphas: Sequence[float]) -> dict[str, Tensor]:
    a1, a2, a3 = alphas
    if any(a < 0 for a in alphas):
        raise ValidationError("alphas must be nonnegative")
    terms = {}
    for name, alpha, batch in (("report", a1, report_batch), ("instruction", a2, instr_batch)):
        if batch is None or len(batch) == 0:
            if alpha > 0:
                raise EmptyTermWithPositiveAlpha(f"{name} term has weight {alpha} but no samples")
            continue
        if alpha > 0:
            terms[name] = sequence_nll(bundle, batch)
    if a3 > 0:
        terms["reg"] = l2_penalty(bundle)
    return terms


def loss_stage3(bundle: ModelBundle, report_batch: Batch | None, instr_batch: Batch | None,
                alphas: Sequence[float] = (1.0, 1.0, 0.01)) -> Tensor:
    """alpha1 * report NLL + alpha2 * instruction NLL + alpha3 * sum of squared parameters."""
    _require(bundle, 3)
    terms = stage3_terms(bundle, report_batch, instr_batch, alphas)
    weights = {"report": alphas[0], "instruction": alphas[1], "reg": alphas[2]}
    total = None
    for name, t in terms.items():
        t = T.scale(t, float(weights[name]))
        total = t if total is None else T.add(total, t)
    if total is None:
        total = Tensor(0.0)
    return total


# ----------------------------------------------------------------- optimizer


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    return int(math.ceil(warmup_ratio * total_steps))


def lr_at(step: int, total_steps: int, base_lr: float, warmup_ratio: float) -> float:
    """Linear warmup from 0, then cosine decay to 0 at ``total_steps``."""
    w = warmup_steps(total_steps, warmup_ratio)
    if step < w:
        return base_lr * step / w
    span = max(total_steps - w, 1)
    progress = min((step - w) / span, 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainState:
    bundle: ModelBundle
    seed: int
    stage: StageConfig | WarmupConfig | None = None
    total_steps: int = 0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    history: dict[int, list[float]] = field(default_factory=dict)

    def begin_stage(self, cfg: StageConfig | WarmupConfig, total_steps: int) -> None:
        self.stage, self.total_steps, self.step = cfg, total_steps, 0
        self.m, self.v = {}, {}
        self.history[cfg.stage_id] = []
        flags = {c: c not in cfg.trainable for c in COMPONENTS}
        self.bundle.set_freeze(**flags)


def optimize_step(state: TrainState, loss: float | None = None) -> TrainState:
    """One Adam update of the trainable parameters from their populated gradients."""
    cfg = state.stage
    if cfg is None:
        raise ValidationError("optimize_step called outside a stage")
    params = {k: p for k, p in state.bundle.trainable_parameters().items() if p.grad is not None}
    if not params:
        raise NoGradients("no trainable parameter has a gradient; call backward first")
    lr = lr_at(state.step, state.total_steps, cfg.learning_rate, cfg.warmup_ratio)
    b1, b2 = ADAM_BETAS
    t = state.step + 1
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        if cfg.weight_decay:
            update = update + cfg.weight_decay * p.data
        p.data = p.data - lr * update
    state.step += 1
    if loss is not None:
        state.history.setdefault(cfg.stage_id, []).append(float(loss))
    return state


def train_step(state: TrainState, loss_fn: Callable[[], Tensor]) -> float:
    T.zero_grads(state.bundle.parameters())
    loss = loss_fn()
    T.backward(loss)
    value = loss.item()
    optimize_step(state, value)
    return value


# ------------------------------------------------------------------- stages


def stage_pools(records: Sequence[CorpusRecord], cfg: StageConfig | WarmupConfig) -> dict[str, list[CorpusRecord]]:
    train = [r for r in records if r.split == "train"]
    pools = {k: [r for r in train if r.kind == k] for k in cfg.kinds}
    missing = [k for k, v in pools.items() if not v]
    if missing:
        raise MissingSampleKind(f"stage {cfg.stage_id} needs {missing} samples in the train split")
    return pools


def _epoch_batches(pool: list, size: int, rng: np.random.Generator, n_batches: int) -> list[list]:
    """``n_batches`` batches from shuffled passes over ``pool`` (cycled if short)."""
    out, order, pos = [], [], 0
    for _ in range(n_batches):
        batch = []
        while len(batch) < size:
            if pos >= len(order):
                order, pos = [pool[i] for i in rng.permutation(len(pool))], 0
            batch.append(order[pos])
            pos += 1
        out.append(batch)
    return out


def stage_schedule(cfg: StageConfig, pools: Mapping[str, list], seed: int) -> list[dict[str, list]]:
    """Deterministic list of per-step batches (dict kind -> records)."""
    rng = sub_rng(seed, f"stage{cfg.stage_id}-batches")
    if cfg.stage_id == 3:
        # an epoch is one pass over the report pool; the instruction pool is cycled alongside
        rep, ins = pools[cfg.kinds[0]], pools[cfg.kinds[1]] if len(cfg.kinds) > 1 else []
        n_rep = min(max(round(cfg.batch_size * cfg.report_fraction), 1), cfg.batch_size - 1) if ins else cfg.batch_size
        n = math.ceil(len(rep) / n_rep) * cfg.epochs
        if cfg.max_steps:
            n = min(n, cfg.max_steps)
        r_batches = _epoch_batches(rep, n_rep, rng, n)
        i_batches = _epoch_batches(ins, cfg.batch_size - n_rep, rng, n) if ins else [[] for _ in range(n)]
        return [{"report": r, "instruction": i} for r, i in zip(r_batches, i_batches)]
    pool = [r for k in cfg.kinds for r in pools[k]]
    bs = min(cfg.batch_size, len(pool))
    n = math.ceil(len(pool) / bs) * cfg.epochs
    if cfg.max_steps:
        n = min(n, cfg.max_steps)
    return [{"main": b} for b in _epoch_batches(pool, bs, rng, n)]


def warmup_loss(bundle: ModelBundle, images, texts: Sequence[str]) -> Tensor:
    """NLL of ``texts`` after an empty instruction; ``images=None`` drops the prefix."""
    if images is None:
        prompt = bundle.prompt_ids("")
        return sequence_nll(bundle, Batch(None, [list(prompt) for _ in texts], [encode(t, bundle.vocab) for t in texts]))
    return sequence_nll(bundle, make_batch(bundle, images, [""] * len(texts), texts))


def run_stage(state: TrainState, cfg: StageConfig | WarmupConfig, records: Sequence[CorpusRecord],
              log: Callable[[str], None] | None = None) -> list[float]:
    pools = stage_pools(records, cfg)
    schedule = stage_schedule(cfg, pools, state.seed)
    state.begin_stage(cfg, len(schedule))
    bundle = state.bundle
    for k, step in enumerate(schedule):
        if cfg.stage_id == 0:
            recs = step["main"]
            images = [r.image for r in recs] if cfg.with_images else None
            texts = [caption_text(r.findings) for r in recs]
            fn = lambda images=images, texts=texts: warmup_loss(bundle, images, texts)
        elif cfg.stage_id == 1:
            recs = step["main"]
            fn = lambda recs=recs: loss_stage1(bundle, [r.image for r in recs], [r.target for r in recs])
        elif cfg.stage_id == 2:
            recs = step["main"]
            fn = lambda recs=recs: loss_stage2(bundle, [r.image for r in recs], [r.instruction for r in recs],
                                               [r.target for r in recs], cfg.lam)
        else:
            rb = records_batch(bundle, step["report"])
            ib = records_batch(bundle, step["instruction"]) if step["instruction"] else None
            fn = lambda rb=rb, ib=ib: loss_stage3(bundle, rb, ib, cfg.alphas)
        try:
            value = train_step(state, fn)
        except ValidationError as e:
            e.args = (f"stage {cfg.stage_id} step {k + 1}: {e}",)
            raise
        except Exception as e:
            raise StageFailure(f"stage {cfg.stage_id} step {k + 1}: {type(e).__name__}: {e}",
                               cfg.stage_id, k + 1) from e
        if log and (k % 50 == 0 or k == len(schedule) - 1):
            log(f"stage {cfg.stage_id} step {k + 1}/{len(schedule)} loss {value:.4f}")
    return state.history[cfg.stage_id]


def corpus_vocab(records: Sequence[CorpusRecord], max_size: int = 512) -> Vocab:
    """Vocabulary over the train split's instructions, targets, captions and report sections."""
    texts = []
    for r in records:
        if r.split != "train":
            continue
        texts += [r.instruction, r.target, caption_text(r.findings)]
        if r.sections:
            texts += [r.sections.get("findings_text", ""), r.sections.get("impression_text", "")]
    return build_vocab(texts, max_size)


@dataclass
class PipelineResult:
    state: TrainState
    curves: dict[int, list[float]]
    checkpoints: dict[int, str]
    stage_params: dict[int, dict[str, np.ndarray]]
    initial: dict[str, np.ndarray]


def init_bundle(records: Sequence[CorpusRecord], seed: int, model_cfg: ModelConfig | None = None) -> ModelBundle:
    vocab = corpus_vocab(records)
    return ModelBundle.init(vocab, int(sub_rng(seed, "init").integers(2**31)), model_cfg)


def run_pipeline(configs: Sequence[StageConfig], records: Sequence[CorpusRecord], seed: int,
                 out_dir: str | Path | None = None, model_cfg: ModelConfig | None = None,
                 bundle: ModelBundle | None = None, stages: Sequence[int] = (1, 2, 3),
                 warmup: WarmupConfig | None = None,
                 log: Callable[[str], None] | None = None) -> PipelineResult:
    """Run the listed stages in order, each continuing from the previous parameters.

    With ``warmup`` set and stage 1 listed, the warm-up runs first (its
    parameters are kept under stage id 0, no checkpoint is written for it).
    ``initial`` is always the parameter set before any training.
    """
    configs = sorted(configs, key=lambda c: c.stage_id)
    if [c.stage_id for c in configs] != [1, 2, 3]:
        raise ValidationError("need exactly one config for each of stages 1, 2, 3")
    if list(stages) != sorted(stages) or not set(stages) <= {1, 2, 3}:
        raise ValidationError(f"stages must run in increasing order, got {list(stages)}")
    plan: list[StageConfig | WarmupConfig] = [c for c in configs if c.stage_id in stages]
    if warmup is not None and 1 in stages:
        plan.insert(0, warmup)
    for c in plan:
        stage_pools(records, c)  # fail fast on missing kinds
    bundle = bundle or init_bundle(records, seed, model_cfg)
    state = TrainState(bundle, seed)
    initial = bundle.state_arrays()
    ckpts, params = {}, {}
    with T.single_threaded():
        for c in plan:
            run_stage(state, c, records, log)
            params[c.stage_id] = bundle.state_arrays()
            if out_dir is not None and c.stage_id > 0:
                path = Path(out_dir) / f"stage{c.stage_id}.ckpt"
                save_checkpoint(path, bundle, {"stage": c.stage_id, "seed": seed,
                                               "final_loss": repr(state.history[c.stage_id][-1])})
                ckpts[c.stage_id] = str(path)
    return PipelineResult(state, dict(state.history), ckpts, params, initial)


def pipeline_manifest(result: PipelineResult, configs: Sequence[StageConfig], seed: int,
                      warmup: WarmupConfig | None = None) -> dict:
    stages = []
    for c in sorted(configs, key=lambda c: c.stage_id):
        if c.stage_id not in result.curves:
            continue
        entry = {
            "stage": c.stage_id,
            "config": c.to_dict(),
            "steps": len(result.curves[c.stage_id]),
            "final_loss": result.curves[c.stage_id][-1] if result.curves[c.stage_id] else None,
        }
        if c.stage_id in result.checkpoints:
            path = result.checkpoints[c.stage_id]
            entry["checkpoint"] = Path(path).name
            entry["checkpoint_sha256"] = file_sha256(path)
        stages.append(entry)
    out = {"seed": seed, "stage_order": [s["stage"] for s in stages], "stages": stages,
           "model": result.state.bundle.cfg.to_dict(), "vocab_size": len(result.state.bundle.vocab)}
    if warmup is not None and 0 in result.curves:
        out["warmup"] = {"config": warmup.to_dict(), "steps": len(result.curves[0]),
                         "final_loss": result.curves[0][-1] if result.curves[0] else None}
    return out


# ------------------------------------------------------------------ ablation

ABLATION_ROWS = ("baseline", "(a)", "(b)", "full")


def run_ablation(records: Sequence[CorpusRecord], seed: int, configs: Sequence[StageConfig] | None = None,
                 model_cfg: ModelConfig | None = None, max_new_tokens: int = 80,
                 warmup: WarmupConfig | None = WarmupConfig(),
                 log: Callable[[str], None] | None = None) -> dict:
    """Untrained baseline, stage 1 only, stages 1-2 and all three stages from one init.

    Stage batches are seeded per stage, so the parameters after stage 1 (or 2)
    of the full run are exactly what a run stopped there would produce; the
    settings are therefore read off one run instead of training three times.
    """
    from .evaluation.embed import Embedder
    from .evaluation.report import TABLE_COLUMNS, evaluate_bundle

    configs = list(configs or ablation_stage_configs())
    result = run_pipeline(configs, records, seed, model_cfg=model_cfg, warmup=warmup, log=log)
    bundle = result.state.bundle
    embedder = Embedder.from_bundle(bundle)
    settings = {"baseline": result.initial, "(a)": result.stage_params[1],
                "(b)": result.stage_params[2], "full": result.stage_params[3]}
    rows = {}
    for name in ABLATION_ROWS:
        b = bundle.copy()
        b.load_arrays(settings[name])
        rep = evaluate_bundle(b, records, embedder, max_new_tokens=max_new_tokens, with_auc=name == "full")
        rows[name] = {task: rep[task]["mean"] for task in ("generation", "summarization")}
        if name == "full":
            auc = rep["auc"]
        if log:
            log(f"ablation {name}: generation R-L {rows[name]['generation']['R-L']:.4f}")
    return {"seed": seed, "columns": list(TABLE_COLUMNS), "rows": rows, "full_auc": auc,
            "stages": {"baseline": [], "(a)": [0, 1], "(b)": [0, 1, 2], "full": [0, 1, 2, 3]}}


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
