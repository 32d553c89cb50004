"""Toy vision encoder, projector and causal language model.

Sequence layout fed to the language model (a convention, see README)::

    [image tokens][SEP][instruction tokens][SEP][target tokens][EOS]

Image tokens are projected patch embeddings, not vocabulary ids.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import BadImageShape, ContextOverflow, ShapeMismatch
from .tensor import Tensor
from .tokenizer import EOS, SEP, Vocab, decode, encode

COMPONENTS = ("E", "P", "L")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    e_dim: int = 64
    e_layers: int = 2
    e_heads: int = 4
    p_hidden: int = 64
    l_dim: int = 64
    l_layers: int = 2
    l_heads: int = 4
    vocab_size: int = 512
    max_context: int = 256
    mlp_ratio: int = 4
    init_std: float = 0.02
    ln_eps: float = 1e-5
    pixel_mean: float = 0.25     # fixed input standardization ahead of the patch embedding
    pixel_std: float = 0.2

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise BadImageShape("image_size must be divisible by patch_size")
        if self.e_dim % self.e_heads or self.l_dim % self.l_heads:
            raise ValueError("model width must be divisible by the head count")
        if not 1 <= self.max_context <= 2048:
            raise ValueError("max_context must lie in [1, 2048]")
        if self.pixel_std <= 0:
            raise ValueError("pixel_std must be positive")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in d:
                kwargs[f.name] = type(f.default)(d[f.name])
        return cls(**kwargs)


# ---------------------------------------------------------------- parameters


def _block_shapes(prefix: str, d: int, ratio: int) -> list[tuple[str, tuple[int, ...]]]:
    h = d * ratio
    return [
        (f"{prefix}ln1.g", (d,)), (f"{prefix}ln1.b", (d,)),
        (f"{prefix}attn.wq", (d, d)), (f"{prefix}attn.bq", (d,)),
        (f"{prefix}attn.wk", (d, d)), (f"{prefix}attn.bk", (d,)),
        (f"{prefix}attn.wv", (d, d)), (f"{prefix}attn.bv", (d,)),
        (f"{prefix}attn.wo", (d, d)), (f"{prefix}attn.bo", (d,)),
        (f"{prefix}ln2.g", (d,)), (f"{prefix}ln2.b", (d,)),
        (f"{prefix}mlp.w1", (d, h)), (f"{prefix}mlp.b1", (h,)),
        (f"{prefix}mlp.w2", (h, d)), (f"{prefix}mlp.b2", (d,)),
    ]


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every parameter name and shape, in canonical (checkpoint) order."""
    pp = cfg.patch_size * cfg.patch_size
    shapes = [("E.patch.w", (pp, cfg.e_dim)), ("E.patch.b", (cfg.e_dim,)),
              ("E.pos", (cfg.n_patches, cfg.e_dim))]
    for i in range(cfg.e_layers):
        shapes += _block_shapes(f"E.blocks.{i}.", cfg.e_dim, cfg.mlp_ratio)
    shapes += [("E.ln_f.g", (cfg.e_dim,)), ("E.ln_f.b", (cfg.e_dim,))]
    shapes += [("P.w1", (cfg.e_dim, cfg.p_hidden)), ("P.b1", (cfg.p_hidden,)),
               ("P.w2", (cfg.p_hidden, cfg.l_dim)), ("P.b2", (cfg.l_dim,))]
    shapes += [("L.tok", (cfg.vocab_size, cfg.l_dim)), ("L.pos", (cfg.max_context, cfg.l_dim))]
    for i in range(cfg.l_layers):
        shapes += _block_shapes(f"L.blocks.{i}.", cfg.l_dim, cfg.mlp_ratio)
    shapes += [("L.ln_f.g", (cfg.l_dim,)), ("L.ln_f.b", (cfg.l_dim,))]
    return shapes


def init_parameters(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in parameter_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            out[name] = np.ones(shape)
        elif len(shape) == 1:
            out[name] = np.zeros(shape)
        else:
            out[name] = rng.normal(0.0, cfg.init_std, size=shape)
    return out


class Component:
    """Named parameter store for one of E, P, L."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            if not flag:
                p.grad = None


# ----------------------------------------------------------------- building blocks


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x[..., k] @ w[k, n] + b[n]; leading dims are flattened for the product."""
    lead = x.shape[:-1]
    y = T.matmul(T.reshape(x, (-1, x.shape[-1])), w)
    return T.reshape(T.add(y, b), lead + (w.shape[1],))


def _attention(x: Tensor, p: Component, pre: str, n_heads: int, mask: np.ndarray | None) -> Tensor:
    B, S, d = x.shape
    dh = d // n_heads

    def heads(t: Tensor) -> Tensor:
        t = T.reshape(t, (B, S, n_heads, dh))
        return T.reshape(T.transpose(t, (0, 2, 1, 3)), (B * n_heads, S, dh))

    q = heads(_linear(x, p[pre + "wq"], p[pre + "bq"]))
    k = heads(_linear(x, p[pre + "wk"], p[pre + "bk"]))
    v = heads(_linear(x, p[pre + "wv"], p[pre + "bv"]))
    scores = T.scale(T.bmm(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    att = T.softmax(scores, mask)
    o = T.bmm(att, v)
    o = T.reshape(T.transpose(T.reshape(o, (B, n_heads, S, dh)), (0, 2, 1, 3)), (B, S, d))
    return _linear(o, p[pre + "wo"], p[pre + "bo"])


def _block(x: Tensor, p: Component, pre: str, n_heads: int, mask, eps: float) -> Tensor:
    h = T.layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"], eps)
    x = T.add(x, _attention(h, p, pre + "attn.", n_heads, mask))
    h = T.layernorm(x, p[pre + "ln2.g"], p[pre + "ln2.b"], eps)
    h = _linear(T.gelu(_linear(h, p[pre + "mlp.w1"], p[pre + "mlp.b1"])), p[pre + "mlp.w2"], p[pre + "mlp.b2"])
    return T.add(x, h)


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), -np.inf), k=1)


# ------------------------------------------------------------------ components


class VisionEncoder(Component):
    def patchify(self, images: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        if images.ndim != 3 or images.shape[1] != images.shape[2]:
            raise BadImageShape(f"expected square images, got {images.shape}")
        if images.shape[1] != cfg.image_size:
            raise BadImageShape(f"expected side {cfg.image_size}, got {images.shape[1]}")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise BadImageShape("pixel values must lie in [0, 1]")
        B, s, ps = images.shape[0], cfg.image_size, cfg.patch_size
        g = s // ps
        return images.reshape(B, g, ps, g, ps).transpose(0, 1, 3, 2, 4).reshape(B, g * g, ps * ps)

    def forward(self, images: np.ndarray) -> Tensor:
        """[B, S, S] images -> [B, n_patches, e_dim]."""
        cfg = self.cfg
        pixels = (self.patchify(images) - cfg.pixel_mean) / cfg.pixel_std
        x = _linear(Tensor(pixels), self["E.patch.w"], self["E.patch.b"])
        x = T.add(x, self["E.pos"])
        for i in range(cfg.e_layers):
            x = _block(x, self, f"E.blocks.{i}.", cfg.e_heads, None, cfg.ln_eps)
        return T.layernorm(x, self["E.ln_f.g"], self["E.ln_f.b"], cfg.ln_eps)


class Projector(Component):
    def forward(self, visual: Tensor) -> Tensor:
        if visual.shape[-1] != self.cfg.e_dim:
            raise ShapeMismatch(f"projector expects width {self.cfg.e_dim}, got {visual.shape[-1]}")
        h = T.gelu(_linear(visual, self["P.w1"], self["P.b1"]))
        return _linear(h, self["P.w2"], self["P.b2"])


class LanguageModel(Component):
    def hidden(self, prefix: Tensor | None, ids: np.ndarray) -> Tensor:
        """Final hidden states [B, n_prefix + T, d] for prefix embeddings and token ids [B, T]."""
        cfg = self.cfg
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        x = T.embedding_lookup(self["L.tok"], ids)
        if prefix is not None and prefix.shape[1] > 0:
            if prefix.shape[0] != ids.shape[0] or prefix.shape[2] != cfg.l_dim:
                raise ShapeMismatch(f"prefix {prefix.shape} does not fit ids {ids.shape}")
            x = T.concat([prefix, x], axis=1)
        S = x.shape[1]
        if S > cfg.max_context:
            raise ContextOverflow(f"sequence of {S} exceeds context {cfg.max_context}")
        x = T.add(x, T.take_rows(self["L.pos"], np.arange(S)))
        mask = causal_mask(S)
        for i in range(cfg.l_layers):
            x = _block(x, self, f"L.blocks.{i}.", cfg.l_heads, mask, cfg.ln_eps)
        return T.layernorm(x, self["L.ln_f.g"], self["L.ln_f.b"], cfg.ln_eps)

    def head(self, h: Tensor) -> Tensor:
        """Output logits via the tied token embedding: [N, d] -> [N, V]."""
        return T.matmul(h, T.transpose(self["L.tok"]))


# ---------------------------------------------------------------------- bundle


class ModelBundle:
    """E, P and L plus per-component freeze flags."""

    def __init__(self, cfg: ModelConfig, vocab: Vocab, arrays: Mapping[str, np.ndarray]):
        if len(vocab) > cfg.vocab_size:
            raise ValueError(f"vocab of {len(vocab)} exceeds configured size {cfg.vocab_size}")
        self.cfg = cfg
        self.vocab = vocab
        params = {}
        for name, shape in parameter_shapes(cfg):
            arr = np.array(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {arr.shape}")
            params[name] = Tensor(arr, requires_grad=True)
        self.E = VisionEncoder(cfg, {k: v for k, v in params.items() if k.startswith("E.")})
        self.P = Projector(cfg, {k: v for k, v in params.items() if k.startswith("P.")})
        self.L = LanguageModel(cfg, {k: v for k, v in params.items() if k.startswith("L.")})
        self.freeze_flags = {c: False for c in COMPONENTS}

    @classmethod
    def init(cls, vocab: Vocab, seed: int, cfg: ModelConfig | None = None) -> "ModelBundle":
        cfg = cfg or ModelConfig()
        if cfg.vocab_size != len(vocab):
            cfg = dataclasses.replace(cfg, vocab_size=len(vocab))
        return cls(cfg, vocab, init_parameters(cfg, seed))

    def component(self, name: str) -> Component:
        return {"E": self.E, "P": self.P, "L": self.L}[name]

    def named_parameters(self) -> dict[str, Tensor]:
        return {**self.E.params, **self.P.params, **self.L.params}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def set_freeze(self, E: bool | None = None, P: bool | None = None, L: bool | None = None) -> None:
        for name, flag in (("E", E), ("P", P), ("L", L)):
            if flag is None:
                continue
            self.freeze_flags[name] = bool(flag)
            self.component(name).set_trainable(not flag)

    def trainable_components(self) -> frozenset[str]:
        return frozenset(c for c in COMPONENTS if not self.freeze_flags[c])

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k, p in self.named_parameters().items():
            p.data = np.array(arrays[k], dtype=np.float64)

    def copy(self) -> "ModelBundle":
        other = ModelBundle(self.cfg, self.vocab, self.state_arrays())
        other.set_freeze(**self.freeze_flags)
        return other

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    # ---- forward helpers used by training and decoding

    def image_prefix(self, images: np.ndarray) -> Tensor:
        """Projected image tokens [B, n_patches, l_dim]."""
        return self.P.forward(self.E.forward(images))

    def prompt_ids(self, instruction: str) -> list[int]:
        return [SEP] + encode(instruction, self.vocab) + [SEP]


def encode_image(E: VisionEncoder, image: np.ndarray) -> Tensor:
    """One image [S, S] -> [n_patches, e_dim]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise BadImageShape(f"expected a single 2-D image, got {image.shape}")
    out = E.forward(image[None])
    return T.reshape(out, out.shape[1:])


def project(P: Projector, visual: Tensor) -> Tensor:
    """Per-token MLP from encoder width to language-model width."""
    return P.forward(visual)


def forward_lm(L: LanguageModel, prefix: Tensor | None, token_ids: Sequence[int]) -> Tensor:
    """Logits [len(token_ids), V]; row j scores the token following position j."""
    ids = np.asarray(token_ids, dtype=np.int64)[None]
    batched = None
    n = 0
    if prefix is not None and prefix.shape[0] > 0:
        if prefix.ndim != 2:
            raise ShapeMismatch(f"prefix must be [n, d], got {prefix.shape}")
        n = prefix.shape[0]
        batched = T.reshape(prefix, (1,) + prefix.shape)
    h = L.hidden(batched, ids)
    h = T.reshape(h, (h.shape[1], h.shape[2]))
    rows = T.take_rows(h, np.arange(n, n + ids.shape[1]))
    return L.head(rows)


def generate(bundle: ModelBundle, image: np.ndarray, instruction: str, max_new_tokens: int,
             stop_at_eos: bool = True) -> str:
    """Greedy decoding for a single image."""
    return generate_batch(bundle, [image], [instruction], max_new_tokens, stop_at_eos)[0]


def generate_batch(bundle: ModelBundle, images: Sequence[np.ndarray], instructions: Sequence[str],
                   max_new_tokens: int, stop_at_eos: bool = True) -> list[str]:
    ids = generate_ids_batch(bundle, images, instructions, max_new_tokens, stop_at_eos)
    return [decode(g, bundle.vocab) for g in ids]


def _check_decode(bundle: ModelBundle, images, instructions, max_new_tokens: int) -> list[list[int]]:
    if max_new_tokens < 1:
        raise ValueError("max_new_tokens must be >= 1")
    if len(images) != len(instructions):
        raise ValueError("one instruction per image")
    cfg = bundle.cfg
    seqs = [bundle.prompt_ids(instr) for instr in instructions]
    longest = max((len(s) for s in seqs), default=0)
    if seqs and cfg.n_patches + longest + max_new_tokens > cfg.max_context:
        raise ContextOverflow(
            f"{cfg.n_patches} image tokens + {longest} prompt tokens + {max_new_tokens} new tokens "
            f"exceed context {cfg.max_context}"
        )
    return seqs


def _ln(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float) -> np.ndarray:
    xc = x - x.mean(axis=-1, keepdims=True)
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * (1.0 / np.sqrt(var + eps)) * g + b


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * x * (1.0 + 0.044715 * x * x)))


class _KVDecoder:
    """Inference-only language-model forward with a per-layer key/value cache.

    Row ``b`` of the batch owns cache slots ``0..pos[b]``; slots past a row's
    current position may hold stale values from the padded prefill and are
    always masked out.
    """

    def __init__(self, L: LanguageModel, batch: int):
        cfg = L.cfg
        self.cfg = cfg
        self.p = {k: v.data for k, v in L.params.items()}
        self.H = cfg.l_heads
        self.dh = cfg.l_dim // cfg.l_heads
        shape = (batch, self.H, cfg.max_context, self.dh)
        self.k = [np.zeros(shape) for _ in range(cfg.l_layers)]
        self.v = [np.zeros(shape) for _ in range(cfg.l_layers)]

    def _split(self, t: np.ndarray) -> np.ndarray:
        B, S, _ = t.shape
        return t.reshape(B, S, self.H, self.dh).transpose(0, 2, 1, 3)

    def _layers(self, x: np.ndarray, write, mask: np.ndarray, span: int) -> np.ndarray:
        p, eps = self.p, self.cfg.ln_eps
        B, S, d = x.shape
        for i in range(self.cfg.l_layers):
            pre = f"L.blocks.{i}."
            h = _ln(x, p[pre + "ln1.g"], p[pre + "ln1.b"], eps)
            q = self._split(h @ p[pre + "attn.wq"] + p[pre + "attn.bq"])
            write(self.k[i], self._split(h @ p[pre + "attn.wk"] + p[pre + "attn.bk"]))
            write(self.v[i], self._split(h @ p[pre + "attn.wv"] + p[pre + "attn.bv"]))
            keys, vals = self.k[i][:, :, :span], self.v[i][:, :, :span]
            z = q @ keys.transpose(0, 1, 3, 2) * (1.0 / math.sqrt(self.dh)) + mask
            z = z - z.max(axis=-1, keepdims=True)
            e = np.exp(z)
            o = (e / e.sum(axis=-1, keepdims=True)) @ vals
            o = o.transpose(0, 2, 1, 3).reshape(B, S, d)
            x = x + (o @ p[pre + "attn.wo"] + p[pre + "attn.bo"])
            h = _ln(x, p[pre + "ln2.g"], p[pre + "ln2.b"], eps)
            x = x + (_gelu(h @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]) @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"])
        return _ln(x, p["L.ln_f.g"], p["L.ln_f.b"], eps)

    def prefill(self, prefix: np.ndarray, ids: np.ndarray, last: np.ndarray) -> np.ndarray:
        """Run [prefix | ids] (right-padded) and return logits at positions ``last``."""
        p = self.p
        x = p["L.tok"][ids]
        if prefix.shape[1]:
            x = np.concatenate([prefix, x], axis=1)
        S = x.shape[1]
        x = x + p["L.pos"][:S]

        def write(cache, t):
            cache[:, :, :S] = t

        h = self._layers(x, write, causal_mask(S), S)
        rows = h[np.arange(len(last)), last]
        return rows @ p["L.tok"].T

    def step(self, tok: np.ndarray, pos: np.ndarray) -> np.ndarray:
        """Feed one token per row at its own position; logits for the next token."""
        p = self.p
        x = (p["L.tok"][tok] + p["L.pos"][pos])[:, None, :]
        span = int(pos.max()) + 1
        mask = np.where(np.arange(span)[None, :] <= pos[:, None], 0.0, -np.inf)[:, None, None, :]
        b = np.arange(len(pos))

        def write(cache, t):
            cache[b, :, pos] = t[:, :, 0]

        h = self._layers(x, write, mask, span)
        return h[:, 0] @ p["L.tok"].T


def generate_ids_batch(bundle: ModelBundle, images: Sequence[np.ndarray], instructions: Sequence[str],
                       max_new_tokens: int, stop_at_eos: bool = True) -> list[list[int]]:
    """Greedy decoding for a batch; emitted ids include a terminating EOS if one was produced.

    Uses a key/value cache, so each new token costs one position per layer.
    """
    seqs = _check_decode(bundle, images, instructions, max_new_tokens)
    if not seqs:
        return []
    n = bundle.cfg.n_patches
    B = len(seqs)
    width = max(len(s) for s in seqs)
    ids = np.zeros((B, width), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    pos = np.array([n + len(s) - 1 for s in seqs])
    with T.no_grad():
        prefix = bundle.image_prefix(np.stack(images)).data
    dec = _KVDecoder(bundle.L, B)
    logits = dec.prefill(prefix, ids, pos)
    emitted: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for step in range(max_new_tokens):
        nxt = np.argmax(logits, axis=1)
        for i in np.flatnonzero(~done):
            tok = int(nxt[i])
            emitted[i].append(tok)
            if stop_at_eos and tok == EOS:
                done[i] = True
        if done.all() or step == max_new_tokens - 1:
            break
        pos = np.where(done, pos, pos + 1)
        logits = dec.step(np.where(done, 0, nxt), pos)
    return emitted


def generate_ids_reference(bundle: ModelBundle, images: Sequence[np.ndarray], instructions: Sequence[str],
                       max_new_tokens: int, stop_at_eos: bool = True) -> list[list[int]]:
    """Greedy decoding that re-runs the full autograd forward for every new token.

    Slow but obviously correct; :func:`generate_ids_batch` is checked against it.
    Sequences are right-padded; causal attention keeps each one independent of
    the padding after it.
    """
    seqs = _check_decode(bundle, images, instructions, max_new_tokens)
    if not seqs:
        return []
    n = bundle.cfg.n_patches
    B = len(seqs)
    emitted: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    with T.no_grad():
        prefix = bundle.image_prefix(np.stack(images)).data
        for _ in range(max_new_tokens):
            active = np.flatnonzero(~done)
            width = max(len(seqs[i]) for i in active)
            ids = np.zeros((len(active), width), dtype=np.int64)
            for r, i in enumerate(active):
                ids[r, : len(seqs[i])] = seqs[i]
            h = bundle.L.hidden(Tensor(prefix[active]), ids)
            S = h.shape[1]
            last = [r * S + n + len(seqs[i]) - 1 for r, i in enumerate(active)]
            rows = T.take_rows(T.reshape(h, (-1, h.shape[2])), last)
            nxt = np.argmax(bundle.L.head(rows).data, axis=1)
            for r, i in enumerate(active):
                tok = int(nxt[r])
                emitted[i].append(tok)
                if stop_at_eos and tok == EOS:
                    done[i] = True
                else:
                    seqs[i].append(tok)
            if done.all():
                break
    return emitted


def iter_chunks(items: Sequence, size: int) -> Iterable[Sequence]:
    for start in range(0, len(items), size):
        yield items[start:start + size]
