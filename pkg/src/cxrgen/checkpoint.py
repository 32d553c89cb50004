"""Checkpoint container.

Byte layout (all text is UTF-8, lines end with ``\\n``)::

    CXRCKPT <version>
    <key>=<value>            # header, one per line; values never contain newlines
    ...
    --
    <name> <d0>,<d1>,... <nbytes>
    <nbytes of little-endian float64, row-major>
    ...                      # one block per parameter, canonical order
    END

The header always carries the model config (``model.<field>``), the vocabulary
(``vocab``, tokens joined by single spaces), the freeze flags (``freeze``) and
``n_params``. Callers may add free-form keys.
"""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError
from .model import ModelBundle, ModelConfig, parameter_shapes
from .tokenizer import Vocab

MAGIC = "CXRCKPT"
VERSION = 1


def save_checkpoint(path: str | Path, bundle: ModelBundle, extra: Mapping[str, object] | None = None) -> None:
    header: dict[str, str] = {}
    for k, v in bundle.cfg.to_dict().items():
        header[f"model.{k}"] = repr(v)
    header["vocab"] = " ".join(bundle.vocab.id_to_token)
    header["freeze"] = ",".join(c for c, f in bundle.freeze_flags.items() if f)
    shapes = parameter_shapes(bundle.cfg)
    header["n_params"] = str(len(shapes))
    for k, v in (extra or {}).items():
        if k in header:
            raise CheckpointError(f"header key {k!r} is reserved")
        header[k] = str(v)

    chunks = [f"{MAGIC} {VERSION}\n".encode()]
    for k in sorted(header):
        value = header[k]
        if "\n" in value or "=" in k:
            raise CheckpointError(f"header entry {k!r} is not representable")
        chunks.append(f"{k}={value}\n".encode())
    chunks.append(b"--\n")
    params = bundle.named_parameters()
    for name, shape in shapes:
        payload = np.ascontiguousarray(params[name].data, dtype="<f8").tobytes()
        dims = ",".join(str(d) for d in shape)
        chunks.append(f"{name} {dims} {len(payload)}\n".encode())
        chunks.append(payload)
    chunks.append(b"END\n")
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[ModelBundle, dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    pos = 0

    def line() -> str:
        nonlocal pos
        end = raw.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: truncated")
        text = raw[pos:end].decode()
        pos = end + 1
        return text

    magic = line().split()
    if len(magic) != 2 or magic[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    if int(magic[1]) != VERSION:
        raise CheckpointError(f"{path}: unsupported version {magic[1]}")
    header: dict[str, str] = {}
    while True:
        text = line()
        if text == "--":
            break
        key, _, value = text.partition("=")
        header[key] = value

    model_fields = {k[len("model."):]: _literal(v) for k, v in header.items() if k.startswith("model.")}
    cfg = ModelConfig.from_dict(model_fields)
    vocab = Vocab(tuple(header["vocab"].split(" ")))
    arrays = {}
    for name, shape in parameter_shapes(cfg):
        fields = line().split(" ")
        if len(fields) != 3 or fields[0] != name:
            raise CheckpointError(f"{path}: expected block {name}, found {fields[:1]}")
        dims = tuple(int(d) for d in fields[1].split(",")) if fields[1] else ()
        nbytes = int(fields[2])
        if dims != shape or nbytes != 8 * int(np.prod(shape)):
            raise CheckpointError(f"{path}: block {name} has shape {dims}, expected {shape}")
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated in block {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if line() != "END":
        raise CheckpointError(f"{path}: missing END marker")

    bundle = ModelBundle(cfg, vocab, arrays)
    frozen = set(filter(None, header.get("freeze", "").split(",")))
    bundle.set_freeze(**{c: c in frozen for c in ("E", "P", "L")})
    return bundle, header


def _literal(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
