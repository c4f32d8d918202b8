"""Binary checkpoints.

Layout: ``b"SMRT"``, uint32 format version, uint32 header length, a UTF-8
JSON header, then every parameter as little-endian float32 in
``named_parameters`` order. The header carries the model config, the
vocabularies (so a checkpoint is self-contained) with their digests, the
parameter names and shapes, and the step count.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .exceptions import SchemaError, VocabularyMismatchError
from .io import dumps
from .model import SMART, ModelConfig
from .scene import VocabSet

MAGIC = b"SMRT"
FORMAT_VERSION = 1


def save_checkpoint(path, model: SMART, vocabs: VocabSet, step: int = 0, extra: dict | None = None) -> None:
    names, shapes, blobs = [], [], []
    for name, p in model.named_parameters():
        names.append(name)
        shapes.append(list(p.shape))
        blobs.append(p.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    header = {"schema": 1, "config": model.config.to_dict(), "vocabs": vocabs.to_dict(),
              "vocab_digests": vocabs.digests(), "step": int(step), "params": names, "shapes": shapes,
              "extra": extra or {}}
    hb = dumps(header).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(hb)) + hb)
        for b in blobs:
            f.write(b)


def read_header(path) -> tuple:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise SchemaError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen])
    return header, data[12 + hlen:]


def load_checkpoint(path) -> tuple:
    """Returns ``(model, vocabs, header)``; the model is in eval mode."""
    header, body = read_header(path)
    vocabs = VocabSet.from_dict(header["vocabs"], str(path))
    if vocabs.digests() != header["vocab_digests"]:
        raise VocabularyMismatchError(f"{path}: embedded vocabulary does not match its digest")
    sizes = vocabs.sizes()
    model = SMART(ModelConfig.from_dict(header["config"]), vocabs.class_sizes(), sizes["road"])
    params = dict(model.named_parameters())
    if list(params) != header["params"]:
        raise SchemaError(f"{path}: parameter names do not match the model built from its config")
    off = 0
    with torch.no_grad():
        for name, shape in zip(header["params"], header["shapes"]):
            n = int(np.prod(shape))
            arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape)
            params[name].copy_(torch.from_numpy(arr.astype(np.float32)))
            off += 4 * n
    if off != len(body):
        raise SchemaError(f"{path}: {len(body) - off} trailing bytes")
    model.eval()
    return model, vocabs, header
