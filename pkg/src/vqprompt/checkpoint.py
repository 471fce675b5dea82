"""Checkpoint files: a JSON header followed by raw little-endian arrays.

Layout::

    b"VQPCKPT1" | uint64 header length (LE) | header JSON (UTF-8) | array payload

The header lists every array with its section, dtype, shape, byte offset and
SHA-256, so a damaged file is reported by the section it breaks. Arrays keep
the dtype they had in memory ("<f4" for the 32-bit training default, "<f8"
in 64-bit mode), which keeps save/load bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .model import ModelConfig, VQPromptModel
from .text import Vocabulary
from .vq import Codebook

MAGIC = b"VQPCKPT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: VQPromptModel
    vocab: Vocabulary
    step: int = 0
    config: dict = field(default_factory=dict)
    optimizer: nx.Adam | None = None
    extra: dict = field(default_factory=dict)


def _le(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))


def save(ckpt: Checkpoint, path) -> None:
    model = ckpt.model
    arrays: list[tuple[str, str, np.ndarray]] = []
    for name, p in model.params.items():
        arrays.append(("params", name, p.data))
    frozen = {name: not p.trainable for name, p in model.params.items()}
    cb_meta = None
    if model.codebook is not None:
        cb = model.codebook
        arrays.append(("codebook", cb.codes.name, cb.codes.data))
        arrays.append(("codebook", "select_count", cb.select_count))
        arrays.append(("codebook", "last_used_step", cb.last_used_step))
        cb_meta = {"name": cb.codes.name, "current_step": cb.current_step, "trainable": cb.codes.trainable}
    opt_meta = None
    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        opt_meta = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "t": opt.t}
        for name in sorted(opt.m):
            arrays.append(("optimizer", f"m/{name}", opt.m[name]))
            arrays.append(("optimizer", f"v/{name}", opt.v[name]))

    entries = []
    payload = bytearray()
    for section, name, a in arrays:
        raw = _le(np.asarray(a)).tobytes()
        entries.append(
            {
                "section": section,
                "name": name,
                "dtype": _le(np.asarray(a)).dtype.str,
                "shape": list(np.shape(a)),
                "offset": len(payload),
                "nbytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        payload.extend(raw)
    header = {
        "version": VERSION,
        "model_config": model.cfg.__dict__,
        "model_seed": model.seed,
        "dtype": np.dtype(model.dtype).name,
        "prompt_mode": model.prompt_mode,
        "lm_frozen": model.lm.frozen,
        "frozen": frozen,
        "vocab": list(model_vocab_tokens(ckpt.vocab)),
        "vocab_hash": ckpt.vocab.digest(),
        "codebook": cb_meta,
        "optimizer": opt_meta,
        "step": ckpt.step,
        "config": ckpt.config,
        "extra": ckpt.extra,
        "arrays": entries,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(bytes(payload))


def model_vocab_tokens(vocab: Vocabulary) -> tuple[str, ...]:
    return vocab.tokens[4:]


def read_header(path) -> tuple[dict, bytes]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (section: magic)")
    try:
        (n,) = struct.unpack("<Q", blob[8:16])
        header = json.loads(blob[16 : 16 + n].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header (section: header): {exc}") from None
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')} (section: header)")
    return header, blob[16 + n :]


def _arrays(header: dict, payload: bytes, path) -> dict[tuple[str, str], np.ndarray]:
    out = {}
    for e in header["arrays"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"] or hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise CheckpointError(f"{path}: corrupt array {e['name']!r} (section: {e['section']})")
        a = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        out[(e["section"], e["name"])] = a.astype(a.dtype.newbyteorder("="))
    return out


def load(path) -> Checkpoint:
    header, payload = read_header(path)
    arrays = _arrays(header, payload, path)
    vocab = Vocabulary(header["vocab"])
    if vocab.digest() != header["vocab_hash"]:
        raise CheckpointError(f"{path}: vocabulary hash mismatch (section: vocab)")
    dtype = np.float64 if header["dtype"] == "float64" else np.float32
    cfg = ModelConfig(**header["model_config"])
    with nx.precision(dtype):
        model = VQPromptModel(cfg, seed=header["model_seed"], dtype=dtype)
    for name, p in model.params.items():
        key = ("params", name)
        if key not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name!r} (section: params)")
        p.data = arrays[key].copy()
        if header["frozen"].get(name):
            p.freeze()
    model.lm.frozen = header["lm_frozen"]
    model.prompt_mode = header["prompt_mode"]
    cb_meta = header.get("codebook")
    if cb_meta:
        try:
            codes = arrays[("codebook", cb_meta["name"])]
            cb = Codebook(codes.copy(), name=cb_meta["name"])
            cb.select_count = arrays[("codebook", "select_count")].copy()
            cb.last_used_step = arrays[("codebook", "last_used_step")].copy()
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing {exc} (section: codebook)") from None
        cb.current_step = cb_meta["current_step"]
        if not cb_meta.get("trainable", True):
            cb.codes.freeze()
        model.codebook = cb
    opt = None
    o = header.get("optimizer")
    if o:
        opt = nx.Adam(o["lr"], o["beta1"], o["beta2"], o["eps"])
        opt.t = o["t"]
        for (section, name), a in arrays.items():
            if section != "optimizer":
                continue
            kind, pname = name.split("/", 1)
            (opt.m if kind == "m" else opt.v)[pname] = a.copy()
    return Checkpoint(model, vocab, header["step"], header["config"], opt, header.get("extra", {}))
