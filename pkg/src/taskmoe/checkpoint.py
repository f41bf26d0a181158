"""Single-file checkpoint container.

Layout::

    b"TASKMOE\\0"          8-byte magic
    uint32 LE             format version
    uint64 LE             header length N
    N bytes               UTF-8 JSON header
    payload               concatenated float64 little-endian tensors

The header carries the model config, task registry, vocabulary (tokens plus
an optional path reference), free-form metadata, and a tensor index of
``{name, shape, offset}`` entries into the payload.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TASKMOE\0"
VERSION = 1


class CheckpointError(IOError):
    pass


@dataclass
class Checkpoint:
    config: dict
    registry: dict
    vocab_tokens: list[str]
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    vocab_path: str | None = None


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    index = []
    offset = 0
    blobs = []
    for name, arr in ckpt.tensors.items():
        data = np.array(arr, dtype="<f8", order="C")  # keeps 0-d shape, unlike ascontiguousarray
        index.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {
        "config": ckpt.config,
        "registry": ckpt.registry,
        "vocab": {"path": ckpt.vocab_path, "tokens": ckpt.vocab_tokens},
        "meta": ckpt.meta,
        "tensors": index,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", VERSION, len(raw)))
            fh.write(raw)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"failed to write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + 12
    header = json.loads(buf[start:start + hlen].decode("utf-8"))
    payload = memoryview(buf)[start + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.astype(np.float64).reshape(shape)
    vocab = header["vocab"]
    return Checkpoint(header["config"], header["registry"], vocab["tokens"], tensors,
                      header.get("meta", {}), vocab.get("path"))


def save_model(path: str | Path, model, vocab, meta: dict | None = None,
               extra: dict[str, np.ndarray] | None = None, vocab_path: str | None = None) -> None:
    """Write a MoeModel or DenseModel (plus optional optimizer arrays in ``extra``)."""
    from .model import DenseModel

    meta = dict(meta or {})
    tensors = {f"param.{k}": v.data for k, v in model.params.items()}
    tensors.update(extra or {})
    if isinstance(model, DenseModel):
        meta["kind"] = "dense"
        meta["task_key"] = model.task_key
        meta["mixes"] = [[layer, side, [[g, sub] for g, sub in terms]]
                         for (layer, side), terms in sorted(model.mixes.items())]
        registry = {}
    else:
        meta["kind"] = "moe"
        meta.setdefault("seed", model.seed)
        registry = model.registry.to_dict()
    save_checkpoint(path, Checkpoint(model.cfg.to_dict(), registry, list(vocab.tokens), tensors,
                                     meta, vocab_path))


def load_model(path: str | Path):
    """Return ``(model, vocab, checkpoint)``."""
    from . import tensor as T
    from .model import DenseModel, MoeConfig, MoeModel
    from .tasks import TaskRegistry
    from .vocab import Vocab

    ckpt = load_checkpoint(path)
    cfg = MoeConfig.from_dict(ckpt.config)
    params = {k[len("param."):]: T.parameter(v, k[len("param."):])
              for k, v in ckpt.tensors.items() if k.startswith("param.")}
    vocab = Vocab.from_tokens(ckpt.vocab_tokens)
    if ckpt.meta.get("kind") == "dense":
        mixes = {(int(layer), side): [(float(g), sub) for g, sub in terms]
                 for layer, side, terms in ckpt.meta["mixes"]}
        model = DenseModel(cfg, params, mixes, ckpt.meta.get("task_key", ""))
    else:
        model = MoeModel(cfg, TaskRegistry.from_dict(ckpt.registry), ckpt.meta.get("seed", 0), params)
    return model, vocab, ckpt
