"""Checkpoint files.

Layout::

    b"SWVXCKPT" | u32 version | u64 header length | header (UTF-8 JSON) | array data

The header carries the configs, their fingerprint, step/epoch counters,
PRNG state, AdamW hyperparameters and step counts, and an index of arrays
(name, dtype, shape, byte offset into the data section). Array names are
prefixed by kind: ``param/``, ``buffer/``, ``adam_m/``, ``adam_v/``.
Arrays are stored little-endian in their training width (``<f4`` by
default), so save -> load is bit-exact.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import RunConfig
from .errors import FormatError
from .model import Model, config_fingerprint
from .tensor import AdamW, AdamWState

MAGIC = b"SWVXCKPT"
VERSION = 1
_PREFIX = struct.Struct("<IQ")


@dataclass
class Checkpoint:
    run: RunConfig
    params: "OrderedDict[str, np.ndarray]"
    buffers: "OrderedDict[str, np.ndarray]"
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_t: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    prng: dict = field(default_factory=dict)
    fingerprint: str = ""

    def __post_init__(self):
        if not self.fingerprint:
            self.fingerprint = config_fingerprint(self.run.encoder, self.run.decoder)

    @classmethod
    def capture(cls, run: RunConfig, model: Model, opt: Optional[AdamW], step: int, epoch: int) -> "Checkpoint":
        states = opt.states if opt is not None else {}
        return cls(
            run=run,
            params=OrderedDict((k, v.data.copy()) for k, v in model.params.items()),
            buffers=OrderedDict((k, v.copy()) for k, v in model.buffers.items()),
            adam_m={k: s.m.copy() for k, s in states.items()},
            adam_v={k: s.v.copy() for k, s in states.items()},
            adam_t={k: s.t for k, s in states.items()},
            step=step,
            epoch=epoch,
            prng={"kind": "seedsequence", "seed": run.train.seed, "step": step},
        )

    def model(self, dtype=None) -> Model:
        dtype = dtype or next(iter(self.params.values())).dtype.type
        return Model(self.run.encoder, self.run.decoder, params=self.params, buffers=self.buffers, dtype=dtype)

    def optimizer(self, run: Optional[RunConfig] = None) -> AdamW:
        t = (run or self.run).train
        opt = AdamW(lr=t.lr, beta1=t.beta1, beta2=t.beta2, eps=t.eps, weight_decay=t.weight_decay)
        for name, m in self.adam_m.items():
            opt.states[name] = AdamWState(m.copy(), self.adam_v[name].copy(), self.adam_t[name], **opt.hyper())
        return opt


def _arrays(ckpt: Checkpoint):
    for kind, group in (("param", ckpt.params), ("buffer", ckpt.buffers),
                        ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        for name, arr in group.items():
            yield f"{kind}/{name}", arr


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    index, chunks, offset = [], [], 0
    for name, arr in _arrays(ckpt):
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        blob = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        index.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape), "offset": offset})
        chunks.append(blob)
        offset += len(blob)
    header = {
        "format_version": VERSION,
        "fingerprint": ckpt.fingerprint,
        "config": ckpt.run.to_dict(),
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "prng": ckpt.prng,
        "adam_t": ckpt.adam_t,
        "arrays": index,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + _PREFIX.pack(VERSION, len(head)) + head + b"".join(chunks)


def decode_checkpoint(blob: bytes, path=None) -> Checkpoint:
    if blob[:len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", offset=0, path=path)
    start = len(MAGIC) + _PREFIX.size
    if len(blob) < start:
        raise FormatError("truncated checkpoint prefix", offset=len(blob), path=path)
    version, head_len = _PREFIX.unpack_from(blob, len(MAGIC))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=len(MAGIC), path=path)
    if len(blob) < start + head_len:
        raise FormatError("truncated checkpoint header", offset=len(blob), path=path)
    try:
        header = json.loads(blob[start:start + head_len].decode())
    except ValueError as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}", offset=start, path=path) from None
    data = start + head_len
    groups = {"param": OrderedDict(), "buffer": OrderedDict(), "adam_m": {}, "adam_v": {}}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        lo = data + entry["offset"]
        hi = lo + count * dtype.itemsize
        if hi > len(blob):
            raise FormatError(f"truncated array {entry['name']}", offset=len(blob), path=path)
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=lo).reshape(entry["shape"])
        kind, name = entry["name"].split("/", 1)
        groups[kind][name] = arr.astype(dtype.newbyteorder("="), copy=True)
    run = RunConfig.from_dict(header["config"])
    ckpt = Checkpoint(run, groups["param"], groups["buffer"], groups["adam_m"], groups["adam_v"],
                      {k: int(v) for k, v in header["adam_t"].items()}, int(header["step"]),
                      int(header["epoch"]), header["prng"], header["fingerprint"])
    return ckpt


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(encode_checkpoint(ckpt))
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob, path=path)
