"""Self-describing checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"EBCKPT\\x00\\x01"
    4 bytes   uint32 format version
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header (config, array table, masks, architecture, meta)
    ...       raw array bytes, each little-endian, at the offsets in the table
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .masks import TicketMask
from .model import ModelConfig, SlimCoefficients, params_from_state
from .autodiff import Tensor

MAGIC = b"EBCKPT\x00\x01"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: object
    theta0: dict
    coeffs: SlimCoefficients | None = None
    masks: list = field(default_factory=list)
    architecture: dict | None = None
    meta: dict = field(default_factory=dict)


def _le(arr):
    arr = np.ascontiguousarray(arr)
    if arr.dtype.kind != "f" or arr.dtype.itemsize not in (4, 8):
        arr = arr.astype(np.float64)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(path, params, coeffs=None, masks=(), architecture=None, meta=None):
    arrays = [(f"params/{k}", v) for k, v in params.state().items()]
    arrays += [(f"theta0/{k}", v) for k, v in params.theta0.items()]
    if coeffs is not None:
        arrays += [(f"coeffs/{k}", t.data) for k, t in coeffs.named_tensors()]
    table = []
    blobs = []
    offset = 0
    for name, value in arrays:
        a = _le(value)
        table.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = {
        "config": params.config.to_dict(),
        "head_counts": params.head_counts(),
        "ffn_widths": params.ffn_widths(),
        "num_coeff_layers": len(coeffs.head) if coeffs is not None else 0,
        "arrays": table,
        "masks": [
            {"step": m.step, "heads": m.heads.astype(int).tolist(), "neurons": m.neurons.astype(int).tolist()}
            for m in masks
        ],
        "architecture": architecture.to_dict() if hasattr(architecture, "to_dict") else architecture,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not an earlybird checkpoint")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    base = _PREFIX.size + hlen
    groups = {"params": {}, "theta0": {}, "coeffs": {}}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        if start + entry["nbytes"] > len(raw):
            raise CheckpointError(f"{path}: array {entry['name']} extends past end of file")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]), count=int(np.prod(entry["shape"], dtype=np.int64)),
                            offset=start).reshape(entry["shape"])
        group, name = entry["name"].split("/", 1)
        groups[group][name] = arr.astype(arr.dtype.newbyteorder("="))
    config = ModelConfig.from_dict(header["config"])
    dtype = next(iter(groups["params"].values())).dtype
    params = params_from_state(config, groups["params"], header["head_counts"], header["ffn_widths"], dtype=dtype)
    params.theta0 = groups["theta0"]
    coeffs = None
    n = header["num_coeff_layers"]
    if n:
        c = groups["coeffs"]
        coeffs = SlimCoefficients(
            [Tensor(c[f"coef.head.{i}"], dtype=dtype) for i in range(n)],
            [Tensor(c[f"coef.neuron.{i}"], dtype=dtype) for i in range(n)],
        )
    masks = [TicketMask(np.array(m["heads"], bool), np.array(m["neurons"], bool), m["step"]) for m in header["masks"]]
    return Checkpoint(config, params, groups["theta0"], coeffs, masks, header["architecture"], header["meta"])
