"""Binary keep/prune masks over attention heads and FFN neurons."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


@dataclass(eq=False)
class TicketMask:
    """``heads`` is (L, n) and ``neurons`` is (L, d_ff); True means keep."""

    heads: np.ndarray
    neurons: np.ndarray
    step: int | None = None

    def __post_init__(self):
        self.heads = np.asarray(self.heads, dtype=bool)
        self.neurons = np.asarray(self.neurons, dtype=bool)
        if self.heads.ndim != 2 or self.neurons.ndim != 2:
            raise ValueError("head and neuron masks must be 2-d (layers x units)")
        if self.heads.shape[0] != self.neurons.shape[0]:
            raise ValueError(f"layer count differs: heads {self.heads.shape}, neurons {self.neurons.shape}")

    @classmethod
    def ones(cls, config):
        return cls(
            np.ones((config.num_layers, config.num_heads), dtype=bool),
            np.ones((config.num_layers, config.d_ff), dtype=bool),
        )

    @property
    def num_layers(self):
        return self.heads.shape[0]

    @property
    def num_bits(self):
        return self.heads.size + self.neurons.size

    def bits(self):
        return np.concatenate([self.heads.reshape(-1), self.neurons.reshape(-1)]).astype(np.uint8)

    def kept_heads(self):
        return self.heads.sum(axis=1)

    def kept_neurons(self):
        return self.neurons.sum(axis=1)

    def sparsity(self):
        """(pruned heads, pruned neurons) totals."""
        return int((~self.heads).sum()), int((~self.neurons).sum())

    def is_all_ones(self):
        return bool(self.heads.all() and self.neurons.all())

    def digest(self):
        h = hashlib.sha256()
        h.update(repr((self.heads.shape, self.neurons.shape)).encode())
        h.update(np.packbits(self.bits()).tobytes())
        return h.hexdigest()[:16]

    def same_bits(self, other):
        return (
            self.heads.shape == other.heads.shape
            and self.neurons.shape == other.neurons.shape
            and np.array_equal(self.heads, other.heads)
            and np.array_equal(self.neurons, other.neurons)
        )

    def __eq__(self, other):
        return isinstance(other, TicketMask) and self.same_bits(other)

    def __hash__(self):
        return hash(self.digest())


def _bitstring(row):
    return "".join("1" if b else "0" for b in row)


def format_mask(mask):
    lines = [f"layer={i} kind=head bits={_bitstring(row)}" for i, row in enumerate(mask.heads)]
    lines += [f"layer={i} kind=neuron bits={_bitstring(row)}" for i, row in enumerate(mask.neurons)]
    return "\n".join(lines) + "\n"


def write_mask_file(path, masks):
    """Write one mask, or a sequence of snapshots each preceded by ``step=<s>``."""
    if isinstance(masks, TicketMask):
        text = format_mask(masks)
    else:
        text = "".join(f"step={m.step}\n" + format_mask(m) for m in masks)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def parse_masks(text):
    """Inverse of :func:`write_mask_file`; always returns a list."""
    blocks = []
    current = None

    def start(step):
        nonlocal current
        current = {"step": step, "head": {}, "neuron": {}}
        blocks.append(current)

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("step="):
            start(int(line[5:]))
            continue
        fields = dict(part.split("=", 1) for part in line.split())
        if set(fields) != {"layer", "kind", "bits"} or fields["kind"] not in ("head", "neuron"):
            raise ValueError(f"line {lineno}: malformed mask line {raw!r}")
        if current is None:
            start(None)
        bits = fields["bits"]
        if set(bits) - {"0", "1"}:
            raise ValueError(f"line {lineno}: bits must be 0/1")
        current[fields["kind"]][int(fields["layer"])] = [c == "1" for c in bits]

    masks = []
    for b in blocks:
        n_layers = len(b["head"])
        if sorted(b["head"]) != list(range(n_layers)) or sorted(b["neuron"]) != list(range(n_layers)):
            raise ValueError("mask block must list every layer once for each kind")
        heads = [b["head"][i] for i in range(n_layers)]
        neurons = [b["neuron"][i] for i in range(n_layers)]
        masks.append(TicketMask(np.array(heads), np.array(neurons), step=b["step"]))
    return masks


def read_mask_file(path):
    with open(path, encoding="utf-8") as fh:
        return parse_masks(fh.read())
