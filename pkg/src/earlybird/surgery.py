"""Turn a ticket plus rewound weights into a physically smaller model."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad
from .model import SlimCoefficients, forward, params_from_state


@dataclass
class PrunedArchitecture:
    config: object
    kept_heads: list
    kept_neurons: list
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kept_heads = [tuple(int(i) for i in row) for row in self.kept_heads]
        self.kept_neurons = [tuple(int(i) for i in row) for row in self.kept_neurons]
        self.validate()

    def validate(self):
        cfg = self.config
        if len(self.kept_heads) != cfg.num_layers or len(self.kept_neurons) != cfg.num_layers:
            raise ValueError("kept index lists must have one entry per layer")
        for kind, rows, limit in (("head", self.kept_heads, cfg.num_heads), ("neuron", self.kept_neurons, cfg.d_ff)):
            for layer, row in enumerate(rows):
                if not row:
                    raise ValueError(f"layer {layer} keeps no {kind}s")
                if any(b <= a for a, b in zip(row, row[1:])):
                    raise ValueError(f"layer {layer} {kind} indices are not strictly increasing")
                if row[0] < 0 or row[-1] >= limit:
                    raise ValueError(f"layer {layer} {kind} index out of range [0, {limit})")

    @property
    def heads_kept(self):
        return [len(r) for r in self.kept_heads]

    @property
    def d_ff_kept(self):
        return [len(r) for r in self.kept_neurons]

    def to_dict(self):
        return {
            "kept_heads": [list(r) for r in self.kept_heads],
            "kept_neurons": [list(r) for r in self.kept_neurons],
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, config, d):
        return cls(config, d["kept_heads"], d["kept_neurons"], d.get("provenance", {}))


def architecture_from_mask(config, mask, provenance=None):
    if mask.heads.shape != (config.num_layers, config.num_heads) or mask.neurons.shape != (
        config.num_layers,
        config.d_ff,
    ):
        raise ValueError(
            f"mask shape heads {mask.heads.shape} / neurons {mask.neurons.shape} does not match config "
            f"({config.num_layers}x{config.num_heads}, {config.num_layers}x{config.d_ff})"
        )
    prov = {"mask_hash": mask.digest()}
    prov.update(provenance or {})
    return PrunedArchitecture(
        config,
        [np.flatnonzero(row) for row in mask.heads],
        [np.flatnonzero(row) for row in mask.neurons],
        prov,
    )


def slice_state(source, config, arch, coeffs=None):
    """Name -> array state of the pruned model, sliced from ``source``.

    With ``coeffs`` given, kept head coefficients are folded into the
    matching W_O rows and kept neuron coefficients into W2 rows.
    """
    dh = config.d_head
    out = {}
    for name, value in source.items():
        if not name.startswith("layers."):
            out[name] = np.array(value, copy=True)
    for layer in range(config.num_layers):
        p = f"layers.{layer}"
        heads = arch.kept_heads[layer]
        neurons = np.array(arch.kept_neurons[layer])
        for new, old in enumerate(heads):
            for kind in ("wq", "wk", "wv"):
                out[f"{p}.{kind}.{new}"] = np.array(source[f"{p}.{kind}.{old}"], copy=True)
        wo = np.asarray(source[f"{p}.wo"])
        rows = [wo[h * dh:(h + 1) * dh] for h in heads]
        w2 = np.asarray(source[f"{p}.w2"])[neurons].copy()
        if coeffs is not None:
            hc = coeffs.head[layer].data
            nc = coeffs.neuron[layer].data
            rows = [r * hc[h] for r, h in zip(rows, heads)]
            w2 = w2 * nc[neurons][:, None]
        out[f"{p}.wo"] = np.concatenate(rows, axis=0)
        out[f"{p}.w1"] = np.asarray(source[f"{p}.w1"])[:, neurons].copy()
        out[f"{p}.b1"] = np.asarray(source[f"{p}.b1"])[neurons].copy()
        out[f"{p}.w2"] = w2
        for name in ("b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            out[f"{p}.{name}"] = np.array(source[f"{p}.{name}"], copy=True)
    return out


def apply_ticket(source, config, mask, retain_coeffs=None, provenance=None):
    """Structurally prune ``source`` (usually theta0) according to ``mask``.

    Returns ``(PrunedArchitecture, ModelParams)``. Learned coefficients are
    discarded unless ``retain_coeffs`` is given, in which case they are
    folded into the surviving output-projection rows.
    """
    arch = architecture_from_mask(config, mask, provenance)
    state = slice_state(source, config, arch, retain_coeffs)
    params = params_from_state(config, state, arch.heads_kept, arch.d_ff_kept)
    params.theta0 = {k: v.copy() for k, v in state.items()}
    return arch, params


def equivalence_check(source, config, mask, pruned_params, probe_batches):
    """Max |logit difference| between the coefficient-masked full model and the pruned one.

    The full model runs on ``source`` with c = 1 on kept and 0 on pruned units.
    """
    if pruned_params.head_counts() != [int(n) for n in mask.kept_heads()] or pruned_params.ffn_widths() != [
        int(n) for n in mask.kept_neurons()
    ]:
        raise ValueError("pruned model dimensions do not match the mask")
    full = params_from_state(config, source)
    override = SlimCoefficients.from_mask(mask)
    worst = 0.0
    with no_grad():
        for ids in probe_batches:
            a = forward(full, override, None, ids).data
            b = forward(pruned_params, None, None, ids).data
            worst = max(worst, float(np.max(np.abs(a.astype(np.float64) - b))))
    return worst


def rewind_policy(stage, theta0, pretrained=None):
    """Weights that surgery slices from: the init snapshot, or a pre-trained checkpoint."""
    if stage == "pretraining":
        return theta0
    if stage == "finetuning":
        if pretrained is None:
            raise ValueError("finetuning rewind needs a pre-trained checkpoint")
        return pretrained
    raise ValueError(f"unknown stage {stage!r}")


def parameter_count(config, arch=None):
    """Closed-form parameter count for the full or pruned architecture."""
    d, dh = config.d_model, config.d_head
    heads = arch.heads_kept if arch else [config.num_heads] * config.num_layers
    widths = arch.d_ff_kept if arch else [config.d_ff] * config.num_layers
    total = config.vocab_size * d + config.max_seq_len * d + 2 * d
    for h, f in zip(heads, widths):
        total += h * (3 * d * dh + dh * d) + f * (d + 1 + d) + d + 4 * d
    total += d * config.output_dim + config.output_dim
    return total
