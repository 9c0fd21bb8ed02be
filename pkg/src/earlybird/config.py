"""Pipeline configuration: JSON document, strict keys, dotted-key overrides.

Sections and their keys::

    seed                       int
    model.*                    ModelConfig fields (vocab_size, task_head and
                               num_classes are filled in from the task)
    task.*                     TaskSpec fields
    search.*                   SearchConfig fields ("lambda" for the L1 strength)
    train.*                    TrainSchedule of the full-model baseline
    efficient.*                TrainSchedule of the pruned (efficient) stage
    harness.*                  HarnessConfig fields
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .model import ModelConfig
from .optim import TrainSchedule
from .search import SearchConfig


class ConfigError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


@dataclass
class TaskSpec:
    kind: str = "classification"
    generator: str = "majority"
    corpus: str = "synthetic"
    corpus_sentences: int = 2000
    seq_len: int = 16
    num_classes: int = 2
    num_train: int = 2000
    num_val: int = 1000
    mask_prob: float = 0.15
    corruption_split: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    eval_batches: int = 8
    eval_batch_size: int = 32
    data_seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("mlm", "classification"):
            raise ValueError(f"task kind must be 'mlm' or 'classification', got {self.kind!r}")
        if not 0.0 < self.mask_prob < 1.0:
            raise ValueError("mask_prob must be in (0, 1)")
        if len(self.corruption_split) != 3 or abs(sum(self.corruption_split) - 1.0) > 1e-9:
            raise ValueError("corruption_split must be three fractions summing to 1")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")


@dataclass
class HarnessConfig:
    variants: list = field(default_factory=lambda: ["full", "earlybert", "random_ticket"])
    stage: str = "pretraining"
    pretrained_checkpoint: str | None = None
    retain_coefficients: bool = False
    eval_interval: int = 0
    random_ticket_seed_offset: int = 1000

    def __post_init__(self):
        known = {"full", "earlybert", "random_ticket", "reduced_full"}
        bad = [v for v in self.variants if v not in known]
        if bad:
            raise ValueError(f"unknown variants {bad}; known: {sorted(known)}")
        if self.stage not in ("pretraining", "finetuning"):
            raise ValueError(f"stage must be 'pretraining' or 'finetuning', got {self.stage!r}")


MODEL_KEYS = {f.name for f in fields(ModelConfig)}
SECTIONS = {
    "task": TaskSpec,
    "search": SearchConfig,
    "train": TrainSchedule,
    "efficient": TrainSchedule,
    "harness": HarnessConfig,
}


def _json_key(name):
    return name[:-1] if name.endswith("_") else name


def section_to_dict(obj):
    return {_json_key(k): v for k, v in asdict(obj).items()}


def section_from_dict(cls, d, section):
    names = {_json_key(f.name): f.name for f in fields(cls)}
    unknown = sorted(set(d) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(section + '.' + k for k in unknown)}")
    return cls(**{names[k]: v for k, v in d.items()})


@dataclass
class PipelineConfig:
    seed: int = 0
    model: dict = field(default_factory=dict)
    task: TaskSpec = field(default_factory=TaskSpec)
    search: SearchConfig = field(default_factory=SearchConfig)
    train: TrainSchedule = field(default_factory=lambda: TrainSchedule(epochs=3))
    efficient: TrainSchedule = field(default_factory=lambda: TrainSchedule(epochs=2, lr_scale=2.0))
    harness: HarnessConfig = field(default_factory=HarnessConfig)

    def to_dict(self):
        out = {"seed": self.seed, "model": dict(self.model)}
        for name in SECTIONS:
            out[name] = section_to_dict(getattr(self, name))
        return out

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(d)
        unknown = sorted(set(d) - {"seed", "model", *SECTIONS})
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
        model = d.get("model", {})
        bad = sorted(set(model) - MODEL_KEYS)
        if bad:
            raise ConfigError(f"unknown key(s) in 'model': {', '.join('model.' + k for k in bad)}")
        kwargs = {"seed": int(d.get("seed", 0)), "model": model}
        defaults = cls()
        for name, sec_cls in SECTIONS.items():
            base = section_to_dict(getattr(defaults, name))
            base.update(d.get(name, {}))
            if name in d:
                section_from_dict(sec_cls, d[name], name)  # reject unknown keys
            kwargs[name] = section_from_dict(sec_cls, base, name)
        return cls(**kwargs)

    def digest(self):
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def model_config(self, vocab_size, max_seq_len=None):
        d = {"num_layers": 2, "num_heads": 4, "d_model": 64, "d_ff": 256}
        d.update(self.model)
        d["vocab_size"] = vocab_size
        d["task_head"] = self.task.kind if self.task.kind == "mlm" else "classification"
        d["num_classes"] = self.task.num_classes
        d.setdefault("max_seq_len", max_seq_len or self.task.seq_len)
        return ModelConfig.from_dict(d)


def parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw, overrides):
    """Apply ``section.key=value`` strings to a raw config dict (copy returned)."""
    out = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.split(".")
        if parts == ["seed"]:
            out["seed"] = parse_value(value)
            continue
        if len(parts) != 2:
            raise ConfigError(f"unknown key {key!r}")
        section, name = parts
        if section == "model":
            if name not in MODEL_KEYS:
                raise ConfigError(f"unknown key {key!r}")
        elif section in SECTIONS:
            valid = {_json_key(f.name) for f in fields(SECTIONS[section])}
            if name not in valid:
                raise ConfigError(f"unknown key {key!r}")
        else:
            raise ConfigError(f"unknown key {key!r}")
        out.setdefault(section, {})[name] = parse_value(value)
    return out


def load_config(path, overrides=()):
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return PipelineConfig.from_dict(apply_overrides(raw, overrides))
