"""Evaluation, random-ticket baselines, step timing, comparison tables and heatmaps."""
from __future__ import annotations

import csv
import io
import json
import re
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import no_grad
from .autodiff.ops import IGNORE_INDEX
from .model import forward
from .search import prune_heads, prune_neurons
from .masks import TicketMask
from .threads import thread_info

REPORT_SCHEMA = 1
COMPARE_COLUMNS = ["variant", "metric", "delta_vs_full", "flops_ratio", "time_ratio", "steps", "search_steps"]


@dataclass
class TimingSample:
    step: int
    duration_ns: int


def summarize_times(durations_ns):
    arr = np.asarray(durations_ns, dtype=np.float64)
    if arr.size == 0:
        return {"count": 0, "mean_ns": 0.0, "median_ns": 0.0, "p95_ns": 0.0, "min_ns": 0.0, "max_ns": 0.0, "total_ns": 0}
    return {
        "count": int(arr.size),
        "mean_ns": float(arr.mean()),
        "median_ns": float(np.median(arr)),
        "p95_ns": float(np.percentile(arr, 95)),
        "min_ns": float(arr.min()),
        "max_ns": float(arr.max()),
        "total_ns": int(arr.sum()),
    }


def measure_step_time(step_fn, batches, warmup_steps, measured_steps):
    """Time ``step_fn(batch)`` per step with a monotonic clock.

    ``batches`` must already be materialized (data preparation stays out of
    the timed region). The first ``warmup_steps`` samples are discarded.
    Returns ``(samples, summary)``.
    """
    needed = warmup_steps + measured_steps
    if len(batches) < needed:
        raise ValueError(f"need {needed} pre-built batches, got {len(batches)}")
    samples = []
    for i in range(needed):
        batch = batches[i]
        t0 = time.perf_counter_ns()
        step_fn(batch)
        t1 = time.perf_counter_ns()
        if t1 < t0:
            raise RuntimeError("monotonic clock went backwards")
        if i >= warmup_steps:
            samples.append(TimingSample(i, max(t1 - t0, 1)))
    summary = summarize_times([s.duration_ns for s in samples])
    summary.update(thread_info())
    summary["valid"] = measured_steps >= 30
    return samples, summary


def evaluate(params, task, split="val", coeffs=None, masks=None, batch_size=64):
    """Deterministic metrics over a whole split (dropout off).

    Classification: ``{"accuracy"}``. MLM: ``{"mlm_loss", "mlm_accuracy"}``
    over masked positions.
    """
    batches = task.eval_batches(split, batch_size)
    if not batches:
        raise ValueError(f"split {split!r} is empty")
    correct = 0
    count = 0
    loss_sum = 0.0
    with no_grad():
        for ids, targets in batches:
            logits = forward(params, coeffs, masks, ids).data.astype(np.float64)
            if task.kind == "classification":
                correct += int((logits.argmax(axis=-1) == targets).sum())
                count += len(targets)
                continue
            flat = logits.reshape(-1, logits.shape[-1])
            t = np.asarray(targets).reshape(-1)
            rows = np.flatnonzero(t != IGNORE_INDEX)
            z = flat[rows] - flat[rows].max(axis=1, keepdims=True)
            lse = np.log(np.exp(z).sum(axis=1))
            loss_sum += float((lse - z[np.arange(rows.size), t[rows]]).sum())
            correct += int((flat[rows].argmax(axis=1) == t[rows]).sum())
            count += rows.size
    if count == 0:
        raise ValueError(f"split {split!r} has no labelled positions")
    if task.kind == "classification":
        return {"accuracy": correct / count}
    return {"mlm_loss": loss_sum / count, "mlm_accuracy": correct / count}


def primary_metric(task):
    return "accuracy" if task.kind == "classification" else "mlm_loss"


def random_ticket(config, k, rho, scope, seed):
    """Uniformly random ticket with the same cardinalities as a drawn one."""
    rng = np.random.default_rng(seed)
    head_scores = rng.random((config.num_layers, config.num_heads))
    neuron_scores = rng.random((config.num_layers, config.d_ff))
    return TicketMask(prune_heads(head_scores, k), prune_neurons(neuron_scores, rho, scope))


@dataclass
class TrainingReport:
    run_id: str
    bundle_id: str
    variant: str
    seed: int
    config_hash: str
    metric_name: str
    metric: float
    metrics: dict
    steps: int
    search_steps: int
    train_steps: int
    flops_per_step: int
    search_flops_per_step: int
    total_flops: int
    params: int
    mask: dict = field(default_factory=dict)
    loss_trace: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA

    def to_dict(self, timing=True):
        d = asdict(self)
        if not timing:
            d.pop("timing")
        return d

    @property
    def total_time_ns(self):
        return self.timing.get("total_ns", 0)


def report_json(reports, timing=True, meta=None):
    doc = {
        "schema_version": REPORT_SCHEMA,
        "flops_convention": "train-step FLOPs = 3 x forward FLOPs x batch size",
        "reports": [r.to_dict(timing=timing) for r in reports],
    }
    if meta:
        doc["meta"] = meta
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def load_reports(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != REPORT_SCHEMA:
        raise ValueError(f"unsupported report schema {doc.get('schema_version')}")
    return [TrainingReport(**r) for r in doc["reports"]]


def strip_timing(doc):
    """Copy of a parsed report document without timing fields."""
    out = json.loads(json.dumps(doc))
    for r in out.get("reports", []):
        r.pop("timing", None)
    out.pop("meta", None)
    return out


def compare_bundle(reports):
    """Per-variant rows relative to the ``full`` variant of the same bundle."""
    if not reports:
        raise ValueError("no reports to compare")
    bundles = {r.bundle_id for r in reports}
    if len(bundles) != 1:
        raise ValueError(f"reports come from different bundles: {sorted(bundles)}")
    full = next((r for r in reports if r.variant == "full"), None)
    if full is None:
        raise ValueError("bundle has no 'full' variant to compare against")
    rows = []
    for r in reports:
        rows.append(
            {
                "variant": r.variant,
                "metric": r.metric,
                "delta_vs_full": r.metric - full.metric,
                "flops_ratio": r.total_flops / full.total_flops,
                "time_ratio": (r.total_time_ns / full.total_time_ns) if full.total_time_ns else float("nan"),
                "steps": r.steps,
                "search_steps": r.search_steps,
            }
        )
    return rows


def comparison_csv(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COMPARE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] for k in COMPARE_COLUMNS})
    return buf.getvalue()


def write_distance_csv(path, matrix, steps):
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step"] + [str(s) for s in steps])
        for s, row in zip(steps, matrix):
            writer.writerow([str(s)] + [repr(float(v)) for v in row])


def read_distance_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty distance file")
    steps = [int(s) for s in rows[0][1:]]
    matrix = np.array([[float(v) for v in row[1:]] for row in rows[1:]], dtype=np.float64)
    if matrix.shape != (len(steps), len(steps)):
        raise ValueError(f"{path}: distance matrix is {matrix.shape}, expected square of {len(steps)}")
    return steps, matrix


def heatmap_pixels(matrix):
    """pixel = round(255 * distance): identical masks are black."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"heatmap needs a square matrix, got shape {matrix.shape}")
    if matrix.size and (matrix.min() < 0 or matrix.max() > 1):
        raise ValueError("distances must lie in [0, 1]")
    return np.floor(255.0 * matrix + 0.5).astype(np.uint8)


def write_pgm(path, pixels, cell=1):
    img = np.kron(pixels, np.ones((cell, cell), dtype=np.uint8)) if cell > 1 else pixels
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.astype(np.uint8).tobytes())


_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    # exactly one whitespace byte follows maxval; pixel bytes may look like whitespace
    header = _PGM_HEADER.match(data)
    if header is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in header.groups())
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    body = data[header.end():]
    if len(body) < w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w)


def emit_heatmap(distance_matrix, csv_path, pgm_path, steps=None, cell=1):
    """Write the distance matrix as CSV (step headers) and as a grayscale PGM."""
    pixels = heatmap_pixels(distance_matrix)
    steps = steps if steps is not None else list(range(len(pixels)))
    if csv_path:
        write_distance_csv(csv_path, distance_matrix, steps)
    if pgm_path:
        write_pgm(pgm_path, pixels, cell)
    return pixels


def seed_summary(values):
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0, "n": int(arr.size)}

