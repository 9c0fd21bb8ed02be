"""Tasks, the training loop, and the end-to-end search -> draw -> surgery -> train pipeline."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import backward, cross_entropy, reshape
from .autodiff.ops import IGNORE_INDEX
from .autodiff.tensor import NonFiniteError
from .data import (
    build_vocab,
    corrupt,
    load_corpus,
    make_classification_task,
    make_mlm_batch,
    synthetic_corpus,
)
from .checkpoint import load_checkpoint
from .flops import train_step_flops
from .harness import TrainingReport, report_json, evaluate, primary_metric, random_ticket, summarize_times
from .masks import TicketMask
from .model import forward, init_model, no_decay, params_from_state
from .optim import OptimizerState, lr_at, optimizer_step
from .search import run_search
from .surgery import apply_ticket, parameter_count, rewind_policy
from .threads import configure_threads, thread_info

log = logging.getLogger(__name__)

LOSS_TRACE_COLUMNS = ["step", "loss", "lr", "eval_metric"]


def derive_seed(*keys):
    """Stable 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


class TrainingDiverged(NonFiniteError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


def mlm_loss(params, coeffs, masks, batch, rng=None):
    ids, targets = batch
    logits = forward(params, coeffs, masks, ids, rng)
    v = logits.shape[-1]
    return cross_entropy(reshape(logits, (-1, v)), np.asarray(targets).reshape(-1))


def classification_loss(params, coeffs, masks, batch, rng=None):
    ids, labels = batch
    return cross_entropy(forward(params, coeffs, masks, ids, rng), np.asarray(labels))


class MLMTask:
    """Masked-LM over a character corpus; the last 10% of the corpus is held out."""

    kind = "mlm"

    def __init__(self, spec, seed):
        text = synthetic_corpus(spec.corpus_sentences, seed) if spec.corpus == "synthetic" else load_corpus(spec.corpus)
        self.spec = spec
        self.vocab = build_vocab(text)
        ids = self.vocab.encode(text)
        cut = int(0.9 * ids.size)
        self.train_ids, self.val_ids = ids[:cut], ids[cut:]
        self.data_seed = seed
        self.seq_len = spec.seq_len
        n = spec.eval_batches * spec.eval_batch_size
        self._eval = {
            "val": make_mlm_batch(self.val_ids, self.vocab, self.seq_len, spec.mask_prob, derive_seed(seed, 1),
                                  n, spec.corruption_split),
            "train": make_mlm_batch(self.train_ids, self.vocab, self.seq_len, spec.mask_prob, derive_seed(seed, 2),
                                    n, spec.corruption_split),
        }

    def steps_per_epoch(self, batch_size):
        return max(1, self.train_ids.size // (batch_size * (self.seq_len - 1)))

    def train_batch(self, step, batch_size):
        return make_mlm_batch(self.train_ids, self.vocab, self.seq_len, self.spec.mask_prob,
                              derive_seed(self.data_seed, 0, step), batch_size, self.spec.corruption_split)

    mlm_batch = train_batch

    def loss(self, params, coeffs, masks, batch, rng=None):
        return mlm_loss(params, coeffs, masks, batch, rng)

    def eval_batches(self, split, batch_size):
        ids, targets = self._eval[split]
        return [(ids[i:i + batch_size], targets[i:i + batch_size]) for i in range(0, len(ids), batch_size)]


class ClassificationTask:
    """Synthetic sequence classification; training order reshuffled every epoch."""

    kind = "classification"

    def __init__(self, spec, seed):
        self.spec = spec
        self.data = make_classification_task(spec.generator, spec.seq_len, spec.num_train, spec.num_val, seed)
        self.vocab = self.data.vocab
        self.data_seed = seed
        self.seq_len = spec.seq_len
        self._order = {}

    def steps_per_epoch(self, batch_size):
        return max(1, len(self.data.train_x) // batch_size)

    def _epoch_order(self, epoch):
        if epoch not in self._order:
            rng = np.random.default_rng(np.random.SeedSequence([self.data_seed, 0, epoch]))
            self._order[epoch] = rng.permutation(len(self.data.train_x))
        return self._order[epoch]

    def train_batch(self, step, batch_size):
        spe = self.steps_per_epoch(batch_size)
        epoch, pos = divmod(step, spe)
        rows = self._epoch_order(epoch)[pos * batch_size:(pos + 1) * batch_size]
        return self.data.train_x[rows], self.data.train_y[rows]

    def mlm_batch(self, step, batch_size):
        """Corrupted training rows, for searching with the MLM objective."""
        rng = np.random.default_rng(derive_seed(self.data_seed, 3, step))
        rows = self.data.train_x[rng.integers(0, len(self.data.train_x), size=batch_size)]
        inputs, targets = corrupt(rows[:, 1:], self.vocab, self.spec.mask_prob, rng, self.spec.corruption_split)
        ignore = np.full((batch_size, 1), IGNORE_INDEX, dtype=np.int64)
        return np.concatenate([rows[:, :1], inputs], axis=1), np.concatenate([ignore, targets], axis=1)

    def loss(self, params, coeffs, masks, batch, rng=None):
        return classification_loss(params, coeffs, masks, batch, rng)

    def eval_batches(self, split, batch_size):
        x, y = (self.data.val_x, self.data.val_y) if split == "val" else (self.data.train_x, self.data.train_y)
        return [(x[i:i + batch_size], y[i:i + batch_size]) for i in range(0, len(x), batch_size)]


def build_task(spec, seed):
    seed = spec.data_seed if spec.data_seed is not None else seed
    if spec.kind == "mlm":
        return MLMTask(spec, seed)
    return ClassificationTask(spec, seed)


@dataclass
class TrainResult:
    params: object
    losses: list
    lrs: list
    evals: dict
    step_times_ns: list
    skipped_steps: list = field(default_factory=list)

    @property
    def steps(self):
        return len(self.losses)


def _dump_state(dump_dir, params, step):
    os.makedirs(dump_dir, exist_ok=True)
    path = os.path.join(dump_dir, f"diverged_step{step}.npz")
    np.savez(path, **params.state())
    return path


def train(params, task, schedule, masks=None, coeffs=None, eval_interval=0, total_steps=None, seed=0,
          dump_dir=None):
    """Train ``params`` in place with AdamW; the slimming coefficients stay frozen.

    Runs ``total_steps`` (default: the schedule's executed step count) steps
    on the task's deterministic batch sequence and times compute only.
    """
    bs = schedule.batch_size
    total = total_steps if total_steps is not None else schedule.executed_steps(task.steps_per_epoch(bs))
    names = [n for n, _ in params.named_tensors()]
    tensors = params.tensors()
    state = OptimizerState.for_params(tensors, [not no_decay(n) for n in names], weight_decay=schedule.weight_decay)
    rng = np.random.default_rng([seed, schedule.seed]) if params.config.dropout_prob > 0 else None
    result = TrainResult(params, [], [], {}, [])
    for t in tensors:
        t.requires_grad = True
    if coeffs is not None:
        for t in coeffs.tensors():
            t.requires_grad = False

    for step in range(total):
        batch = task.train_batch(step, bs)
        lr = lr_at(step, schedule, total)
        t0 = time.perf_counter_ns()
        for t in tensors:
            t.grad = None
        loss = task.loss(params, coeffs, masks, batch, rng)
        value = float(loss.data)
        if not np.isfinite(value):
            path = _dump_state(dump_dir, params, step) if dump_dir else None
            raise TrainingDiverged(f"non-finite training loss {value} at step {step}", path)
        if loss.empty_batch:
            result.skipped_steps.append(step)
        else:
            backward(loss)
            optimizer_step(tensors, [t.grad for t in tensors], state, lr)
        t1 = time.perf_counter_ns()
        if t1 < t0:
            raise RuntimeError("monotonic clock went backwards")
        result.step_times_ns.append(max(t1 - t0, 1))
        result.losses.append(value)
        result.lrs.append(lr)
        if eval_interval and (step + 1) % eval_interval == 0:
            result.evals[step] = evaluate(params, task, "val", coeffs, masks)[primary_metric(task)]
    return result


def loss_trace_csv(result):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_TRACE_COLUMNS)
    for step, (loss, lr) in enumerate(zip(result.losses, result.lrs)):
        ev = result.evals.get(step)
        w.writerow([step, repr(loss), repr(lr), "" if ev is None else repr(ev)])
    return buf.getvalue()


def with_mlm_head(params, seed):
    """Copy of ``params`` whose output head is a fresh vocabulary projection."""
    cfg = dataclasses.replace(params.config, task_head="mlm")
    fresh, _ = init_model(cfg, seed)
    out = params.copy()
    out.config = cfg
    out.head_w, out.head_b = fresh.head_w, fresh.head_b
    return out


def search_for_ticket(params, coeffs, task, config, full_steps):
    """Run the searching stage from ``params``.

    Returns ``(SearchResult, model config used while searching)``; the latter
    differs from ``params.config`` only when a temporary MLM head is attached.
    """
    sc, sched = config.search, config.train
    bs = sched.batch_size
    if sc.objective == "mlm" and task.kind != "mlm":
        params = with_mlm_head(params, derive_seed(config.seed, 4))
        batch_fn = lambda step: task.mlm_batch(step, bs)  # noqa: E731
        loss_fn = lambda p, c, b: mlm_loss(p, c, None, b)  # noqa: E731
    else:
        batch_fn = lambda step: task.train_batch(step, bs)  # noqa: E731
        loss_fn = lambda p, c, b: task.loss(p, c, None, b)  # noqa: E731
    lr_fn = lambda step: lr_at(min(step, full_steps - 1), sched, full_steps)  # noqa: E731
    return run_search(params, coeffs, batch_fn, loss_fn, sc, lr_fn, sched.weight_decay), params.config


@dataclass
class RunBundle:
    config: object
    bundle_id: str
    task: object
    model_config: object
    reports: list
    results: dict
    search: object = None
    mask: TicketMask | None = None
    random_mask: TicketMask | None = None
    architecture: object = None
    params: dict = field(default_factory=dict)
    theta0: dict = field(default_factory=dict)

    def report(self, variant):
        return next(r for r in self.reports if r.variant == variant)


def _initial_weights(config, model_cfg, seed):
    params, coeffs = init_model(model_cfg, seed)
    h = config.harness
    if h.stage == "finetuning":
        if not h.pretrained_checkpoint:
            raise ValueError("finetuning stage needs harness.pretrained_checkpoint")
        ck = load_checkpoint(h.pretrained_checkpoint)
        pre = ck.params.state()
        # encoder weights from the checkpoint, task head from the fresh init
        pre = {k: v for k, v in pre.items() if not k.startswith("head_")}
        state = params.state()
        for k, v in pre.items():
            if state[k].shape != v.shape:
                raise ValueError(f"checkpoint tensor {k} has shape {v.shape}, model expects {state[k].shape}")
        state.update(pre)
        source = rewind_policy("finetuning", params.theta0, state)
        params = params_from_state(model_cfg, source)
        params.theta0 = {k: v.copy() for k, v in source.items()}
    return params, coeffs


def _report(bundle_id, config, variant, task, seed, params, result, metrics, flops_step, search_steps=0,
            search_flops_step=0, search_times=(), mask=None, arch=None):
    steps = result.steps
    train_times = list(result.step_times_ns)
    timing = summarize_times(train_times)
    timing["train_total_ns"] = int(sum(train_times))
    timing["search_total_ns"] = int(sum(search_times))
    timing["total_ns"] = timing["train_total_ns"] + timing["search_total_ns"]
    timing.update(thread_info())
    mask_info = {}
    if mask is not None:
        mask_info = {
            "hash": mask.digest(),
            "heads_kept": [int(n) for n in mask.kept_heads()],
            "neurons_kept": [int(n) for n in mask.kept_neurons()],
            "pruned": list(mask.sparsity()),
            "provenance": arch.provenance if arch is not None else {},
        }
    name = primary_metric(task)
    return TrainingReport(
        run_id=f"{bundle_id}-{variant}",
        bundle_id=bundle_id,
        variant=variant,
        seed=seed,
        config_hash=config.digest(),
        metric_name=name,
        metric=float(metrics[name]),
        metrics={k: float(v) for k, v in metrics.items()},
        steps=search_steps + steps,
        search_steps=search_steps,
        train_steps=steps,
        flops_per_step=int(flops_step),
        search_flops_per_step=int(search_flops_step),
        total_flops=int(search_steps * search_flops_step + steps * flops_step),
        params=int(parameter_count(params.config, arch)),
        mask=mask_info,
        loss_trace=[float(x) for x in result.losses],
        timing=timing,
    )


def run_earlybert(config, seed=None, out_dir=None, variants=None):
    """Search, draw, surgery, efficient training and evaluation, plus baselines.

    Every variant sees the same initial weights and the same batch sequence.
    The EarlyBERT step count and cost include the searching stage.
    """
    configure_threads()
    seed = config.seed if seed is None else seed
    if seed != config.seed:
        config = dataclasses.replace(config, seed=seed)
    variants = list(variants or config.harness.variants)
    bundle_id = f"{config.digest()}"
    task = build_task(config.task, seed)
    model_cfg = config.model_config(len(task.vocab), task.seq_len)
    config.search.validate(model_cfg.num_heads)
    params0, coeffs0 = _initial_weights(config, model_cfg, seed)
    theta0 = params0.theta0
    bs_full, bs_eff = config.train.batch_size, config.efficient.batch_size
    S = task.seq_len
    full_steps = config.train.executed_steps(task.steps_per_epoch(bs_full))
    full_fps = train_step_flops(model_cfg, S, bs_full)
    bundle = RunBundle(config, bundle_id, task, model_cfg, [], {}, theta0=theta0)
    sc = config.search
    try:
        if "full" in variants:
            p = params_from_state(model_cfg, theta0)
            res = train(p, task, config.train, eval_interval=config.harness.eval_interval, seed=seed)
            bundle.results["full"] = res
            bundle.params["full"] = p
            bundle.reports.append(_report(bundle_id, config, "full", task, seed, p, res, evaluate(p, task), full_fps))

        need_ticket = {"earlybert", "random_ticket", "reduced_full"} & set(variants)
        if need_ticket:
            sr, search_cfg = search_for_ticket(params_from_state(model_cfg, theta0), coeffs0, task, config, full_steps)
            search_fps = train_step_flops(search_cfg, S, bs_full)
            bundle.search, bundle.mask = sr, sr.mask
            retain = sr.coeffs if config.harness.retain_coefficients else None
            prov = {"k": sc.heads_pruned_per_layer, "rho": sc.neuron_prune_ratio, "scope": sc.neuron_scope,
                    "rewind": config.harness.stage}
            arch, pruned = apply_ticket(theta0, model_cfg, sr.mask, retain, dict(prov, exit_step=sr.exit_step))
            bundle.architecture = arch
            eff_fps = train_step_flops(arch, S, bs_eff)
            eff_res = train(pruned, task, config.efficient, eval_interval=config.harness.eval_interval, seed=seed)
            eb = _report(bundle_id, config, "earlybert", task, seed, pruned, eff_res, evaluate(pruned, task),
                         eff_fps, sr.steps_used, search_fps, sr.step_times_ns, sr.mask, arch)
            if "earlybert" in variants:
                bundle.results["earlybert"] = eff_res
                bundle.params["earlybert"] = pruned
                bundle.reports.append(eb)

            if "random_ticket" in variants:
                rmask = random_ticket(model_cfg, sc.heads_pruned_per_layer, sc.neuron_prune_ratio, sc.neuron_scope,
                                      seed + config.harness.random_ticket_seed_offset)
                bundle.random_mask = rmask
                rarch, rp = apply_ticket(theta0, model_cfg, rmask, None,
                                         dict(prov, random_seed=seed + config.harness.random_ticket_seed_offset))
                rres = train(rp, task, config.efficient, eval_interval=config.harness.eval_interval, seed=seed)
                bundle.results["random_ticket"] = rres
                bundle.params["random_ticket"] = rp
                bundle.reports.append(_report(bundle_id, config, "random_ticket", task, seed, rp, rres,
                                              evaluate(rp, task), eff_fps, 0, 0, (), rmask, rarch))

            if "reduced_full" in variants:
                steps = max(1, eb.total_flops // full_fps)
                sched = dataclasses.replace(config.train, total_steps=int(steps), step_budget_fraction=1.0)
                p = params_from_state(model_cfg, theta0)
                res = train(p, task, sched, eval_interval=config.harness.eval_interval, seed=seed)
                bundle.results["reduced_full"] = res
                bundle.params["reduced_full"] = p
                bundle.reports.append(_report(bundle_id, config, "reduced_full", task, seed, p, res,
                                              evaluate(p, task), full_fps))
    except Exception:
        if out_dir:
            _flush_partial(out_dir, bundle)
        raise
    return bundle


def _flush_partial(out_dir, bundle):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.partial.json"), "w", encoding="utf-8") as fh:
        fh.write(report_json(bundle.reports, meta={"status": "failed"}))
    with open(os.path.join(out_dir, "FAILED"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"bundle_id": bundle.bundle_id, "completed": [r.variant for r in bundle.reports]}) + "\n")
