"""``earlybird`` command-line interface.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, PipelineConfig, apply_overrides, parse_value
from .harness import (
    compare_bundle,
    comparison_csv,
    emit_heatmap,
    evaluate,
    load_reports,
    read_distance_csv,
    report_json,
    seed_summary,
)
from .masks import read_mask_file, write_mask_file
from .model import params_from_state
from .search import MaskDistanceTrace, draw_ticket
from .surgery import apply_ticket
from .threads import configure_threads
from .train import (
    build_task,
    derive_seed,
    loss_trace_csv,
    run_earlybert,
    search_for_ticket,
    train,
    _initial_weights,
)

VERBS = ("search", "draw", "surgery", "train", "eval", "run-all", "compare", "heatmap", "sweep")
NEEDS_CONFIG = {"search", "draw", "surgery", "train", "eval", "run-all", "sweep"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="earlybird", description="Early lottery-ticket search and efficient training for toy BERT.")
    parser.add_argument("--version", action="version", version=f"earlybird {__version__}")
    sub = parser.add_subparsers(dest="verb", parser_class=_Parser)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", help="pipeline config JSON")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--in", dest="inputs", action="append", default=[], help="input artifact (repeatable)")
        p.add_argument("overrides", nargs="*", help="dotted-key overrides, e.g. search.lambda=1e-4")
        if verb == "run-all":
            p.add_argument("--seeds", help="comma-separated seeds; one bundle per seed")
        if verb == "sweep":
            p.add_argument("--grid", action="append", default=[], help="key=v1,v2,... (repeatable)")
        if verb == "heatmap":
            p.add_argument("--cell", type=int, default=1, help="pixels per matrix cell")
    return parser


class Run:
    """Output directory bookkeeping and manifest emission."""

    def __init__(self, out, verb, config=None):
        self.out = out
        self.verb = verb
        self.config = config
        self.files = []
        os.makedirs(out, exist_ok=True)

    def path(self, name):
        full = os.path.join(self.out, name)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        if name not in self.files:
            self.files.append(name)
        return full

    def write_text(self, name, text):
        with open(self.path(name), "w", encoding="utf-8") as fh:
            fh.write(text)

    def write_json(self, name, obj):
        self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def finish(self, extra=None):
        manifest = {
            "tool": "earlybird",
            "version": __version__,
            "verb": self.verb,
            "files": sorted(self.files),
            "config": self.config.to_dict() if self.config is not None else None,
            "config_hash": self.config.digest() if self.config is not None else None,
        }
        manifest.update(extra or {})
        with open(os.path.join(self.out, "manifest.json"), "w", encoding="utf-8") as fh:
            fh.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def resolve_config(args):
    if not args.config:
        raise UsageError(f"{args.verb} needs --config")
    if not os.path.exists(args.config):
        raise UsageError(f"config file not found: {args.config}")
    with open(args.config, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc})") from exc
    raw = apply_overrides(raw, args.overrides)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        return PipelineConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _need_input(args, what):
    if not args.inputs:
        raise UsageError(f"{args.verb} needs --in <{what}>")
    return args.inputs[0]


def _setup(config):
    task = build_task(config.task, config.seed)
    model_cfg = config.model_config(len(task.vocab), task.seq_len)
    params, coeffs = _initial_weights(config, model_cfg, config.seed)
    return task, model_cfg, params, coeffs


def _write_trace(run, trace, prefix=""):
    write_mask_file(run.path(prefix + "masks.txt"), trace.snapshots)
    if len(trace):
        emit_heatmap(trace.matrix(), run.path(prefix + "distance.csv"), run.path(prefix + "heatmap.pgm"), trace.steps)


def cmd_search(args, config):
    run = Run(args.out, "search", config)
    task, model_cfg, params, coeffs = _setup(config)
    full_steps = config.train.executed_steps(task.steps_per_epoch(config.train.batch_size))
    sr, _ = search_for_ticket(params, coeffs, task, config, full_steps)
    _write_trace(run, sr.trace)
    write_mask_file(run.path("ticket.txt"), sr.mask)
    save_checkpoint(run.path("search.ckpt"), params, sr.coeffs, [sr.mask], meta={"stage": "search"})
    run.write_json(
        "search.json",
        {
            "exit_step": sr.exit_step,
            "steps_used": sr.steps_used,
            "late_divergence": sr.late_divergence,
            "mask_hash": sr.mask.digest(),
            "task_losses": sr.task_losses,
            "l1_values": sr.l1_values,
        },
    )
    run.finish()


def cmd_draw(args, config):
    run = Run(args.out, "draw", config)
    ck = load_checkpoint(_need_input(args, "search.ckpt"))
    if ck.coeffs is None:
        raise RuntimeError("checkpoint carries no slimming coefficients")
    sc = config.search
    mask = draw_ticket(ck.coeffs, sc.heads_pruned_per_layer, sc.neuron_prune_ratio, sc.neuron_scope)
    write_mask_file(run.path("ticket.txt"), mask)
    run.finish({"mask_hash": mask.digest()})


def cmd_surgery(args, config):
    run = Run(args.out, "surgery", config)
    masks = read_mask_file(_need_input(args, "ticket.txt"))
    if len(masks) != 1:
        raise RuntimeError(f"expected exactly one mask, found {len(masks)}")
    _, model_cfg, params, _ = _setup(config)
    coeffs = None
    if config.harness.retain_coefficients and len(args.inputs) > 1:
        coeffs = load_checkpoint(args.inputs[1]).coeffs
    arch, pruned = apply_ticket(params.theta0, model_cfg, masks[0], coeffs, {"source": config.harness.stage})
    save_checkpoint(run.path("pruned.ckpt"), pruned, None, masks, arch, meta={"stage": "surgery"})
    run.write_json("architecture.json", arch.to_dict())
    run.finish()


def cmd_train(args, config):
    run = Run(args.out, "train", config)
    task, model_cfg, params, _ = _setup(config)
    schedule = config.train
    if args.inputs:
        ck = load_checkpoint(args.inputs[0])
        params = params_from_state(ck.config, ck.theta0, ck.params.head_counts(), ck.params.ffn_widths())
        params.theta0 = ck.theta0
        if ck.architecture is not None:
            schedule = config.efficient
    res = train(params, task, schedule, eval_interval=config.harness.eval_interval, seed=config.seed,
                dump_dir=os.path.join(args.out, "dump"))
    run.write_text("loss_trace.csv", loss_trace_csv(res))
    save_checkpoint(run.path("trained.ckpt"), params, meta={"stage": "train", "steps": res.steps})
    run.write_json("metrics.json", evaluate(params, task))
    run.finish()


def cmd_eval(args, config):
    run = Run(args.out, "eval", config)
    task = build_task(config.task, config.seed)
    ck = load_checkpoint(_need_input(args, "checkpoint"))
    run.write_json("metrics.json", {s: evaluate(ck.params, task, s) for s in ("train", "val")})
    run.finish()


def _bundle_files(run, bundle, prefix=""):
    run.write_text(prefix + "report.json", report_json(bundle.reports, meta={"bundle_id": bundle.bundle_id}))
    run.write_text(prefix + "comparison.csv", comparison_csv(compare_bundle(bundle.reports)))
    for variant, res in bundle.results.items():
        run.write_text(f"{prefix}loss_trace_{variant}.csv", loss_trace_csv(res))
    if bundle.search is not None:
        _write_trace(run, bundle.search.trace, prefix)
        write_mask_file(run.path(prefix + "ticket.txt"), bundle.mask)
    if bundle.random_mask is not None:
        write_mask_file(run.path(prefix + "random_ticket.txt"), bundle.random_mask)


def cmd_run_all(args, config):
    run = Run(args.out, "run-all", config)
    if not getattr(args, "seeds", None):
        bundle = run_earlybert(config, out_dir=args.out)
        _bundle_files(run, bundle)
        run.finish({"bundle_id": bundle.bundle_id})
        return
    try:
        seeds = [int(s) for s in args.seeds.split(",")]
    except ValueError as exc:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from exc
    per_variant = {}
    for seed in seeds:
        bundle = run_earlybert(config, seed=seed, out_dir=os.path.join(args.out, f"seed{seed}"))
        _bundle_files(run, bundle, f"seed{seed}/")
        for r in bundle.reports:
            per_variant.setdefault(r.variant, []).append(r.metric)
    run.write_json("summary.json", {"seeds": seeds, "metric": {v: seed_summary(m) for v, m in per_variant.items()}})
    run.finish({"seeds": seeds})


def cmd_compare(args, config):
    run = Run(args.out, "compare", config)
    if not args.inputs:
        raise UsageError("compare needs --in <report.json>")
    reports = [r for path in args.inputs for r in load_reports(path)]
    run.write_text("comparison.csv", comparison_csv(compare_bundle(reports)))
    run.finish()


def cmd_heatmap(args, config):
    run = Run(args.out, "heatmap", config)
    src = _need_input(args, "distance.csv or masks.txt")
    with open(src, encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith("step,"):
        steps, matrix = read_distance_csv(src)
    else:
        trace = MaskDistanceTrace()
        for m in read_mask_file(src):
            trace.append(m)
        steps, matrix = trace.steps, trace.matrix()
        emit_heatmap(matrix, run.path("distance.csv"), None, steps)
    emit_heatmap(matrix, None, run.path("heatmap.pgm"), steps, cell=args.cell)
    run.finish()


def _parse_grid(items):
    axes = []
    for item in items:
        if "=" not in item:
            raise UsageError(f"--grid {item!r} is not of the form key=v1,v2")
        key, values = item.split("=", 1)
        axes.append((key, values.split(",")))
    if not axes:
        raise UsageError("sweep needs at least one --grid")
    return axes


def cmd_sweep(args, config):
    axes = _parse_grid(args.grid)
    base = config.to_dict()
    run = Run(args.out, "sweep", config)
    rows = []
    for i, combo in enumerate(itertools.product(*[vals for _, vals in axes])):
        overrides = [f"{k}={v}" for (k, _), v in zip(axes, combo)]
        cell = PipelineConfig.from_dict(apply_overrides(base, overrides))
        bundle = run_earlybert(cell, out_dir=os.path.join(args.out, f"cell{i:03d}"))
        _bundle_files(run, bundle, f"cell{i:03d}/")
        for r in bundle.reports:
            row = {k: parse_value(v) for (k, _), v in zip(axes, combo)}
            row.update(cell=i, variant=r.variant, metric=r.metric, steps=r.steps, total_flops=r.total_flops)
            rows.append(row)
    fields = [k for k, _ in axes] + ["cell", "variant", "metric", "steps", "total_flops"]
    with open(run.path("sweep.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    run.finish({"grid": {k: v for k, v in axes}})


COMMANDS = {
    "search": cmd_search,
    "draw": cmd_draw,
    "surgery": cmd_surgery,
    "train": cmd_train,
    "eval": cmd_eval,
    "run-all": cmd_run_all,
    "compare": cmd_compare,
    "heatmap": cmd_heatmap,
    "sweep": cmd_sweep,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=os.environ.get("EARLYBIRD_LOG", "WARNING"), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb is None:
            raise UsageError("missing verb; choose from " + ", ".join(VERBS))
        config = resolve_config(args) if (args.verb in NEEDS_CONFIG or args.config) else None
        configure_threads()
    except (UsageError, ConfigError) as exc:
        print(f"earlybird: error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"earlybird: error: {exc}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.verb](args, config)
    except UsageError as exc:
        print(f"earlybird: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"earlybird: {args.verb} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
