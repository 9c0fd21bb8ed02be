import json
import os

import numpy as np
import pytest

from earlybird.cli import main
from earlybird.config import ConfigError, PipelineConfig, apply_overrides, load_config
from earlybird.harness import read_pgm, strip_timing
from earlybird.masks import read_mask_file

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
TOY = os.path.join(ROOT, "configs", "toy_classification.json")
FAST = ["train.epochs=1", "efficient.epochs=1", "search.max_search_steps=12", "task.num_train=128"]


def cli(*argv):
    return main([str(a) for a in argv])


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# -- config -----------------------------------------------------------------

def test_shipped_config_loads():
    cfg = load_config(TOY)
    assert cfg.search.lambda_ == 1e-4
    assert cfg.harness.variants == ["full", "earlybert", "random_ticket", "reduced_full"]


def test_overrides_parse_json_values():
    raw = apply_overrides({}, ["search.lambda=0.5", "task.generator=contains", "harness.variants=[\"full\"]", "seed=3"])
    assert raw == {"search": {"lambda": 0.5}, "task": {"generator": "contains"}, "harness": {"variants": ["full"]},
                   "seed": 3}


@pytest.mark.parametrize("item", ["search.lamda=1", "nosuch.key=1", "model.width=3", "search=1", "lambda"])
def test_unknown_override_keys_rejected(item):
    with pytest.raises(ConfigError):
        apply_overrides({}, [item])


def test_unknown_keys_in_document_rejected():
    with pytest.raises(ConfigError, match="train.epoch"):
        PipelineConfig.from_dict({"train": {"epoch": 3}})
    with pytest.raises(ConfigError, match="extra"):
        PipelineConfig.from_dict({"extra": 1})


def test_digest_tracks_content():
    a = PipelineConfig.from_dict({"seed": 1})
    assert a.digest() == PipelineConfig.from_dict({"seed": 1}).digest()
    assert a.digest() != PipelineConfig.from_dict({"seed": 2}).digest()
    assert PipelineConfig.from_dict(a.to_dict()) == a


# -- exit codes -------------------------------------------------------------

def test_unknown_flag_exits_1(capsys, tmp_path):
    assert cli("run-all", "--config", TOY, "--bogus", "--out", tmp_path) == 1
    assert "--bogus" in capsys.readouterr().err


def test_unknown_config_key_exits_1(capsys, tmp_path):
    assert cli("run-all", "--config", TOY, "--out", tmp_path, "search.lamda=1") == 1
    assert "search.lamda" in capsys.readouterr().err


def test_invalid_value_exits_1(capsys, tmp_path):
    assert cli("search", "--config", TOY, "--out", tmp_path, "search.neuron_prune_ratio=1.5") == 1
    assert "neuron_prune_ratio" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["frobnicate"], [], ["search"], ["search", "--config", "/nonexistent.json"]])
def test_usage_errors_exit_1(argv, capsys):
    assert cli(*argv) == 1
    assert "error" in capsys.readouterr().err


def test_runtime_failure_exits_2(capsys, tmp_path):
    assert cli("eval", "--config", TOY, "--out", tmp_path, "--in", tmp_path / "missing.ckpt") == 2
    assert "eval failed" in capsys.readouterr().err


# -- run-all ----------------------------------------------------------------

@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli("run-all", "--config", TOY, "--out", out, *FAST) == 0
    return out


EXPECTED = {"report.json", "comparison.csv", "masks.txt", "distance.csv", "heatmap.pgm", "ticket.txt",
            "random_ticket.txt", "loss_trace_full.csv", "loss_trace_earlybert.csv", "loss_trace_random_ticket.csv",
            "loss_trace_reduced_full.csv"}


def test_run_all_writes_every_artifact(run_dir):
    manifest = read_json(run_dir / "manifest.json")
    assert set(manifest["files"]) == EXPECTED
    assert manifest["files"] == sorted(manifest["files"])
    assert all((run_dir / f).exists() for f in EXPECTED)
    assert manifest["verb"] == "run-all" and manifest["config_hash"] == manifest["bundle_id"]


def test_run_all_is_deterministic(run_dir, tmp_path):
    assert cli("run-all", "--config", TOY, "--out", tmp_path, *FAST) == 0
    assert strip_timing(read_json(tmp_path / "report.json")) == strip_timing(read_json(run_dir / "report.json"))
    assert read_json(tmp_path / "manifest.json") == read_json(run_dir / "manifest.json")
    for name in ("masks.txt", "distance.csv", "heatmap.pgm", "loss_trace_full.csv"):
        assert (tmp_path / name).read_bytes() == (run_dir / name).read_bytes(), name


def test_resolved_config_reproduces_the_run(run_dir, tmp_path):
    resolved = tmp_path / "resolved.json"
    resolved.write_text(json.dumps(read_json(run_dir / "manifest.json")["config"]))
    assert cli("run-all", "--config", resolved, "--out", tmp_path / "again") == 0
    assert strip_timing(read_json(tmp_path / "again" / "report.json")) == strip_timing(read_json(run_dir / "report.json"))


def test_heatmap_verb_composes_with_run_all(run_dir, tmp_path):
    assert cli("heatmap", "--in", run_dir / "masks.txt", "--out", tmp_path / "m") == 0
    assert cli("heatmap", "--in", run_dir / "distance.csv", "--out", tmp_path / "d") == 0
    reference = read_pgm(run_dir / "heatmap.pgm")
    np.testing.assert_array_equal(read_pgm(tmp_path / "m" / "heatmap.pgm"), reference)
    np.testing.assert_array_equal(read_pgm(tmp_path / "d" / "heatmap.pgm"), reference)
    assert (tmp_path / "m" / "distance.csv").read_bytes() == (run_dir / "distance.csv").read_bytes()


def test_compare_verb(run_dir, tmp_path):
    assert cli("compare", "--in", run_dir / "report.json", "--out", tmp_path) == 0
    assert (tmp_path / "comparison.csv").read_text() == (run_dir / "comparison.csv").read_text()


def test_staged_pipeline_matches_run_all(run_dir, tmp_path):
    common = ["--config", TOY, *FAST]
    assert cli("search", "--out", tmp_path / "s", *common) == 0
    assert read_mask_file(tmp_path / "s" / "ticket.txt") == read_mask_file(run_dir / "ticket.txt")
    assert cli("draw", "--in", tmp_path / "s" / "search.ckpt", "--out", tmp_path / "d", *common) == 0
    assert read_mask_file(tmp_path / "d" / "ticket.txt") == read_mask_file(tmp_path / "s" / "ticket.txt")
    assert cli("surgery", "--in", tmp_path / "d" / "ticket.txt", "--out", tmp_path / "p", *common) == 0
    assert cli("train", "--in", tmp_path / "p" / "pruned.ckpt", "--out", tmp_path / "t", *common) == 0
    assert cli("eval", "--in", tmp_path / "t" / "trained.ckpt", "--out", tmp_path / "e", *common) == 0
    metrics = read_json(tmp_path / "e" / "metrics.json")
    assert 0.0 <= metrics["val"]["accuracy"] <= 1.0
    # same weights, schedule and batches as the earlybert variant of run-all
    staged = (tmp_path / "t" / "loss_trace.csv").read_text()
    assert staged == (run_dir / "loss_trace_earlybert.csv").read_text()


def test_multi_seed_run_all(tmp_path):
    assert cli("run-all", "--config", TOY, "--out", tmp_path, "--seeds", "0,1", *FAST,
               'harness.variants=["full"]') == 0
    summary = read_json(tmp_path / "summary.json")
    assert summary["seeds"] == [0, 1] and summary["metric"]["full"]["n"] == 2
    assert (tmp_path / "seed1" / "report.json").exists()


def test_sweep_grid(tmp_path):
    assert cli("sweep", "--config", TOY, "--out", tmp_path, "--grid", "search.lambda=0,0.001", *FAST,
               'harness.variants=["full","earlybert"]') == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "search.lambda,cell,variant,metric,steps,total_flops"
    assert len(lines) == 1 + 2 * 2
