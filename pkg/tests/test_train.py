import numpy as np
import pytest

from earlybird.autodiff import no_grad
from earlybird.config import PipelineConfig, TaskSpec
from earlybird.model import forward, init_model
from earlybird.optim import TrainSchedule
from earlybird.train import (
    ClassificationTask,
    LOSS_TRACE_COLUMNS,
    MLMTask,
    TrainingDiverged,
    build_task,
    derive_seed,
    loss_trace_csv,
    run_earlybert,
    train,
)

CLS_TASK = TaskSpec(kind="classification", generator="majority", seq_len=12, num_train=256, num_val=64)


def model_for(task, **kw):
    cfg = PipelineConfig.from_dict({"model": {"num_layers": 2, "num_heads": 4, "d_model": 32, "d_ff": 64, **kw},
                                    "task": {"kind": task.kind, "seq_len": task.seq_len}})
    return cfg.model_config(len(task.vocab), task.seq_len)


class FixedBatch:
    """Task view that serves one batch at every step."""

    def __init__(self, task, batch_size):
        self.task = task
        self.kind = task.kind
        self.batch = task.train_batch(0, batch_size)

    def steps_per_epoch(self, batch_size):
        return 1

    def train_batch(self, step, batch_size):
        return self.batch

    def loss(self, *args, **kw):
        return self.task.loss(*args, **kw)


def test_overfits_a_single_batch():
    task = ClassificationTask(CLS_TASK, 0)
    fixed = FixedBatch(task, 16)
    params, _ = init_model(model_for(task), 0)
    train(params, fixed, TrainSchedule(total_steps=200, base_lr=3e-3, batch_size=16, warmup_fraction=0.0))
    x, y = fixed.batch
    with no_grad():
        pred = forward(params, None, None, x).data.argmax(-1)
    assert (pred == y).mean() == 1.0


def test_trace_length_equals_steps_and_is_deterministic():
    task = ClassificationTask(CLS_TASK, 0)
    runs = []
    for _ in range(2):
        params, _ = init_model(model_for(task), 0)
        runs.append(train(params, task, TrainSchedule(total_steps=12, batch_size=8), eval_interval=4))
    a, b = runs
    assert a.steps == len(a.lrs) == len(a.step_times_ns) == 12
    assert a.losses == b.losses
    assert sorted(a.evals) == [3, 7, 11]
    for ta, tb in zip(a.params.tensors(), b.params.tensors()):
        assert ta.data.tobytes() == tb.data.tobytes()


def test_budget_fraction_changes_only_count_and_slope():
    task = ClassificationTask(CLS_TASK, 0)
    out = {}
    for beta in (1.0, 0.8):
        params, _ = init_model(model_for(task), 0)
        out[beta] = train(params, task, TrainSchedule(epochs=1, batch_size=16, step_budget_fraction=beta))
    assert out[1.0].steps == 16 and out[0.8].steps == 12
    assert max(out[1.0].lrs) == max(out[0.8].lrs)
    # same data order and same first step: the warmup has zero learning rate, so step 0 and 1 losses agree
    assert out[1.0].losses[:2] == out[0.8].losses[:2]


def test_loss_trace_csv():
    task = ClassificationTask(CLS_TASK, 0)
    params, _ = init_model(model_for(task), 0)
    res = train(params, task, TrainSchedule(total_steps=4, batch_size=8), eval_interval=2)
    lines = loss_trace_csv(res).splitlines()
    assert lines[0] == ",".join(LOSS_TRACE_COLUMNS)
    assert len(lines) == 5
    assert lines[1].endswith(",") and not lines[2].endswith(",")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_dumps_state(tmp_path):
    task = ClassificationTask(CLS_TASK, 0)
    params, _ = init_model(model_for(task), 0)
    params.layers[0].w1.data[:] = np.inf
    with pytest.raises(TrainingDiverged) as err:
        train(params, task, TrainSchedule(total_steps=3, batch_size=8), dump_dir=str(tmp_path))
    assert err.value.dump_path and np.load(err.value.dump_path)["tok_emb"].shape == params.tok_emb.shape


def test_empty_mlm_batches_are_skipped_but_logged():
    spec = TaskSpec(kind="mlm", seq_len=8, mask_prob=0.001, corpus_sentences=50)
    task = MLMTask(spec, 0)
    params, _ = init_model(model_for(task), 0)
    before = params.layers[0].w1.data.copy()
    res = train(params, task, TrainSchedule(total_steps=3, batch_size=1))
    # at mask_prob 0.001 none of the 3 x 7 positions is selected for this seed
    assert res.steps == 3
    assert res.skipped_steps == [0, 1, 2]
    np.testing.assert_array_equal(params.layers[0].w1.data, before)


def test_epoch_order_is_a_permutation_and_reshuffles():
    task = ClassificationTask(CLS_TASK, 0)
    spe = task.steps_per_epoch(16)
    labels = np.concatenate([task.train_batch(s, 16)[1] for s in range(spe)])
    assert spe == 16 and len(labels) == 256
    assert sorted(task._epoch_order(0).tolist()) == list(range(256))
    assert not np.array_equal(task._epoch_order(0), task._epoch_order(1))


def test_data_seed_overrides_run_seed():
    spec = TaskSpec(kind="classification", seq_len=8, num_train=32, num_val=8, data_seed=7)
    a, b = build_task(spec, 0), build_task(spec, 1)
    np.testing.assert_array_equal(a.data.train_x, b.data.train_x)


def test_derive_seed_is_stable():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert derive_seed(1, 2) != derive_seed(2, 1)


# -- pipeline ---------------------------------------------------------------

TOY_PIPELINE = {
    "seed": 0,
    "model": {"num_layers": 2, "num_heads": 4, "d_model": 32, "d_ff": 64},
    "task": {"kind": "classification", "generator": "majority", "seq_len": 12, "num_train": 256, "num_val": 64},
    "search": {"lambda": 1e-4, "max_search_steps": 40, "snapshot_interval": 4},
    "train": {"epochs": 2, "batch_size": 16},
    "efficient": {"epochs": 1, "batch_size": 16, "lr_scale": 2.0},
    "harness": {"variants": ["full", "earlybert", "random_ticket", "reduced_full"]},
}


@pytest.fixture(scope="module")
def bundle():
    return run_earlybert(PipelineConfig.from_dict(TOY_PIPELINE))


def test_ticket_and_random_ticket_have_equal_sparsity(bundle):
    assert bundle.mask.sparsity() == bundle.random_mask.sparsity()
    assert bundle.mask.kept_heads().tolist() == bundle.random_mask.kept_heads().tolist()
    assert bundle.mask != bundle.random_mask


def test_step_accounting(bundle):
    eb, full = bundle.report("earlybert"), bundle.report("full")
    assert eb.steps == eb.search_steps + eb.train_steps
    assert eb.search_steps == bundle.search.steps_used > 0
    assert eb.train_steps == bundle.results["earlybert"].steps == 16
    assert full.steps == full.train_steps == 32 and full.search_steps == 0
    assert eb.total_flops == eb.search_steps * eb.search_flops_per_step + eb.train_steps * eb.flops_per_step
    assert eb.timing["total_ns"] == eb.timing["search_total_ns"] + eb.timing["train_total_ns"]


def test_reduced_full_matches_earlybert_flops(bundle):
    eb, full, reduced = (bundle.report(v) for v in ("earlybert", "full", "reduced_full"))
    assert reduced.steps == eb.total_flops // full.flops_per_step
    assert reduced.total_flops <= eb.total_flops < reduced.total_flops + full.flops_per_step


def test_variants_share_the_initial_weights(bundle):
    assert bundle.report("full").seed == bundle.report("earlybert").seed
    first = bundle.results["full"].losses[0]
    assert bundle.results["reduced_full"].losses[0] == first


def test_earlybert_model_is_smaller(bundle):
    assert bundle.report("earlybert").params < bundle.report("full").params
    assert bundle.report("earlybert").flops_per_step < bundle.report("full").flops_per_step
