"""Compare the compiled and numpy kernel backends.

Each kernel runs on shapes taken from the toy configurations (4 heads,
d_model 128, sequence 32, batch 16), then one full training step of the
toy MLM model is timed under each backend.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]
"""
import argparse
import json
import timeit

import numpy as np

from earlybird import kernels
from earlybird.config import TaskSpec
from earlybird.model import ModelConfig, init_model
from earlybird.optim import TrainSchedule
from earlybird.threads import configure_threads, thread_info
from earlybird.train import MLMTask, train


def kernel_cases(dtype=np.float32):
    rng = np.random.default_rng(0)
    scores = rng.normal(size=(16 * 4 * 32, 32)).astype(dtype)
    probs = kernels.softmax_forward(scores)
    hidden = rng.normal(size=(16 * 32, 128)).astype(dtype)
    gamma, beta = np.ones(128, dtype), np.zeros(128, dtype)
    _, xhat, rstd = kernels.layer_norm_forward(hidden, gamma, beta, 1e-12)
    grad = rng.normal(size=hidden.shape).astype(dtype)
    bits = (rng.random((100, 4 * 4 + 4 * 512)) < 0.6).astype(np.uint8)
    return {
        "softmax_forward": lambda: kernels.softmax_forward(scores),
        "softmax_backward": lambda: kernels.softmax_backward(probs, scores),
        "layer_norm_forward": lambda: kernels.layer_norm_forward(hidden, gamma, beta, 1e-12),
        "layer_norm_backward": lambda: kernels.layer_norm_backward(grad, xhat, rstd, gamma),
        "pairwise_hamming": lambda: kernels.pairwise_hamming(bits),
    }


def train_step_case():
    task = MLMTask(TaskSpec(kind="mlm", seq_len=32, corpus_sentences=500), 0)
    cfg = ModelConfig(num_layers=4, num_heads=4, d_model=128, d_ff=512, vocab_size=len(task.vocab),
                      max_seq_len=32, task_head="mlm")
    params, _ = init_model(cfg, 0)
    schedule = TrainSchedule(total_steps=3, batch_size=16)
    return lambda: train(params, task, schedule)


def best_of(fn, repeat):
    fn()  # warm caches and lazy imports
    times = timeit.repeat(fn, number=1, repeat=repeat)
    return min(times), float(np.median(times))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)
    configure_threads()

    backends = ["numpy"] + (["cython"] if kernels.compiled_available() else [])
    cases = dict(kernel_cases())
    cases["train_step_x3"] = train_step_case()
    results = {}
    prev = kernels.BACKEND
    try:
        for backend in backends:
            kernels.use_backend(backend)
            for name, fn in cases.items():
                repeat = max(3, args.repeat // 5) if name == "train_step_x3" else args.repeat
                results.setdefault(name, {})[backend] = best_of(fn, repeat)
    finally:
        kernels.use_backend(prev)

    print(f"threads: {thread_info()}")
    header = f"{'case':<22}" + "".join(f"{b + ' best ms':>16}{b + ' median ms':>18}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for name, row in results.items():
        line = f"{name:<22}" + "".join(f"{row[b][0] * 1e3:>16.3f}{row[b][1] * 1e3:>18.3f}" for b in backends)
        if len(backends) == 2:
            line += f"{row['numpy'][0] / row['cython'][0]:>9.2f}x"
        print(line)
    if len(backends) == 1:
        print("compiled kernels not built; only the numpy backend was measured")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"threads": thread_info(), "results": results}, fh, indent=2)


if __name__ == "__main__":
    main()
