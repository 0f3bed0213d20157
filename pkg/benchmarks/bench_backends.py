#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Times the isolated LSTM forward/backward kernels and a full training step at
demo-model and paper-model sizes. Run as:

    python benchmarks/bench_backends.py [--repeats 5]

The backend can also be forced globally with PEDRISK_BACKEND=numpy|numba.
"""
import argparse
import time

import numpy as np

from pedrisk.model import AdamState, ModelConfig, backward_and_step, init
from pedrisk.model import kernels
from pedrisk.model.net import make_batch
from pedrisk.sequencer import DemographicVector, TimeBinnedSequence

SIZES = {
    "demo (embed 48, hidden 64, T=24, B=64)": dict(
        embed_dim=48, lstm_hidden=64, attn_dim=32, head_hidden=(64, 32),
        n_bins=24, batch=64, vocab=300),
    "paper (embed 256, hidden 512, T=24, B=16)": dict(
        embed_dim=256, lstm_hidden=512, attn_dim=128, head_hidden=(512, 256),
        n_bins=24, batch=16, vocab=300),
}


def build_batch(vocab, n_bins, batch, seed=0):
    rng = np.random.default_rng(seed)
    seqs, demos, lo, lb, mask = [], [], [], [], []
    for i in range(batch):
        bins = tuple(tuple(sorted(set(rng.integers(0, vocab, size=4).tolist())))
                     for _ in range(n_bins))
        seqs.append(TimeBinnedSequence(f"p{i}", 2, bins))
        demos.append(DemographicVector(1, 2, 1, 1, 3, 2))
        label = bool(rng.random() < 0.5)
        lo.append([label] * 3)
        lb.append([16.0 + 2.0 * label] * 3)
        mask.append([1, 1, 1])
    return make_batch(seqs, demos, lo, lb, mask)


def time_step(config_kw, repeats):
    vocab = config_kw.pop("vocab")
    n_bins = config_kw.pop("n_bins")
    batch_size = config_kw.pop("batch")
    config = ModelConfig(vocab_size=vocab, lstm_layers=2, seed=0, **config_kw)
    weights = init(config)
    batch = build_batch(vocab, n_bins, batch_size)
    opt = AdamState.for_weights(weights, seed=1)
    backward_and_step(weights, batch, opt, lr=1e-3)  # warm-up / jit compile
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        backward_and_step(weights, batch, opt, lr=1e-3)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    print(f"{'size':<45} {'backend':<8} {'step time':>10}")
    results = {}
    for label, kw in SIZES.items():
        for backend in ("numpy", "numba"):
            try:
                kernels.set_backend(backend)
            except ImportError:
                print(f"{label:<45} {backend:<8} {'unavailable':>10}")
                continue
            best = time_step(dict(kw), args.repeats)
            results[(label, backend)] = best
            print(f"{label:<45} {backend:<8} {best * 1000:9.1f}ms")
        a = results.get((label, "numpy"))
        b = results.get((label, "numba"))
        if a and b:
            print(f"{'':<45} {'speedup':<8} {a / b:9.2f}x")


if __name__ == "__main__":
    main()
