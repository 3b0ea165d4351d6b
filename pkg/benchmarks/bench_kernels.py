#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Runs both backends on the shapes the decoder actually hits and prints a
speedup table, then times one cross-entropy training step end to end with
each backend. Use BIDICAP_BACKEND to pin the backend used by the package
itself; this script imports both implementation modules directly.
"""

import argparse
import time

import numpy as np

import bidicap._kernels_np as knp

try:
    import bidicap._kernels_nb as knb
except ImportError:
    knb = None


def timeit(fn, repeats):
    fn()  # warmup (and numba compilation)
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def kernel_cases(dtype):
    rng = np.random.default_rng(0)
    B, T, H, dk, d, V = 8, 17, 4, 16, 64, 128
    x = rng.normal(size=(B * T, V)).astype(dtype)
    p = knp.softmax_rows(x)
    g = rng.normal(size=x.shape).astype(dtype)
    ln_x = rng.normal(size=(B * T, d)).astype(dtype)
    gain = np.ones(d, dtype=dtype)
    bias = np.zeros(d, dtype=dtype)
    _, xhat, inv_std = knp.layer_norm_rows(ln_x, gain, bias, 1e-5)
    ln_g = rng.normal(size=ln_x.shape).astype(dtype)
    ids = rng.integers(0, V, size=B * T).astype(np.int64)
    rows = rng.normal(size=(B * T, d)).astype(dtype)
    q = rng.normal(size=(B, H * dk)).astype(dtype)
    keys = rng.normal(size=(B, T, H * dk)).astype(dtype)
    values = rng.normal(size=(B, T, H * dk)).astype(dtype)
    param = rng.normal(size=50000).astype(dtype)
    grad = rng.normal(size=50000).astype(dtype)
    m = np.zeros(50000, dtype=dtype)
    v = np.zeros(50000, dtype=dtype)

    def acc():
        return np.zeros((V, d), dtype=dtype)

    return {
        "softmax_rows": lambda k: k.softmax_rows(x),
        "softmax_backward": lambda k: k.softmax_rows_backward(p, g),
        "layer_norm_rows": lambda k: k.layer_norm_rows(ln_x, gain, bias, 1e-5),
        "layer_norm_backward": lambda k: k.layer_norm_rows_backward(ln_g, xhat, inv_std, gain),
        "scatter_add_rows": lambda k: k.scatter_add_rows(acc(), ids, rows),
        "attention_step": lambda k: k.attention_step(q, keys, values, H),
        "adam_update": lambda k: k.adam_update(param.copy(), grad, m.copy(), v.copy(),
                                               1e-3, 0.9, 0.98, 1e-9, 0.1, 0.02),
    }


def bench_kernels(repeats):
    print(f"{'kernel':<22} {'dtype':<8} {'numpy':>12} {'numba':>12} {'speedup':>9}")
    for dtype in (np.float32, np.float64):
        cases = kernel_cases(dtype)
        for name, call in cases.items():
            t_np = timeit(lambda: call(knp), repeats)
            if knb is None:
                print(f"{name:<22} {np.dtype(dtype).name:<8} {t_np * 1e6:>10.1f}us"
                      f" {'n/a':>12} {'n/a':>9}")
                continue
            t_nb = timeit(lambda: call(knb), repeats)
            print(f"{name:<22} {np.dtype(dtype).name:<8} {t_np * 1e6:>10.1f}us"
                  f" {t_nb * 1e6:>10.1f}us {t_np / t_nb:>8.2f}x")


def bench_train_step(repeats):
    """One full cross-entropy step (forward, backward, Adam) per backend."""
    import bidicap.kernels as kernels
    from bidicap import numerics as nx
    from bidicap.data import SpecialTokens, pair_from_ids
    from bidicap.model import ModelConfig, ParameterSet, decode_train_batch, encode
    from bidicap.training import Adam, joint_xe_loss_batch, stack_pairs, take_grads

    results = {}
    for impl, label in ((knp, "numpy"), (knb, "numba")):
        if impl is None:
            continue
        for name in ("softmax_rows", "softmax_rows_backward", "layer_norm_rows",
                     "layer_norm_rows_backward", "scatter_add_rows",
                     "attention_step", "adam_update"):
            setattr(kernels, name, getattr(impl, name))
        rng = np.random.default_rng(0)
        cfg = ModelConfig(vocab_size=80, feature_dim=48, d_model=64, d_k=16,
                          d_v=16, d_ff=128, n_layers=2, n_heads=4,
                          p_dropout=0.1, lam=0.1, max_len=16)
        params = ParameterSet.initialize(cfg, rng, dtype=np.float32)
        optimizer = Adam(params)
        sp = SpecialTokens(0, 1, 2, 3, 4)
        pairs = [pair_from_ids(rng.integers(5, 80, size=9).tolist(),
                               rng.integers(5, 80, size=8).tolist(), sp)
                 for _ in range(10)]
        fi, ft, bi, bt = stack_pairs(pairs, 0)
        feats = rng.normal(size=(10, 6, 48)).astype(np.float32)

        def step():
            ctx = encode(feats, params, cfg, training=True,
                         rng=np.random.default_rng(1))
            lf, lb = decode_train_batch(ctx, fi, bi, params, cfg, True,
                                        np.random.default_rng(2),
                                        np.random.default_rng(3))
            loss = joint_xe_loss_batch(lf, lb, ft, bt, 0)
            nx.backward(loss)
            optimizer.step(take_grads(params), 1e-4)

        results[label] = timeit(step, repeats)
    print()
    for label, t in results.items():
        print(f"train step ({label:<5}): {t * 1e3:8.2f} ms")
    if len(results) == 2:
        print(f"train step speedup: {results['numpy'] / results['numba']:.2f}x")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=50)
    args = ap.parse_args()
    bench_kernels(args.repeats)
    bench_train_step(max(5, args.repeats // 10))
