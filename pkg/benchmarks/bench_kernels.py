"""Benchmark the jitted classifier kernels against the pure-numpy fallback.

Run: python benchmarks/bench_kernels.py
(REPAL_NO_NUMBA=1 skips the jitted path.)
"""
import time

import numpy as np

import repal.kernels as kernels


def make_problem(n=200_000, dim=50_000, nnz_per_row=24, seed=0):
    rng = np.random.default_rng(seed)
    indptr = np.arange(0, n * nnz_per_row + 1, nnz_per_row, dtype=np.int64)
    indices = rng.integers(0, dim, size=n * nnz_per_row).astype(np.int64)
    counts = rng.random(n * nnz_per_row) + 0.5
    labels = rng.integers(0, 2, size=n).astype(np.float64)
    weights = rng.normal(scale=0.1, size=(dim, 3))
    bias = rng.normal(scale=0.1, size=3)
    return indptr, indices, counts, labels, weights, bias


def timed(fn, *args, repeats=3):
    best = float("inf")
    result = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, result


def main():
    indptr, indices, counts, labels, weights, bias = make_problem()
    n = len(indptr) - 1
    print(f"problem: {n} rows, {len(indices)} nnz, {weights.shape[0]} features")

    t_np_fwd, logits_np = timed(kernels._forward_np, indptr, indices, counts, weights, bias)
    t_np_grad, grad_np = timed(
        kernels._loss_grad_np, indptr, indices, counts, labels, weights, bias
    )
    print(f"numpy   forward {t_np_fwd * 1e3:8.1f} ms   loss+grad {t_np_grad * 1e3:8.1f} ms")

    if kernels.USE_NUMBA:
        kernels._forward_nb(indptr[:2], indices[:24], counts[:24], weights, bias)  # warm up
        kernels._loss_grad_nb(indptr[:2], indices[:24], counts[:24], labels[:1], weights, bias)
        t_nb_fwd, logits_nb = timed(kernels._forward_nb, indptr, indices, counts, weights, bias)
        t_nb_grad, grad_nb = timed(
            kernels._loss_grad_nb, indptr, indices, counts, labels, weights, bias
        )
        print(f"numba   forward {t_nb_fwd * 1e3:8.1f} ms   loss+grad {t_nb_grad * 1e3:8.1f} ms")
        print(
            f"speedup forward {t_np_fwd / t_nb_fwd:6.1f}x   loss+grad {t_np_grad / t_nb_grad:6.1f}x"
        )
        assert np.allclose(logits_np, logits_nb)
        assert np.isclose(grad_np[0], grad_nb[0])
        assert np.allclose(grad_np[1], grad_nb[1]) and np.allclose(grad_np[2], grad_nb[2])
        print("outputs agree")
    else:
        print("numba disabled (REPAL_NO_NUMBA) - jitted path skipped")


if __name__ == "__main__":
    main()
