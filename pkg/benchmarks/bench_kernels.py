"""Time each kernel under both backends.

    python3 benchmarks/bench_kernels.py [--repeat 200]

The numba table is compiled once before timing; numbers are the best of
five batches, in microseconds per call.
"""
import argparse
import timeit

import numpy as np

from cpchoi import _kernels as K


def workloads(rng):
    att = rng.normal(size=(16 * 4 * 64, 64))
    tokens = rng.normal(size=(16 * 64, 32))
    gamma, beta = rng.normal(size=32), rng.normal(size=32)
    _, xhat, rstd = K.NUMPY_KERNELS["layernorm"](tokens, gamma, beta, 1e-5)
    y = K.NUMPY_KERNELS["softmax"](att)
    logy = K.NUMPY_KERNELS["log_softmax"](att)
    cost = rng.uniform(size=(3, 8))  # ground truths x queries
    boxes = np.column_stack([rng.uniform(0.3, 0.7, size=(6, 2)), rng.uniform(0.1, 0.4, size=(6, 2))])
    return {
        "softmax": (att,),
        "softmax_bwd": (y, att),
        "log_softmax": (att,),
        "log_softmax_bwd": (logy, att),
        "layernorm": (tokens, gamma, beta, 1e-5),
        "layernorm_bwd": (tokens, xhat, rstd, gamma),
        "lsa": (cost,),
        "lex_lsa": (cost,),
        "coverage": (boxes, 8),
    }


def best_time(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=repeat, repeat=5)) / repeat * 1e6


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=200)
    args = parser.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; only the numpy backend is available")
    work = workloads(np.random.default_rng(0))
    for name, a in work.items():
        K.NUMBA_KERNELS[name](*a)  # compile
    print(f"{'kernel':<16}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, a in work.items():
        t_np = best_time(K.NUMPY_KERNELS[name], a, args.repeat)
        t_nb = best_time(K.NUMBA_KERNELS[name], a, args.repeat)
        print(f"{name:<16}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>9.2f}x")


if __name__ == "__main__":
    main()
