"""Compare the numba kernels against the pure-numpy fallback.

Run:  python benchmarks/bench_kernels.py
The numba side needs ECOCLEARN_NO_NUMBA unset; the numpy reference
implementations are called directly, so one process covers both.
"""

import time

import numpy as np

from ecoclearn import kernels

SHAPES = [
    ("conv 28x28x3 B=64, 8 filters", (64, 3, 28, 28), (8, 3, 3, 3)),
    ("conv 13x13x8 B=64, 16 filters", (64, 8, 13, 13), (16, 8, 3, 3)),
    ("conv 28x28x3 B=500 (codebook regen)", (500, 3, 28, 28), (8, 3, 3, 3)),
]

POOL_SHAPES = [
    ("pool 26x26x8 B=64", (64, 8, 26, 26)),
    ("pool 11x11x16 B=64", (64, 16, 11, 11)),
]


def timeit(fn, *args, repeat=10):
    fn(*args)  # warm (JIT compile / cache load)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best * 1000


def main():
    rng = np.random.default_rng(0)
    print(f"active backend: {kernels.backend_name()}")
    if not kernels.NUMBA_ENABLED:
        print("numba unavailable or disabled; timing the numpy path against itself\n")
    header = f"{'kernel':<42}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}"
    print(header)
    print("-" * len(header))

    for label, xs, ws in SHAPES:
        x, w = rng.random(xs), rng.random(ws)
        gy = kernels.conv2d_forward_np(x, w)
        rows = [
            (f"{label} fwd", kernels.conv2d_forward, kernels.conv2d_forward_np, (x, w)),
            (f"{label} bwd_x", kernels.conv2d_backward_x, kernels.conv2d_backward_x_np, (gy, w)),
            (f"{label} bwd_w", kernels.conv2d_backward_w, kernels.conv2d_backward_w_np, (x, gy)),
        ]
        for name, fast, ref, args in rows:
            a = timeit(fast, *args)
            b = timeit(ref, *args)
            va, vb = fast(*args), ref(*args)
            # fastmath reassociates long sums; compare relative to magnitude
            check = np.max(np.abs(va - vb)) / max(1.0, np.max(np.abs(vb)))
            assert check < 1e-12, f"{name}: backends disagree by {check}"
            print(f"{name:<42}{a:>10.2f}{b:>10.2f}{b / a:>8.1f}x")

    for label, xs in POOL_SHAPES:
        x = rng.random(xs)
        a = timeit(lambda v: kernels.maxpool2_forward(v), x)
        b = timeit(lambda v: kernels.maxpool2_forward_np(v), x)
        print(f"{label + ' fwd':<42}{a:>10.2f}{b:>10.2f}{b / a:>8.1f}x")
        out, idx = kernels.maxpool2_forward(x)
        gy = rng.random(out.shape)
        h, w_ = xs[2], xs[3]
        a = timeit(lambda g: kernels.maxpool2_backward(g, idx, h, w_), gy)
        b = timeit(lambda g: kernels.maxpool2_backward_np(g, idx, h, w_), gy)
        print(f"{label + ' bwd':<42}{a:>10.2f}{b:>10.2f}{b / a:>8.1f}x")


if __name__ == "__main__":
    main()
