"""Benchmark the compiled kernels against the numpy fallback.

Runs the convolution and trilinear kernels on the layer shapes that dominate
a training step and prints per-kernel timings plus the native/reference
speedup. Usage: python benchmarks/bench_kernels.py [--reps N]
"""

import argparse
import time

import numpy as np

from sipl.kernels import reference

try:
    from sipl.kernels import _native
except ImportError:
    _native = None


def timeit(fn, *args, reps=7):
    fn(*args)  # warm up
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best * 1000.0


CONV_CASES = [
    ("enc 32^3 s2 1->8", (32, 32, 32, 1), 8, 2),
    ("enc 16^3 s2 8->16", (16, 16, 16, 8), 16, 2),
    ("dec 16^3 s1 16->8", (16, 16, 16, 16), 8, 1),
    ("dec 32^3 s1 8->8", (32, 32, 32, 8), 8, 1),
]

TRI_CASES = [
    ("mask up 4^3 -> 32^3 x4", (4, 4, 4, 4), (32, 32, 32)),
    ("mask down 32^3 -> 1^3 x4", (32, 32, 32, 4), (1, 1, 1)),
]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--reps", type=int, default=7)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    backends = [("reference", reference)] + ([("native", _native)] if _native else [])
    if _native is None:
        print("note: compiled kernels unavailable; timing the fallback only\n")

    header = f"{'kernel':34s}" + "".join(f"{name:>12s}" for name, _ in backends)
    if _native is not None:
        header += f"{'speedup':>10s}"
    print(header)
    print("-" * len(header))

    def row(label, times):
        line = f"{label:34s}" + "".join(f"{t:10.2f}ms" for t in times)
        if len(times) == 2:
            line += f"{times[0] / times[1]:9.2f}x"
        print(line)

    for label, xshape, co, stride in CONV_CASES:
        x = rng.normal(size=xshape)
        w = rng.normal(size=(3, 3, 3, xshape[3], co))
        b = rng.normal(size=co)
        y = reference.conv3d_forward(x, w, b, stride, 1)
        g = np.ascontiguousarray(rng.normal(size=y.shape))
        row(f"conv fwd   {label}",
            [timeit(impl.conv3d_forward, x, w, b, stride, 1, reps=args.reps) for _, impl in backends])
        row(f"conv bwd_x {label}",
            [timeit(impl.conv3d_backward_input, g, w, stride, 1, tuple(x.shape), reps=args.reps)
             for _, impl in backends])
        row(f"conv bwd_w {label}",
            [timeit(impl.conv3d_backward_weight, x, g, stride, 1, 3, reps=args.reps)
             for _, impl in backends])

    for label, xshape, target in TRI_CASES:
        x = rng.normal(size=xshape)
        y = reference.trilinear_forward(x, target)
        g = np.ascontiguousarray(rng.normal(size=y.shape))
        row(f"tri fwd    {label}",
            [timeit(impl.trilinear_forward, x, tuple(target), reps=args.reps) for _, impl in backends])
        row(f"tri bwd    {label}",
            [timeit(impl.trilinear_backward, g, tuple(xshape[:3]), reps=args.reps) for _, impl in backends])


if __name__ == "__main__":
    main()
