"""Compare the compiled and numpy convolution kernels.

    python benchmarks/bench_kernels.py [--repeat 5] [--size 64]

Prints best-of-N wall time per case and the speedup of the compiled path.
Outputs of both backends are checked for bit-identity before timing.
"""

import argparse
import timeit

import numpy as np

from repspark import _backend
from repspark.spark import MaskGrid, sparse_conv2d
from repspark.tensor_core import ConvParams, conv2d


def cases(size, rng):
    for dtype in (np.float32, np.float64):
        for name, c, groups, stride in [("dense 3x3", 16, 1, 1), ("depthwise 3x3", 32, 32, 1),
                                        ("dense 3x3 s2", 16, 1, 2)]:
            x = rng.standard_normal((1, c, size, size)).astype(dtype)
            p = ConvParams(rng.standard_normal((c, c // groups, 3, 3)).astype(dtype),
                           rng.standard_normal(c).astype(dtype), stride, 1, groups)
            tag = "f32" if dtype == np.float32 else "f64"
            yield f"conv {name} {tag}", lambda be, x=x, p=p: conv2d(x, p, be)
            for ratio in (0.6, 0.9):
                m = MaskGrid(size // 8, rng.random((8, 8)) >= ratio, ratio)  # grid is True where kept
                yield f"sparse {name} r={ratio} {tag}", lambda be, x=x, p=p, m=m: sparse_conv2d(x, p, m, be)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=64, help="spatial size (multiple of 8)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = ["python"] + (["cython"] if _backend.compiled_kernels is not None else [])
    if len(backends) == 1:
        print("compiled kernels not built; timing the numpy fallback only")
    header = f"{'case':<34}" + "".join(f"{b + ' ms':>12}" for b in backends) + ("   speedup" if len(backends) > 1 else "")
    print(header)
    for name, fn in cases(args.size, np.random.default_rng(args.seed)):
        outs = [fn(b) for b in backends]
        if len(outs) > 1 and not np.array_equal(outs[0], outs[1]):
            raise SystemExit(f"{name}: backends disagree")
        times = [min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)) * 1e3 for b in backends]
        line = f"{name:<34}" + "".join(f"{t:>12.2f}" for t in times)
        if len(times) > 1:
            line += f"{times[0] / times[1]:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
