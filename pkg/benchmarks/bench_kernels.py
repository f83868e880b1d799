"""Benchmark the compiled kernel core against the numpy fallback.

Usage:
    python benchmarks/bench_kernels.py [--sizes 1e5,1e6,4e6] [--repeats 5]

Both backends produce bit-identical results; this script reports wall
time per kernel and the compiled/numpy speedup so the extension's value
can be judged on real sizes.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from obmerge import _kernels_py as pure  # noqa: E402
from obmerge._util import dare_stream_seed  # noqa: E402

try:
    from obmerge import _kernels as compiled
except ImportError:
    compiled = None


def best_of(fn, repeats: int) -> float:
    timings = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        timings.append(time.perf_counter() - start)
    return min(timings)


def cases(n: int, rng: np.random.Generator):
    rows = max(1, n // 2048)
    grid = rng.standard_normal((rows, 2048)).astype(np.float32)
    h = (rng.standard_normal(2048) ** 2).astype(np.float32)
    flat = rng.standard_normal(n).astype(np.float32)
    scores = (rng.standard_normal(n) ** 2).astype(np.float32)
    stack = rng.standard_normal((2, n)).astype(np.float32)
    weights = (rng.standard_normal((2, n)) ** 2).astype(np.float32)
    lambdas = np.ones(2, np.float32)
    seed = dare_stream_seed("benchmark.weight", 42)
    k = int(0.7 * n)

    def bench(impl):
        signs = impl.elect_signs_stack(stack, weights)
        return {
            "dare_keep_mask": lambda: impl.dare_keep_mask(seed, n, 0.9),
            "rank_topk_mask": lambda: impl.rank_topk_mask(scores, np.abs(flat), k),
            "score_grid": lambda: impl.score_grid(h, grid),
            "elect_signs": lambda: impl.elect_signs_stack(stack, weights),
            "aggregate": lambda: impl.aggregate_stack(stack, signs, lambdas, True),
        }

    return bench


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", default="100000,1000000,4000000")
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    sizes = [int(float(token)) for token in args.sizes.split(",")]

    if compiled is None:
        print("compiled kernels not built (python setup.py build_ext --inplace); "
              "benchmarking the numpy backend only")

    rng = np.random.default_rng(0)
    header = f"{'kernel':<16}{'n':>10}{'numpy ms':>12}"
    if compiled is not None:
        header += f"{'compiled ms':>14}{'speedup':>10}"
    print(header)
    for n in sizes:
        bench = cases(n, rng)
        pure_cases = bench(pure)
        compiled_cases = bench(compiled) if compiled is not None else None
        for name, fn in pure_cases.items():
            numpy_ms = best_of(fn, args.repeats) * 1e3
            row = f"{name:<16}{n:>10}{numpy_ms:>12.3f}"
            if compiled_cases is not None:
                compiled_ms = best_of(compiled_cases[name], args.repeats) * 1e3
                ratio = numpy_ms / compiled_ms if compiled_ms > 0 else float("inf")
                row += f"{compiled_ms:>14.3f}{ratio:>9.2f}x"
            print(row)
    return 0


if __name__ == "__main__":
    sys.exit(main())
