"""Time the brute-force neighbour kernel: compiled extension vs numpy fallback.

    python benchmarks/bench_knn.py [--repeats 5]

Both backends are checked for identical output before timing.
"""
import argparse
import time

import numpy as np

from sceneenc import kernels

CASES = [  # (points, centers, k, labelled)
    (512, 32, 8, True),     # region similarity query during training
    (512, 512, 8, False),   # noise score over a whole scene
    (2048, 2048, 8, False),
    (2048, 64, 16, True),
]


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    names = sorted(kernels.BACKENDS)
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'N':>6} {'m':>6} {'k':>4} {'labels':>7} " + " ".join(f"{n + ' ms':>12}" for n in names)
          + ("     speedup" if len(names) > 1 else ""))
    for n, m, k, labelled in CASES:
        coords = rng.uniform(0, 4, size=(n, 3))
        centers = rng.choice(n, size=m, replace=False).astype(np.int64)
        labels = rng.integers(0, 8, size=n) if labelled else None
        outs = {b: kernels.BACKENDS[b](coords, centers, k, labels) for b in names}
        ref = outs[names[0]]
        for b in names[1:]:
            assert np.array_equal(outs[b][0], ref[0]) and np.array_equal(outs[b][1], ref[1]), b
        ms = {b: 1e3 * best_of(lambda b=b: kernels.BACKENDS[b](coords, centers, k, labels), args.repeats)
              for b in names}
        line = f"{n:>6} {m:>6} {k:>4} {str(labelled):>7} " + " ".join(f"{ms[b]:>12.3f}" for b in names)
        if "compiled" in ms:
            line += f"  {ms['python'] / ms['compiled']:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
