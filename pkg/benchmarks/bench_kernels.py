"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel with the best-of-N time for each backend and the
speedup. Both backends are checked for agreement on every input first.
"""
import argparse
import time

import numpy as np

from sedkit import backend


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def boxes(rng, n, size=128.0):
    xy = rng.uniform(0, size * 0.8, size=(n, 2))
    return np.concatenate([xy, xy + rng.uniform(4, size * 0.3, size=(n, 2))], axis=1)


def cases(rng):
    x = rng.normal(size=(8, 64, 64, 16)).astype(np.float32)
    cols = rng.normal(size=(8 * 32 * 32, 3 * 3 * 16)).astype(np.float32)
    a, b = boxes(rng, 600), boxes(rng, 600)
    nb = boxes(rng, 2000)
    scores = rng.uniform(size=2000)
    labels = rng.integers(0, 3, size=2000)
    order = np.argsort(-scores, kind="stable")
    cost = rng.uniform(size=(60, 60))
    return {
        "im2col 8x64x64x16 k3 s2": lambda k: k.im2col(x, 3, 3, 2, 1),
        "col2im 8x64x64x16 k3 s2": lambda k: k.col2im(cols, 8, 64, 64, 16, 3, 3, 2, 1),
        "box_iou_matrix 600x600": lambda k: k.box_iou_matrix(a, b),
        "nms_sorted 2000 boxes": lambda k: k.nms_sorted(nb, labels, order, 0.5),
        "hungarian_square 60x60": lambda k: k.hungarian_square(cost),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    try:
        fast = backend.get("cython")
    except ImportError:
        print("compiled kernels not built; nothing to compare")
        return 1
    slow = backend.get("python")
    print(f"{'kernel':28s} {'cython ms':>10s} {'python ms':>10s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(args.seed)).items():
        ra, rb = fn(fast), fn(slow)
        for u, v in zip(ra if isinstance(ra, tuple) else (ra,), rb if isinstance(rb, tuple) else (rb,)):
            np.testing.assert_allclose(np.asarray(u), np.asarray(v), rtol=1e-5, atol=1e-5)
        tf = best_of(lambda: fn(fast), args.repeat)
        ts = best_of(lambda: fn(slow), args.repeat)
        print(f"{name:28s} {tf * 1e3:10.2f} {ts * 1e3:10.2f} {ts / tf:7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
