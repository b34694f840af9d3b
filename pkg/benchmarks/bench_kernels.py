"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel with the best wall time of each backend.
"""

import argparse
import time

import numpy as np

from umad import _kernels


def cases(rng):
    frames = rng.random((2, 128, 128, 3))
    a = rng.uniform(0.5, 1.0, (4096, 7, 16, 8))
    u = rng.normal(size=(4096, 7, 16))
    B = rng.normal(size=(4096, 7, 8))
    C = rng.normal(size=(4096, 7, 8))
    y, h = _kernels.selective_scan_forward(a, u, B, C)
    gy = rng.normal(size=y.shape)
    img = rng.random((2, 96, 96))
    win = np.outer(*[np.exp(-(np.arange(11) - 5) ** 2 / 4.5)] * 2)
    win /= win.sum()
    return {
        "block_match 128x128 r4": lambda: _kernels.block_match(frames[0], frames[1], 4, 8),
        "scan forward 4096x7x16x8": lambda: _kernels.selective_scan_forward(a, u, B, C),
        "scan backward 4096x7x16x8": lambda: _kernels.selective_scan_backward(a, u, B, C, h, gy),
        "ssim map 96x96": lambda: _kernels.ssim_map(img[0], img[1], win, 1e-4, 9e-4),
    }


def best_time(fn, repeat):
    fn()  # warm-up, includes jit compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed")
    work = cases(np.random.default_rng(args.seed))
    prev = _kernels.backend()
    print(f"{'kernel':28s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    try:
        for name, fn in work.items():
            _kernels.set_backend("numba")
            tn = best_time(fn, args.repeat)
            _kernels.set_backend("numpy")
            tp = best_time(fn, args.repeat)
            print(f"{name:28s} {tn * 1e3:10.2f} {tp * 1e3:10.2f} {tp / tn:8.1f}x")
    finally:
        _kernels.set_backend(prev)


if __name__ == "__main__":
    main()
