"""Time im2col/col2im per backend and a full conv forward+backward.

    python benchmarks/bench_kernels.py --repeat 20
"""

import argparse
import time

import numpy as np

from polarlab import kernels, nn
from polarlab import tensor as T

SHAPES = [(64, 3, 16, 16), (64, 16, 16, 16), (64, 32, 8, 8)]


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_lowering(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for shape in SHAPES:
        x = rng.random(shape).astype(np.float32)
        for name, (im2col, col2im) in kernels.backends().items():
            cols = im2col(x, 3, 1, 1)
            t_fwd = _best(lambda: im2col(x, 3, 1, 1), repeat)
            t_bwd = _best(lambda: col2im(cols, x.shape, 3, 1, 1), repeat)
            rows.append((name, shape, t_fwd, t_bwd))
    return rows


def bench_network(repeat, batch):
    net = nn.build_cnn(8, seed=0)
    x = np.random.default_rng(1).random((batch, 3, 16, 16)).astype(np.float32)
    y = np.arange(batch) % 8

    def step():
        for p in net.parameters():
            p.grad = None
        T.cross_entropy(nn.forward(net, x, train=True), y).backward()

    return _best(step, repeat)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=10)
    ap.add_argument("--batch", type=int, default=64)
    args = ap.parse_args(argv)
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'backend':8} {'shape':>18} {'im2col ms':>10} {'col2im ms':>10}")
    for name, shape, f, b in bench_lowering(args.repeat):
        print(f"{name:8} {str(shape):>18} {f * 1e3:10.3f} {b * 1e3:10.3f}")
    t = bench_network(args.repeat, args.batch)
    print(f"desk CNN train step, batch {args.batch}: {t * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
