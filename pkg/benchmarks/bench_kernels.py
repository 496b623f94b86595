"""Time the convolution and pooling kernels on both backends.

Convolution dominates a training step, so this is where the compiled
backend earns its keep.  Run with ``python benchmarks/bench_kernels.py``.
"""
import argparse
import time

import numpy as np

from guidednet.tensor import Tape, Tensor, backend, conv3d, max_pool3d

# (input shape, weight shape) pairs seen in a desk-scale U-Net step.
CASES = [
    ((2, 1, 16, 24, 24), (4, 1, 3, 3, 3)),
    ((2, 4, 16, 24, 24), (4, 4, 3, 3, 3)),
    ((2, 8, 8, 12, 12), (8, 8, 3, 3, 3)),
    ((2, 12, 16, 24, 24), (4, 12, 3, 3, 3)),
]


def _best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def conv_round_trip(x, w):
    xt, wt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
    with Tape() as tape:
        out = conv3d(xt, wt, padding=1)
        loss = out.sum()
    tape.backward(loss)
    return out.data, xt.grad, wt.grad


def pool_round_trip(x):
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        out = max_pool3d(xt)
        loss = out.sum()
    tape.backward(loss)
    return out.data, xt.grad


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args(argv)
    if backend.compiled_kernels() is None:
        print("compiled kernels not built; only the numpy backend is available")
        names = ["python"]
    else:
        names = ["python", "cython"]

    rng = np.random.default_rng(0)
    print(f"{'kernel':<10}{'input':<22}{'weight':<18}" + "".join(f"{n:>12}" for n in names) + "   max |diff|")
    for xs, ws in CASES:
        x, w = rng.normal(size=xs), rng.normal(size=ws)
        times, outs = [], []
        for n in names:
            backend.use(n)
            outs.append(conv_round_trip(x, w))
            times.append(_best_of(lambda: conv_round_trip(x, w), args.repeats))
        diff = max(float(np.abs(a - b).max()) for a, b in zip(outs[0], outs[-1]))
        print(f"{'conv3d':<10}{str(xs):<22}{str(ws):<18}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
              + f"   {diff:.1e}")

    x = rng.normal(size=(2, 8, 16, 24, 24))
    times, outs = [], []
    for n in names:
        backend.use(n)
        outs.append(pool_round_trip(x))
        times.append(_best_of(lambda: pool_round_trip(x), args.repeats))
    diff = max(float(np.abs(a - b).max()) for a, b in zip(outs[0], outs[-1]))
    print(f"{'maxpool':<10}{str(x.shape):<22}{'':<18}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
          + f"   {diff:.1e}")
    backend.use(names[-1])


if __name__ == "__main__":
    main()
