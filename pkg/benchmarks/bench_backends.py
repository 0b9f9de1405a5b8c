"""Compare the numba kernels against the pure-numpy fallback.

Times the hot primitives (convolution forward/backward, pooling, rigid
warp) and one full network step on both backends.  Run from the repo
root:

    python3 benchmarks/bench_backends.py [--size 64] [--batch 8]

The first numba call per kernel includes JIT compilation; a warmup
round keeps that out of the timings.
"""

import argparse
import time

import numpy as np

from ddmc import backend
from ddmc.diffcore import AdamState, Tensor, adam_step, mse
from ddmc.kernels import (conv2d_forward, conv2d_grad_input,
                          conv2d_grad_weights, maxpool2x2_forward,
                          warp_backward, warp_forward)
from ddmc.models import SynthNet, SynthNetConfig


def timeit(fn, repeat=5):
    fn()  # warmup (and JIT compile on the numba path)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(size, batch):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((batch, 16, size, size)).astype(np.float32)
    w = rng.standard_normal((32, 16, 3, 3)).astype(np.float32)
    b = np.zeros(32, np.float32)
    gy = rng.standard_normal((batch, 32, size, size)).astype(np.float32)
    tx = rng.uniform(-3, 3, batch).astype(np.float32)
    ty = rng.uniform(-3, 3, batch).astype(np.float32)
    th = rng.uniform(-0.3, 0.3, batch).astype(np.float32)
    x2 = x[:, :2].copy()
    gy2 = gy[:, :2].copy()

    flops_fwd = 2.0 * batch * 32 * 16 * 9 * size * size
    rows = []
    for name, fn, flops in (
        ("conv2d_forward", lambda: conv2d_forward(x, w, b), flops_fwd),
        ("conv2d_grad_input", lambda: conv2d_grad_input(gy, w), flops_fwd),
        ("conv2d_grad_weights", lambda: conv2d_grad_weights(x, gy, 3),
         flops_fwd),
        ("maxpool2x2_forward", lambda: maxpool2x2_forward(x), None),
        ("warp_forward", lambda: warp_forward(x2, tx, ty, th), None),
        ("warp_backward",
         lambda: warp_backward(x2, tx, ty, th, gy2, need_input_grad=True),
         None),
    ):
        dt = timeit(fn)
        gfs = "" if flops is None else "%7.1f GF/s" % (flops / dt / 1e9)
        rows.append((name, dt * 1e3, gfs))
    return rows


def bench_step(size, batch):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((batch, 2, size, size)).astype(np.float32)
    y = rng.standard_normal((batch, 2, size, size)).astype(np.float32)
    net = SynthNet(SynthNetConfig(), rng=np.random.default_rng(2))
    net.train_mode()
    opt = AdamState.create(net.params, 2e-4)

    def step():
        net.params.zero_grads()
        loss = mse(net(Tensor(x)), Tensor(y))
        loss.backward()
        adam_step(net.params, opt)

    return timeit(step, repeat=3)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--batch", type=int, default=8)
    args = ap.parse_args()

    results = {}
    for name in ("numpy", "numba"):
        if name == "numba" and not backend.numba_available():
            print("numba not importable; skipping that backend")
            continue
        backend.set_backend(name)
        print("\n== backend: %s ==" % backend.active_backend())
        rows = bench_kernels(args.size, args.batch)
        for label, ms, gfs in rows:
            print("  %-22s %8.2f ms %s" % (label, ms, gfs))
        step_s = bench_step(args.size, args.batch)
        results[name] = step_s
        print("  %-22s %8.2f ms" % ("full training step", step_s * 1e3))
    if len(results) == 2:
        print("\nnumba speedup on a full step: %.1fx"
              % (results["numpy"] / results["numba"]))
    backend.set_backend("auto")


if __name__ == "__main__":
    main()
