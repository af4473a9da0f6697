"""Compare the numpy and numba kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--batch 8] [--tile 64]

Part 1 times each kernel (im2col, col2im, max-pool forward/backward) on
the desk-scale layer shapes with both implementations in this process.
Part 2 runs one full training step (forward, backward, Adam) in a fresh
interpreter per backend, since the backend is fixed at import time.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from lsw import kernels, ops


def best_of(fn, repeat: int) -> float:
    fn()  # warm-up (and numba compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def layer_cases(batch: int, tile: int):
    """(label, padded input shape, kernel, pool input shape) per conv layer of the ledger net."""
    cases, c, s = [], 5, tile
    for i, f in enumerate((16, 32, 64, 64)):
        d = 2 if i == 0 else 1
        cases.append((f"L{i + 1}", (batch, c, d, s + 2, s + 2), (d, 3, 3), (batch, f, 1, s, s)))
        c, s = f, s // 2
    return cases


def bench_kernels(batch: int, tile: int, repeat: int) -> None:
    if not kernels.HAVE_NUMBA:
        print("numba not available; kernel comparison skipped")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for label, xp_shape, kern, pool_shape in layer_cases(batch, tile):
        xp = rng.random(xp_shape).astype(np.float32)
        out = ops.conv_output_shape(xp_shape[2:], kern, (1, 1, 1), (0, 0, 0))
        cols = kernels.im2col_numpy(xp, kern, (1, 1, 1), out)
        pooled_in = rng.random(pool_shape).astype(np.float32)
        pout = ops.pool_output_shape(pool_shape[2:], (1, 2, 2), (1, 2, 2))
        _, arg = kernels.maxpool_forward_numpy(pooled_in, (1, 2, 2), (1, 2, 2), pout)
        g = rng.random((pool_shape[0], pool_shape[1], *pout)).astype(np.float32)
        pairs = {
            "im2col": (
                lambda: kernels.im2col_numpy(xp, kern, (1, 1, 1), out),
                lambda: kernels.im2col_numba(xp, kern, (1, 1, 1), out),
            ),
            "col2im": (
                lambda: kernels.col2im_numpy(cols, xp_shape, kern, (1, 1, 1), out),
                lambda: kernels.col2im_numba(cols, xp_shape, kern, (1, 1, 1), out),
            ),
            "pool fwd": (
                lambda: kernels.maxpool_forward_numpy(pooled_in, (1, 2, 2), (1, 2, 2), pout),
                lambda: kernels.maxpool_forward_numba(pooled_in, (1, 2, 2), (1, 2, 2), pout),
            ),
            "pool bwd": (
                lambda: kernels.maxpool_backward_numpy(g, arg, pool_shape),
                lambda: kernels.maxpool_backward_numba(g, arg, pool_shape),
            ),
        }
        for name, (f_np, f_nb) in pairs.items():
            a, b = best_of(f_np, repeat), best_of(f_nb, repeat)
            print(f"{label + ' ' + name:<22}{a * 1e3:>10.2f}{b * 1e3:>10.2f}{a / b:>8.1f}x")


STEP_SCRIPT = """
import time, numpy as np
from lsw import BACKEND, ops
from lsw.adam import AdamState, adam_step
from lsw.model import NetworkConfig, build_network, forward
from lsw.tensor import Tape, backward
net = build_network(NetworkConfig.ledger(tile_size={tile}))
rng = np.random.default_rng(0)
x = rng.random(({batch}, 5, 2, {tile}, {tile})).astype(np.float32)
y = (np.arange({batch}) % 2).astype(float)
st = AdamState()
def step():
    with Tape() as t:
        loss = ops.bce_loss(forward(net, x), y)
    backward(loss, t)
    adam_step(net.params, [p.grad for p in net.params], st)
step()
ts = []
for _ in range({repeat}):
    t0 = time.perf_counter(); step(); ts.append(time.perf_counter() - t0)
print(BACKEND, min(ts))
"""


def bench_step(batch: int, tile: int, repeat: int) -> None:
    print(f"\ntraining step, batch {batch}, tile {tile} (best of {repeat})")
    for backend in ("numpy", "numba"):
        env = dict(os.environ, LSW_BACKEND=backend)
        code = STEP_SCRIPT.format(batch=batch, tile=tile, repeat=repeat)
        r = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
        if r.returncode:
            print(f"{backend:<8} failed: {r.stderr.strip().splitlines()[-1]}")
            continue
        name, secs = r.stdout.split()
        print(f"{backend:<8}{float(secs) * 1e3:>9.1f} ms  (active backend: {name})")


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--tile", type=int, default=64)
    args = ap.parse_args(argv)
    bench_kernels(args.batch, args.tile, args.repeat)
    bench_step(args.batch, args.tile, max(3, args.repeat // 4))


if __name__ == "__main__":
    main()
