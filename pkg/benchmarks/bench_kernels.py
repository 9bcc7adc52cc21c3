"""Time the numba kernels against the numpy fallback.

Run ``python benchmarks/bench_kernels.py``.  The first table times each
kernel in isolation (numba compile time excluded).  The second times one toy
training step in a fresh interpreter with and without
IMPLANTFORMER_DISABLE_NUMBA, which is what the flag actually changes.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from implantformer import _kernels

STEP_SNIPPET = """
import time, numpy as np
from implantformer.network import NetConfig
from implantformer.network import init_params
from implantformer.training import batch_loss
net = NetConfig()
params = init_params(net, 0)
rng = np.random.default_rng(0)
x = rng.uniform(0, 1, (6, 64, 64, 3)).astype(np.float32)
kp = rng.uniform(8, 56, (6, 2))
batch_loss(params, net, x, kp, 2.0, 0.55)
t0 = time.perf_counter()
for _ in range({reps}):
    batch_loss(params, net, x, kp, 2.0, 0.55)
print((time.perf_counter() - t0) / {reps})
"""


def cases():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, 64, 64, 4)).astype(np.float32)
    cols = _kernels.numpy_kernels.im2col(x, 3, 1, 1, 64, 64)
    heat = rng.random((128, 128))
    return {
        "im2col 6x64x64x4 k3": lambda k: k.im2col(x, 3, 1, 1, 64, 64),
        "col2im 6x64x64x4 k3": lambda k: k.col2im(cols, 64, 64, 1, 1),
        "local_max 128x128": lambda k: k.local_max(heat),
        "draw_gaussian r=6": lambda k: k.draw_gaussian(np.zeros((128, 128)), 60, 60, 2.0, 6),
        "disk_mask 512 r=10": lambda k: k.disk_mask(512, 512, 200.5, 300.5, 10.0),
    }


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def step_time(disable, reps):
    env = dict(os.environ, IMPLANTFORMER_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(reps=reps)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    ap.add_argument("--steps", type=int, default=5, help="training steps per path")
    args = ap.parse_args(argv)
    if _kernels.numba_kernels is None:
        sys.exit("numba is not installed; nothing to compare")

    print(f"{'kernel':<22}{'numpy ms':>11}{'numba ms':>11}{'speedup':>9}")
    for name, fn in cases().items():
        fn(_kernels.numba_kernels)            # compile outside the timed region
        t_np = best_of(lambda: fn(_kernels.numpy_kernels), args.repeat, args.number)
        t_nb = best_of(lambda: fn(_kernels.numba_kernels), args.repeat, args.number)
        print(f"{name:<22}{1e3 * t_np:>11.3f}{1e3 * t_nb:>11.3f}{t_np / t_nb:>8.1f}x")

    t_np, t_nb = step_time(True, args.steps), step_time(False, args.steps)
    print(f"\ntoy train step, batch 6: numpy {1e3 * t_np:.1f} ms, numba {1e3 * t_nb:.1f} ms "
          f"({t_np / t_nb:.2f}x)")


if __name__ == "__main__":
    main()
