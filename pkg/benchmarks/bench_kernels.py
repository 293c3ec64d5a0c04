"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both backends are imported directly, so the MEANSPARSE_KERNELS flag does not
matter here. Also times one fwd+bwd pass of the B=4 mini-ResNet per backend.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from meansparse._kernels import _numba, _numpy


def cases(rng):
    x = rng.standard_normal((128, 16, 34, 34))
    cols = _numpy.im2col(x, 3, 3, 1)
    a = rng.standard_normal((128, 32, 256))
    mu, th = rng.standard_normal(32), np.abs(rng.standard_normal(32))
    v = rng.standard_normal(1_000_000)
    return {
        "im2col 128x16x32x32 k3": lambda m: m.im2col(x, 3, 3, 1),
        "col2im 128x16x32x32 k3": lambda m: m.col2im(cols, x.shape, 3, 3, 1, 32, 32),
        "sparsify_forward 128x32x256": lambda m: m.sparsify_forward(a, mu, th),
        "channel_moments 128x32x256": lambda m: m.channel_moments(a),
        "hard_threshold 1e6": lambda m: m.hard_threshold(v, 0.5),
    }


MODEL_SNIPPET = """
import time, numpy as np
from meansparse.tensor import set_default_dtype, backward
from meansparse.model import NetSpec, MiniResNet
from meansparse import ops
from meansparse.tensor import Tensor
set_default_dtype(np.float32)
net = MiniResNet(NetSpec(input_shape=(3, 16, 16), num_classes=10, blocks=4), seed=0)
x = np.random.default_rng(0).random((128, 3, 16, 16)).astype(np.float32)
y = np.arange(128) % 10
def step():
    net.zero_grad(); backward(ops.cross_entropy(net(Tensor(x)), y))
step()
t = time.perf_counter()
for _ in range({r}): step()
print((time.perf_counter() - t) / {r})
"""


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<30} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, fn in cases(rng).items():
        fn(_numba)  # compile outside the timed region
        t_np = min(timeit.repeat(lambda: fn(_numpy), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: fn(_numba), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<30} {t_np:>10.2f} {t_nb:>10.2f} {t_np / t_nb:>8.2f}")
    for backend in ("numpy", "numba"):
        env = {**os.environ, "MEANSPARSE_KERNELS": backend}
        out = subprocess.run([sys.executable, "-c", MODEL_SNIPPET.format(r=args.repeat)], env=env,
                             capture_output=True, text=True, check=True)
        print(f"mini-ResNet fwd+bwd, 128x3x16x16 [{backend}]: {float(out.stdout) * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
