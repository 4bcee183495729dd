"""Compare the numba and numpy kernel paths.

Kernel timings call both implementations directly on arrays sized like the
toy model's activations (batch 64, 65 tokens, d=32, 4 heads). The train-step
timing runs in two subprocesses because ``TRANSMIX_NUMBA`` is read at import.

    python benchmarks/bench_kernels.py [--repeat 50] [--steps 10]
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from transmix import _kernels as K

STEP_SNIPPET = """
import time, numpy as np
from transmix import _kernels, train, vit
from transmix.data import BlobParams, generate_synthetic_blobs
cfg = vit.ModelConfig(embed_dim=32, heads=4, depth=2, num_classes=2)
tcfg = train.TrainConfig(aug_mode="transmix", mix_probability=1.0)
ds = generate_synthetic_blobs(BlobParams(samples=64), seed=0)
params = vit.init_params(cfg, seed=0)
opt = train.AdamW()
rng = np.random.default_rng(0)
train.train_step(ds.images, ds.labels, params, cfg, tcfg, opt, rng, 0, 100)  # warm-up / jit
t0 = time.perf_counter()
for i in range({steps}):
    train.train_step(ds.images, ds.labels, params, cfg, tcfg, opt, rng, i + 1, 100)
print(_kernels.HAS_NUMBA, (time.perf_counter() - t0) / {steps})
"""


def kernel_cases(rng: np.random.Generator):
    scores = rng.standard_normal((64 * 4 * 65, 65))
    probs = K.softmax_rows_np(scores)
    gy_s = rng.standard_normal(scores.shape)
    x = rng.standard_normal((64 * 65, 32))
    gamma, beta = rng.standard_normal(32), rng.standard_normal(32)
    _, xhat, rstd = K.layer_norm_np(x, gamma, beta, 1e-6)
    gy_x = rng.standard_normal(x.shape)
    h = rng.standard_normal((64 * 65, 128))
    gy_h = rng.standard_normal(h.shape)
    return {
        "softmax_rows": (lambda: K.softmax_rows_np(scores), lambda: K._softmax_rows_nb(scores)),
        "softmax_rows_backward": (
            lambda: K.softmax_rows_backward_np(probs, gy_s), lambda: K._softmax_rows_backward_nb(probs, gy_s)),
        "layer_norm": (
            lambda: K.layer_norm_np(x, gamma, beta, 1e-6), lambda: K._layer_norm_nb(x, gamma, beta, 1e-6)),
        "layer_norm_backward": (
            lambda: K.layer_norm_backward_np(gy_x, xhat, rstd, gamma),
            lambda: K._layer_norm_backward_nb(gy_x, xhat, rstd, gamma)),
        "gelu": (lambda: K.gelu_np(h), lambda: K._gelu_nb(h)),
        "gelu_backward": (lambda: K.gelu_backward_np(h, gy_h), lambda: K._gelu_backward_nb(h, gy_h)),
    }


def best_of(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def time_train_step(numba: bool, steps: int) -> float:
    env = dict(os.environ, TRANSMIX_NUMBA="1" if numba else "0")
    out = subprocess.run(
        [sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env, capture_output=True, text=True, check=True,
    )
    active, secs = out.stdout.split()
    if (active == "True") != numba:
        raise RuntimeError(f"requested numba={numba} but the child ran with HAS_NUMBA={active}")
    return float(secs)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=50)
    parser.add_argument("--steps", type=int, default=10)
    args = parser.parse_args(argv)

    if not K.HAS_NUMBA:
        print("numba is unavailable (or TRANSMIX_NUMBA=0); only the numpy path can be timed")
        return 1

    cases = kernel_cases(np.random.default_rng(0))
    print(f"{'kernel':24s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, (np_fn, nb_fn) in cases.items():
        nb_fn()  # compile outside the timed region
        t_np, t_nb = best_of(np_fn, args.repeat), best_of(nb_fn, args.repeat)
        print(f"{name:24s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:7.2f}x")

    t_np = time_train_step(False, args.steps)
    t_nb = time_train_step(True, args.steps)
    print(f"{'train_step (batch 64)':24s} {t_np * 1e3:10.1f} {t_nb * 1e3:10.1f} {t_np / t_nb:7.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
