"""Time the numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Also times one training step of the tiny model under each backend.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from csmixer import _kernels
from csmixer import tensor as T
from csmixer.config import tiny_config
from csmixer.data import normalize, synth_dataset
from csmixer.model import CSMixer
from csmixer.training import cross_entropy


def best_of(fn, repeat):
    fn()  # warm-up (jit compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng):
    img = rng.standard_normal((16, 32, 32, 3))
    feat = rng.standard_normal((16, 8, 8, 64))
    gain, bias = rng.standard_normal(64), rng.standard_normal(64)
    x = rng.standard_normal((16, 64, 256))
    g = rng.standard_normal(x.shape)

    def cases(impl):
        y, xhat, rstd = impl.layer_norm(feat, gain, bias, 1e-6)
        cols = impl.im2col(img, 8, 4, 2)
        return {
            "im2col k8 s4": lambda: impl.im2col(img, 8, 4, 2),
            "col2im k8 s4": lambda: impl.col2im(cols, 32, 32, 4, 2),
            "gelu": lambda: impl.gelu(x),
            "gelu_grad": lambda: impl.gelu_grad(x, g),
            "layer_norm": lambda: impl.layer_norm(feat, gain, bias, 1e-6),
            "layer_norm_grad": lambda: impl.layer_norm_grad(feat, xhat, rstd, gain),
        }
    return cases


def train_step(model, x, labels):
    model.zero_grad()
    with T.Tape() as tape:
        loss = cross_entropy(model.forward(x, train=True, rng=np.random.default_rng(0)), labels)
    tape.backward(loss)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if _kernels.numba_impl is None:
        print("numba not importable; only the numpy path exists")
        return
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    np_cases, nb_cases = cases(_kernels.numpy_impl), cases(_kernels.numba_impl)
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name in np_cases:
        a = best_of(np_cases[name], args.repeat) * 1e3
        b = best_of(nb_cases[name], args.repeat) * 1e3
        print(f"{name:<18}{a:>10.3f}{b:>10.3f}{a / b:>8.2f}x")

    cfg = tiny_config()
    model = CSMixer(cfg, np.random.default_rng(0))
    ds = synth_dataset(64, cfg.num_classes, cfg.image_size, seed=0)
    x = normalize(ds.pixels)
    res = {}
    for backend in ("numpy", "numba"):
        _kernels.use(backend)
        res[backend] = best_of(lambda: train_step(model, x, ds.labels), max(3, args.repeat // 4))
    print(f"{'train step b=64':<18}{res['numpy'] * 1e3:>10.1f}{res['numba'] * 1e3:>10.1f}"
          f"{res['numpy'] / res['numba']:>8.2f}x")


if __name__ == "__main__":
    main()
