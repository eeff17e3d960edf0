"""Compare the compiled row kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Prints the per-call time of each kernel on a few row shapes, the speed-up,
the largest absolute difference between the two backends, and the time of
one training episode of the default model under each backend.
"""
import argparse
import timeit

import numpy as np

from fine3d import kernels
from fine3d.data import SyntheticSpec, generate
from fine3d.model import ModelConfig, SegModel
from fine3d.geometry import sample_crop
from fine3d.training import SGD, TrainConfig, train_step

SHAPES = [(64, 8), (4096, 16), (32768, 32), (512, 512)]


def _cases(shape, rng):
    x = rng.normal(size=shape)
    g = rng.normal(size=shape)
    y = kernels.softmax_fwd(x)
    xhat, rstd = kernels.layernorm_fwd(x, 1e-5)
    return {
        "softmax_fwd": lambda: kernels.softmax_fwd(x),
        "softmax_bwd": lambda: kernels.softmax_bwd(y, g),
        "layernorm_fwd": lambda: kernels.layernorm_fwd(x, 1e-5),
        "layernorm_bwd": lambda: kernels.layernorm_bwd(g, xhat, rstd),
        "gelu_fwd": lambda: kernels.gelu_fwd(x),
        "gelu_bwd": lambda: kernels.gelu_bwd(x, g),
    }


def _first(out):
    return out[0] if isinstance(out, tuple) else out


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<14} {'rows x cols':>12} {'python us':>11} {'cython us':>11} {'speed-up':>9} {'max diff':>9}")
    for shape in SHAPES:
        per = {}
        outs = {}
        for backend in ("python", "cython"):
            kernels.use_backend(backend)
            cases = _cases(shape, np.random.default_rng(1))
            for name, fn in cases.items():
                n = max(1, int(2e6 // (shape[0] * shape[1])))
                t = min(timeit.repeat(fn, number=n, repeat=repeat)) / n
                per[name, backend] = t
                outs[name, backend] = _first(fn())
        for name in cases:
            tp, tc = per[name, "python"], per[name, "cython"]
            diff = np.abs(outs[name, "python"] - outs[name, "cython"]).max()
            print(f"{name:<14} {shape[0]:>6}x{shape[1]:<5} {tp * 1e6:>11.1f} {tc * 1e6:>11.1f} {tp / tc:>9.2f} {diff:>9.1e}")


def bench_episode(repeat):
    spec = SyntheticSpec()
    vol, lab, _ = generate(spec, 0)
    vol = vol.astype(np.float64)
    tcfg = TrainConfig()
    for backend in ("python", "cython"):
        kernels.use_backend(backend)
        model = SegModel(ModelConfig(seed=0))
        opt = SGD(model.parameters(), tcfg.momentum)
        crop = sample_crop(model.cfg.volume_dims, model.cfg.crop_size, np.random.default_rng(0))
        t = min(timeit.repeat(lambda: train_step(model, opt, vol, lab, crop, 1e-3, tcfg), number=1, repeat=repeat))
        print(f"training episode, {backend:<7}: {t * 1e3:8.1f} ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    try:
        kernels.use_backend("cython")
    except ImportError:
        raise SystemExit("compiled kernels are not built; run `pip install -e .` first")
    bench_kernels(args.repeat)
    bench_episode(args.repeat)


if __name__ == "__main__":
    main()
