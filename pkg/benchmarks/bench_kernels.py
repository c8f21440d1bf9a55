"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Times im2col, col2im and grid quantization on search-sized tensors, checks
the two backends agree, then times one full training epoch of the toy
ResNet under each backend.
"""

import argparse
import json
import statistics
import sys
import time

import numpy as np

from odimo import _kernels as K
from odimo import network as nw
from odimo.data import gen_synthetic
from odimo.search import TrainConfig, pretrain


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times), statistics.median(times)


def kernel_cases(rng):
    x = rng.normal(size=(64, 16, 10, 10)).astype(np.float32)
    cols = K.im2col(x, 3, 3, 1)
    w = rng.normal(size=200_000)
    return {
        "im2col 64x16x10x10 k3": lambda: K.im2col(x, 3, 3, 1),
        "col2im 64x16x10x10 k3": lambda: K.col2im(cols, 10, 10, 1),
        "quantize_codes 200k": lambda: K.quantize_codes(w, 127.0, -127, 127),
    }


def check_agreement(rng):
    x = rng.normal(size=(4, 3, 7, 7))
    out = {}
    for backend in ("python", "cython"):
        K.use_backend(backend)
        c = K.im2col(x, 3, 3, 2)
        out[backend] = (c, K.col2im(c, 7, 7, 2), K.quantize_codes(x, 3.0, -4, 4)[0])
    for a, b in zip(out["python"], out["cython"]):
        np.testing.assert_array_equal(a, b)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args(argv)
    try:
        K.use_backend("cython")
    except ImportError:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    check_agreement(rng)
    results = {}
    for name in kernel_cases(rng):
        row = {}
        for backend in ("python", "cython"):
            K.use_backend(backend)
            row[backend] = best_of(kernel_cases(np.random.default_rng(0))[name], args.repeat)[0]
        results[name] = row
    ds = gen_synthetic(classes=10, n=1000, seed=0)
    row = {}
    for backend in ("python", "cython"):
        K.use_backend(backend)
        net = nw.build(nw.toy_resnet(), seed=0)
        t0 = time.perf_counter()
        pretrain(net, ds, TrainConfig(epochs=1, seed=0))
        row[backend] = time.perf_counter() - t0
    results["toy_resnet epoch (800 samples)"] = row
    K.use_backend("cython")
    width = max(len(k) for k in results)
    print(f"{'case':<{width}}  {'python s':>10}  {'cython s':>10}  {'speedup':>8}")
    for name, row in results.items():
        print(f"{name:<{width}}  {row['python']:>10.5f}  {row['cython']:>10.5f}  {row['python'] / row['cython']:>7.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
