"""Time the compiled convolution kernels against the numpy fallback.

Each backend runs in its own interpreter because the choice is made at
import time (``CLDFD_PURE_PYTHON=1`` forces the fallback)::

    python3 benchmarks/bench_kernels.py --repeat 20
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

# (batch, channels, height, width, kernel, stride, padding): shapes met by the desk backbone
CASES = [
    (64, 3, 32, 32, 3, 1, 1),
    (64, 8, 32, 32, 3, 2, 1),
    (64, 32, 8, 8, 3, 1, 1),
    (64, 64, 4, 4, 3, 1, 1),
]


def _measure(repeat: int) -> dict:
    from cldfd.numerics import Tensor, backward, conv2d, kernels, ops

    rng = np.random.default_rng(0)
    rows = []
    for b, c, h, w, k, s, p in CASES:
        x = rng.random((b, c, h, w)).astype(np.float32)
        cols = kernels.im2col(x, k, k, s, p)
        weight = rng.normal(size=(2 * c, c, k, k)).astype(np.float32)

        def conv_step():
            xt = Tensor(x, requires_grad=True)
            wt = Tensor(weight, requires_grad=True)
            backward(ops.sum(conv2d(xt, wt, s, p)))

        timings = {
            "im2col": min(timeit.repeat(lambda: kernels.im2col(x, k, k, s, p), number=1, repeat=repeat)),
            "col2im": min(timeit.repeat(lambda: kernels.col2im(cols, x.shape, k, k, s, p), number=1, repeat=repeat)),
            "conv_fwd_bwd": min(timeit.repeat(conv_step, number=1, repeat=repeat)),
        }
        rows.append({"case": f"{b}x{c}x{h}x{w} k{k} s{s} p{p}", **timings})
    return {"backend": kernels.BACKEND, "rows": rows}


def _run_backend(pure: bool, repeat: int) -> dict:
    env = dict(os.environ)
    env.pop("CLDFD_PURE_PYTHON", None)
    if pure:
        env["CLDFD_PURE_PYTHON"] = "1"
    out = subprocess.run(
        [sys.executable, __file__, "--worker", "--repeat", str(repeat)], env=env, capture_output=True, text=True, check=True
    )
    return json.loads(out.stdout)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--repeat", type=int, default=10, help="timing repeats; the minimum is reported")
    parser.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args(argv)
    if args.worker:
        print(json.dumps(_measure(args.repeat)))
        return 0

    compiled = _run_backend(False, args.repeat)
    fallback = _run_backend(True, args.repeat)
    if compiled["backend"] != "compiled":
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    print(f"{'case':<24} {'op':<13} {'compiled ms':>12} {'fallback ms':>12} {'speedup':>8}")
    for a, b in zip(compiled["rows"], fallback["rows"]):
        for op in ("im2col", "col2im", "conv_fwd_bwd"):
            print(f"{a['case']:<24} {op:<13} {a[op] * 1e3:12.3f} {b[op] * 1e3:12.3f} {b[op] / a[op]:8.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
