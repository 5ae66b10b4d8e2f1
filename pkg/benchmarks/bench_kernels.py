"""Compare the compiled and numpy convolution-lowering kernels.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 32]

Times im2col, col2im and a full conv2d forward+backward for each backend on
layer shapes from the student network, and checks the outputs agree bit for bit.
"""

import argparse
import timeit

import numpy as np

from rrkd import _kernels_py, kernels, ops
from rrkd.tensor import Tape, Tensor, backward

try:
    from rrkd import _kernels as _compiled
except ImportError:
    _compiled = None

# (channels, spatial size, stride) of the 3x3 convolutions in a student / teacher
LAYERS = [(16, 32, 1), (32, 16, 1), (64, 8, 1), (16, 32, 2)]


def _conv_step(x, w, stride):
    with Tape():
        y = ops.conv2d(x, w, stride=stride, pad=1)
        loss = ops.sum_all(y)
    backward(loss)


def bench(repeat, batch, dtype):
    backends = {"python": _kernels_py}
    if _compiled is not None:
        backends["cython"] = _compiled
    rng = np.random.default_rng(0)
    print(f"{'layer':<16}{'op':<14}" + "".join(f"{name:>12}" for name in backends) + "     speedup")
    for c, size, stride in LAYERS:
        x = rng.standard_normal((batch, c, size, size)).astype(dtype)
        cols = {name: mod.im2col(x, 3, 3, stride, 1) for name, mod in backends.items()}
        back = {name: mod.col2im(cols[name], x.shape, 3, 3, stride, 1) for name, mod in backends.items()}
        if len(backends) == 2:
            assert np.array_equal(cols["python"], cols["cython"]), "im2col backends disagree"
            assert np.array_equal(back["python"], back["cython"]), "col2im backends disagree"
        rows = {"im2col": {}, "col2im": {}, "conv fwd+bwd": {}}
        w = Tensor(rng.standard_normal((c, c, 3, 3)).astype(dtype), requires_grad=True)
        xt = Tensor(x, requires_grad=True)
        for name, mod in backends.items():
            rows["im2col"][name] = min(timeit.repeat(lambda: mod.im2col(x, 3, 3, stride, 1), number=1, repeat=repeat))
            c_ = cols[name]
            rows["col2im"][name] = min(timeit.repeat(lambda: mod.col2im(c_, x.shape, 3, 3, stride, 1),
                                                     number=1, repeat=repeat))
            kernels.im2col, kernels.col2im = mod.im2col, mod.col2im
            rows["conv fwd+bwd"][name] = min(timeit.repeat(lambda: _conv_step(xt, w, stride), number=1,
                                                           repeat=repeat))
        label = f"{c}x{size}x{size}/s{stride}"
        for op, times in rows.items():
            line = f"{label:<16}{op:<14}" + "".join(f"{times[n] * 1e3:>10.2f}ms" for n in backends)
            if len(backends) == 2:
                line += f"   x{times['python'] / times['cython']:.2f}"
            print(line)
    if _compiled is None:
        print("compiled extension not built; only the numpy fallback was timed")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--precision", choices=["f32", "f64"], default="f32")
    args = parser.parse_args()
    bench(args.repeat, args.batch, np.float32 if args.precision == "f32" else np.float64)


if __name__ == "__main__":
    main()
