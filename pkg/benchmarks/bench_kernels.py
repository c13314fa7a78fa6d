"""Time the numba and numpy kernel backends on Model B-sized tensors.

    python3 benchmarks/bench_kernels.py [--batch 128] [--repeat 5]

Prints one row per kernel with the best-of-N wall time for each backend,
the speedup, and whether both backends returned bit-identical arrays.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from lsakit import _kernels as K
from lsakit.model import loss, model_b
from lsakit.tensor import Tensor, backward


def best_of(fn, repeat: int) -> tuple[float, object]:
    out = fn()  # warm-up (and numba compilation)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def model_step(model, x, y):
    def run():
        xt = Tensor(x, requires_grad=True)
        logits, _ = model.forward(xt, capture=None)
        backward(loss(logits, y, model.loss_kind), model.parameters())
        return np.concatenate([p.grad.ravel() for p in model.parameters()] + [xt.grad.ravel()])
    return run


def cases(batch: int, rng):
    x1 = rng.random((batch, 16, 24, 24))
    cols = K.im2col(x1, 5, 5)
    x_pool = rng.standard_normal((batch, 32, 20, 20))
    _, idx = K.maxpool_forward(x_pool, 2, 2)
    g_pool = rng.standard_normal((batch, 32, 10, 10))
    model = model_b(0)
    x = rng.random((batch, 1, 28, 28))
    y = rng.integers(0, 10, batch)
    return [
        ("col2im 16x24x24 k5", lambda: K.col2im(cols, 24, 24)),
        ("maxpool fwd 32x20x20", lambda: K.maxpool_forward(x_pool, 2, 2)[0]),
        ("maxpool bwd 32x20x20", lambda: K.maxpool_backward(g_pool, idx, 20, 20, 2, 2)),
        ("model B fwd+bwd", model_step(model, x, y)),
    ]


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    previous = K.get_backend()
    print(f"batch={args.batch} repeat={args.repeat}")
    print(f"{'kernel':<24}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  identical")
    try:
        K.set_backend("numpy")
        work = cases(args.batch, rng)
        for name, fn in work:
            K.set_backend("numpy")
            t_np, out_np = best_of(fn, args.repeat)
            K.set_backend("numba")
            t_nb, out_nb = best_of(fn, args.repeat)
            same = np.array_equal(out_np, out_nb)
            print(f"{name:<24}{1e3 * t_np:>10.2f}{1e3 * t_nb:>10.2f}{t_np / t_nb:>8.2f}x  {same}")
    finally:
        K.set_backend(previous)


if __name__ == "__main__":
    main()
