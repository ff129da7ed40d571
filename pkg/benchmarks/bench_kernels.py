"""Compare the compiled and numpy kernel backends.

Times each hot kernel on shapes from the desk model, checks that both
backends agree bit for bit, and times one full desk training step.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np
from threadpoolctl import threadpool_limits

from scasnet import kernels
from scasnet.model import ModelConfig, build_model
from scasnet.train import cross_entropy_loss


def kernel_cases(dtype):
    rng = np.random.default_rng(0)
    cases = []
    # (name, N, C, H, W, k, stride, dilation) taken from the desk network
    for name, n, c, h, w, k, d in [
        ("stage1 conv 3x3", 4, 16, 64, 64, 3, 1),
        ("stage3 conv 3x3", 4, 64, 16, 16, 3, 1),
        ("context d=4", 4, 64, 8, 8, 3, 4),
    ]:
        xp = rng.standard_normal((n, c, h + 2 * d, w + 2 * d)).astype(dtype)
        cols_shape = (n, c * k * k, h * w)
        dcols = rng.standard_normal(cols_shape).astype(dtype)
        cases.append((f"im2col   {name}", lambda b, xp=xp, k=k, d=d, h=h, w=w: b.im2col(xp, k, k, 1, d, h, w)))
        cases.append((
            f"col2im   {name}",
            lambda b, dc=dcols, c=c, hp=xp.shape[2], wp=xp.shape[3], k=k, d=d, h=h, w=w:
                b.col2im(dc, c, hp, wp, k, k, 1, d, h, w),
        ))
    x = rng.standard_normal((4, 16, 64, 64)).astype(dtype)
    _, idx = kernels.numpy_backend.maxpool2x2_forward(x)
    g = rng.standard_normal((4, 16, 32, 32)).astype(dtype)
    cases.append(("pool fwd 4x16x64x64", lambda b: b.maxpool2x2_forward(x)))
    cases.append(("pool bwd 4x16x64x64", lambda b: b.maxpool2x2_backward(g, idx)))
    return cases


def same(a, b):
    if isinstance(a, tuple):
        return all(same(u, v) for u, v in zip(a, b))
    return a.dtype == b.dtype and np.array_equal(a, b)


def train_step(model, x, y):
    model.zero_grad()
    out = cross_entropy_loss(model.forward(x, train=True, seed=0), y)
    model.backward(out.grad)


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    compiled, fallback = kernels.compiled_backend, kernels.numpy_backend
    if compiled is None:
        print("compiled backend not built; only the numpy fallback is available")
        return
    with threadpool_limits(1):
        for dtype in (np.float32, np.float64):
            print(f"\n{np.dtype(dtype).name}")
            print(f"{'kernel':<32} {'numpy ms':>9} {'cython ms':>10} {'speedup':>8}  identical")
            for name, fn in kernel_cases(dtype):
                t_np = best(lambda: fn(fallback), args.repeat)
                t_cy = best(lambda: fn(compiled), args.repeat)
                print(f"{name:<32} {t_np * 1e3:9.3f} {t_cy * 1e3:10.3f} {t_np / t_cy:8.2f}  {same(fn(fallback), fn(compiled))}")

        rng = np.random.default_rng(0)
        model = build_model(ModelConfig(dtype="float32"), 0)
        x = rng.standard_normal((4, 3, 64, 64)).astype(np.float32)
        y = rng.integers(0, 5, (4, 64, 64))
        print(f"\n{'desk train step (batch 4, 64x64)':<32} {'numpy ms':>9} {'cython ms':>10} {'speedup':>8}")
        times = {}
        for backend in (fallback, compiled):
            with kernels.use_backend(backend):
                times[backend.name] = best(lambda: train_step(model, x, y), max(3, args.repeat // 4))
        t_np, t_cy = times["numpy"], times["cython"]
        print(f"{'':<32} {t_np * 1e3:9.1f} {t_cy * 1e3:10.1f} {t_np / t_cy:8.2f}")


if __name__ == "__main__":
    main()
