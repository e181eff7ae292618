"""Time the numba and numpy convolution kernels on the desk model's layer shapes.

    python benchmarks/bench_kernels.py [--repeats 20]
"""
import argparse
import time

import numpy as np

from locvae import kernels

# (batch, c_in, c_out, extent) for the layers of the default 16^3 model
SHAPES = [(8, 1, 8, 16), (8, 8, 8, 8), (8, 8, 8, 4), (8, 8, 8, 2)]


def best_of(fn, repeats):
    fn()  # warm-up, includes JIT compilation
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def run(repeats):
    if not kernels.NUMBA_AVAILABLE:
        print("numba is not installed; only the numpy backend can be timed")
    rng = np.random.default_rng(0)
    print(f"{'shape':>18} {'kernel':>10} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for n, ci, co, s in SHAPES:
        x = rng.standard_normal((n, ci, s, s, s))
        w = rng.standard_normal((co, ci, 3, 3, 3))
        gy = rng.standard_normal((n, co, s, s, s))
        for name, slot, args, out_shape in [
            ("forward", 0, (x, w), (n, co, s, s, s)),
            ("input-grad", 1, (gy, w), (n, ci, s, s, s)),
        ]:
            results, times = {}, {}
            for backend in ("numpy", "numba") if kernels.NUMBA_AVAILABLE else ("numpy",):
                fn = kernels.BACKENDS[backend][slot]

                def call():
                    out = np.zeros(out_shape)
                    fn(*args, out, 1, 1)
                    return out

                times[backend] = best_of(call, repeats)
                results[backend] = call()
            label = f"{n}x{ci}->{co} @{s}^3"
            np_ms = times["numpy"] * 1e3
            if "numba" in times:
                nb_ms = times["numba"] * 1e3
                diff = np.abs(results["numpy"] - results["numba"]).max()
                print(f"{label:>18} {name:>10} {np_ms:10.3f} {nb_ms:10.3f} {np_ms / nb_ms:8.2f} {diff:11.2e}")
            else:
                print(f"{label:>18} {name:>10} {np_ms:10.3f} {'-':>10} {'-':>8} {'-':>11}")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=20)
    run(p.parse_args().repeats)
