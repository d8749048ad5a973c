"""Time the numba and pure-numpy kernel paths and confirm they agree bit for bit.

    python benchmarks/bench_kernels.py [--n 4096] [--dim 8] [--repeat 3]
"""
import argparse
import time

import numpy as np

from mixlab import _kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=4096, help="points for the neighbour search")
    ap.add_argument("--dim", type=int, default=8)
    ap.add_argument("--maps", type=int, default=2000, help="saliency maps for the window sweep")
    ap.add_argument("--size", type=int, default=32, help="map side length")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    x = rng.random((args.n, args.dim))
    sat = _kernels.summed_area(rng.random((args.maps, args.size, args.size)))
    side = args.size // 2
    cases = {
        f"two_nn N={args.n} D={args.dim}": lambda nb: _kernels.two_nn(x, use_numba=nb),
        f"window_sums {args.maps}x{args.size}^2 s={side}": lambda nb: _kernels.window_sums(sat, side, use_numba=nb),
    }
    print(f"backend available: {_kernels.backend()}, thread cap: {_kernels.thread_cap()}")
    for name, fn in cases.items():
        t_np, ref = best_of(lambda: fn(False), args.repeat)
        row = f"{name:<40} numpy {t_np * 1e3:9.1f} ms"
        if _kernels.HAVE_NUMBA:
            fn(True)  # compile
            t_nb, out = best_of(lambda: fn(True), args.repeat)
            ref_t = ref if isinstance(ref, tuple) else (ref,)
            out_t = out if isinstance(out, tuple) else (out,)
            same = all(np.array_equal(a, b) for a, b in zip(ref_t, out_t))
            row += f"   numba {t_nb * 1e3:9.1f} ms   speedup {t_np / t_nb:5.1f}x   identical={same}"
        print(row)


if __name__ == "__main__":
    main()
