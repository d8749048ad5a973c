"""Hot numeric kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``MIXLAB_NO_NUMBA`` is unset or
``0``. Both paths perform the same floating-point operations in the same order
and return bit-identical results; tests run them against each other.

``MIXLAB_THREADS`` caps numba's thread pool. Kernels only parallelise over
independent outputs, so the value never changes results.
"""
from __future__ import annotations

import math
import os

import numpy as np

_DISABLED = os.environ.get("MIXLAB_NO_NUMBA", "0") not in ("", "0")

try:
    if _DISABLED:
        raise ImportError("numba disabled by MIXLAB_NO_NUMBA")
    import numba
    from numba import njit, prange

    if "NUMBA_THREADING_LAYER" not in os.environ:
        # skip the TBB probe, which warns on old TBB installs
        try:
            from numba.np.ufunc import omppool  # noqa: F401
            numba.config.THREADING_LAYER = "omp"
        except ImportError:
            numba.config.THREADING_LAYER = "workqueue"

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def thread_cap() -> int | None:
    raw = os.environ.get("MIXLAB_THREADS")
    if not raw:
        return None
    n = int(raw)
    if n < 1:
        raise ValueError(f"MIXLAB_THREADS must be >= 1, got {raw!r}")
    return n


if HAVE_NUMBA:
    _cap = thread_cap()
    if _cap is not None:
        numba.set_num_threads(min(_cap, numba.config.NUMBA_NUM_THREADS))


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# two nearest neighbours, brute force


def _two_nn_numpy(x: np.ndarray, chunk: int = 256):
    n, d = x.shape
    r1 = np.empty(n)
    r2 = np.empty(n)
    j1 = np.empty(n, dtype=np.int64)
    j2 = np.empty(n, dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        acc = np.zeros((stop - start, n))
        # sequential accumulation over coordinates, same order as the compiled loop
        for k in range(d):
            t = x[start:stop, k, None] - x[None, :, k]
            acc += t * t
        rows = np.arange(stop - start)
        acc[rows, rows + start] = np.inf
        a1 = np.argmin(acc, axis=1)
        b1 = acc[rows, a1]
        acc[rows, a1] = np.inf
        a2 = np.argmin(acc, axis=1)
        b2 = acc[rows, a2]
        r1[start:stop] = np.sqrt(b1)
        r2[start:stop] = np.sqrt(b2)
        j1[start:stop] = a1
        j2[start:stop] = a2
    return r1, r2, j1, j2


if HAVE_NUMBA:

    @njit(parallel=True, cache=True)
    def _two_nn_numba(x):
        n, d = x.shape
        r1 = np.empty(n)
        r2 = np.empty(n)
        j1 = np.empty(n, dtype=np.int64)
        j2 = np.empty(n, dtype=np.int64)
        for i in prange(n):
            b1 = np.inf
            b2 = np.inf
            k1 = -1
            k2 = -1
            for j in range(n):
                if j == i:
                    continue
                acc = 0.0
                for k in range(d):
                    t = x[i, k] - x[j, k]
                    acc += t * t
                if acc < b1:
                    b2 = b1
                    k2 = k1
                    b1 = acc
                    k1 = j
                elif acc < b2:
                    b2 = acc
                    k2 = j
            r1[i] = math.sqrt(b1)
            r2[i] = math.sqrt(b2)
            j1[i] = k1
            j2[i] = k2
        return r1, r2, j1, j2


def two_nn(x: np.ndarray, use_numba: bool | None = None):
    """Exact first/second neighbour distances and indices for every row of ``x``.

    Ties keep the lowest neighbour index. Distances are the square root of the
    coordinate-ordered sum of squared differences.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    if use_numba is None:
        use_numba = HAVE_NUMBA
    if use_numba and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but unavailable")
    if use_numba:
        return _two_nn_numba(x)
    return _two_nn_numpy(x)


def squared_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Coordinate-ordered squared distance, matching the two_nn kernels."""
    acc = 0.0
    for k in range(a.shape[0]):
        t = float(a[k]) - float(b[k])
        acc += t * t
    return acc


# --------------------------------------------------------------------------
# square window sums over summed-area tables


def summed_area(maps: np.ndarray) -> np.ndarray:
    """Zero-bordered summed-area tables, shape (N, H+1, W+1)."""
    maps = np.asarray(maps, dtype=np.float64)
    n, h, w = maps.shape
    sat = np.zeros((n, h + 1, w + 1))
    sat[:, 1:, 1:] = maps.cumsum(axis=1).cumsum(axis=2)
    return sat


def _window_sums_numpy(sat: np.ndarray, s: int) -> np.ndarray:
    return ((sat[:, s:, s:] - sat[:, :-s, s:]) - sat[:, s:, :-s]) + sat[:, :-s, :-s]


if HAVE_NUMBA:

    @njit(parallel=True, cache=True)
    def _window_sums_numba(sat, s):
        n, hp, wp = sat.shape
        th = hp - s
        tw = wp - s
        out = np.empty((n, th, tw))
        for m in prange(n):
            for t in range(th):
                for l in range(tw):
                    out[m, t, l] = ((sat[m, t + s, l + s] - sat[m, t, l + s]) - sat[m, t + s, l]) + sat[m, t, l]
        return out


def window_sums(sat: np.ndarray, s: int, use_numba: bool | None = None) -> np.ndarray:
    """Sum of every s-by-s window, indexed by its (top, left) corner."""
    sat = np.ascontiguousarray(sat, dtype=np.float64)
    if use_numba is None:
        use_numba = HAVE_NUMBA
    if use_numba and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but unavailable")
    if use_numba:
        return _window_sums_numba(sat, int(s))
    return _window_sums_numpy(sat, int(s))
