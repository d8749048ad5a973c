"""TWO-NN intrinsic dimension estimation.

Under locally uniform density the ratio mu = r2/r1 of second- to first-neighbour
distances follows a Pareto law with exponent equal to the intrinsic dimension.
Two estimators of that exponent are provided: the closed-form maximum
likelihood estimate and the origin-constrained linear fit of the empirical CDF.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .data_io import PointCloud, TensorFile
from .errors import DegenerateSampleError, DuplicatePointError
from .rng import substream

MIN_REPRESENTATION_ROWS = 100


@dataclass(frozen=True)
class TwoNNSample:
    r1: np.ndarray
    r2: np.ndarray

    @property
    def mu(self) -> np.ndarray:
        return self.r2 / self.r1


@dataclass
class IdEstimate:
    d_hat: float
    n_used: int
    method: str
    ci: tuple[float, float] | None = None
    dropped_ties: int = 0
    dropped_duplicates: int = 0
    warnings: list[str] | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["ci"] = list(self.ci) if self.ci is not None else None
        d["warnings"] = self.warnings or []
        return json.dumps(d, sort_keys=True)


KDTREE_MAX_DIM = 16


def nn_two(points, method: str = "auto") -> TwoNNSample:
    """First and second neighbour distances of every point.

    ``method="brute"`` scans all pairs with the compiled kernel; ``"kdtree"``
    finds neighbour indices with a k-d tree and evaluates their distances with
    the same arithmetic, so both give identical results. ``"auto"`` uses the
    tree up to 16 ambient dimensions, where it is faster.
    """
    x = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError(f"need an (N >= 3, D) matrix, got shape {x.shape}")
    if method == "auto":
        method = "kdtree" if x.shape[1] <= KDTREE_MAX_DIM else "brute"
    if method == "brute":
        r1, r2, j1, _ = _kernels.two_nn(x)
    elif method == "kdtree":
        r1, r2, j1 = _two_nn_kdtree(x)
    else:
        raise ValueError(f"unknown neighbour search {method!r}")
    zero = np.flatnonzero(r1 == 0)
    if zero.size:
        i = int(zero[0])
        raise DuplicatePointError(*sorted((i, int(j1[i]))))
    return TwoNNSample(r1, r2)


def _two_nn_kdtree(x: np.ndarray):
    x = np.ascontiguousarray(x, dtype=np.float64)
    n, d = x.shape
    _, idx = cKDTree(x).query(x, k=min(4, n))
    # recompute candidate distances in the brute-force kernel's coordinate order
    acc = np.zeros(idx.shape)
    for k in range(d):
        t = x[:, k, None] - x[idx, k]
        acc += t * t
    acc[idx == np.arange(n)[:, None]] = np.inf
    acc[idx >= n] = np.inf
    # nearest first, lower index on ties
    order = _order_by_distance_then_index(acc, idx)
    rows = np.arange(n)[:, None]
    best = acc[rows, order[:, :2]]
    return np.sqrt(best[:, 0]), np.sqrt(best[:, 1]), idx[np.arange(n), order[:, 0]]


def _order_by_distance_then_index(acc: np.ndarray, idx: np.ndarray) -> np.ndarray:
    by_index = np.argsort(idx, axis=1, kind="stable")
    acc_s = np.take_along_axis(acc, by_index, axis=1)
    return np.take_along_axis(by_index, np.argsort(acc_s, axis=1, kind="stable"), axis=1)


def _usable_log_mu(sample: TwoNNSample) -> tuple[np.ndarray, int]:
    mu = sample.mu
    keep = mu > 1.0
    if not keep.any():
        raise DegenerateSampleError("every neighbour ratio equals 1")
    return np.log(mu[keep]), int((~keep).sum())


def twonn_mle(sample: TwoNNSample) -> IdEstimate:
    """Maximum-likelihood TWO-NN: d = N / sum(log mu) over points with mu > 1."""
    log_mu, dropped = _usable_log_mu(sample)
    d_hat = log_mu.size / float(np.sum(log_mu))
    return IdEstimate(d_hat, int(log_mu.size), "mle", dropped_ties=dropped)


def twonn_fit(sample: TwoNNSample, discard_fraction: float = 0.1) -> IdEstimate:
    """Linear-fit TWO-NN.

    Regresses -log(1 - F(mu)) on log(mu) through the origin, with the empirical
    CDF F = i/N over the sorted ratios, after discarding the largest
    ``discard_fraction`` of them.
    """
    if not 0.0 <= discard_fraction < 0.5:
        raise ValueError(f"discard_fraction must lie in [0, 0.5), got {discard_fraction}")
    log_mu, dropped = _usable_log_mu(sample)
    log_mu = np.sort(log_mu)
    n = log_mu.size
    n_keep = int(n * (1.0 - discard_fraction))
    # F = N/N makes -log(1-F) infinite, so the top order statistic is always excluded
    n_keep = min(n_keep, n - 1)
    if n_keep < 10:
        raise DegenerateSampleError(f"only {n_keep} ratios left after discarding")
    x = log_mu[:n_keep]
    y = -np.log1p(-np.arange(1, n_keep + 1) / n)
    d_hat = float(np.dot(x, y) / np.dot(x, x))
    return IdEstimate(d_hat, n_keep, "fit", dropped_ties=dropped)


def estimate(sample: TwoNNSample, method: str = "mle", discard_fraction: float = 0.1) -> IdEstimate:
    if method == "mle":
        return twonn_mle(sample)
    if method == "fit":
        return twonn_fit(sample, discard_fraction)
    raise ValueError(f"unknown estimator {method!r}")


def bootstrap_id(points, n_resamples: int, seed: int, method: str = "mle",
                 discard_fraction: float = 0.1, subsample: float = 0.9, rescale: bool = False) -> IdEstimate:
    """Point estimate on the full cloud plus a 5-95 percentile interval over subsamples.

    Subsamples of 90% without replacement vary far less than independent
    samples would, so the plain interval is narrow. ``rescale`` widens each
    re-estimate's deviation from the full estimate by sqrt(m / (n - m)), the
    finite-population correction for subsamples of size m out of n.
    """
    if n_resamples < 20:
        raise ValueError(f"need at least 20 resamples, got {n_resamples}")
    x = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    full = estimate(nn_two(x), method, discard_fraction)
    n = x.shape[0]
    m = max(3, int(round(subsample * n)))
    reps = np.empty(n_resamples)
    for b in range(n_resamples):
        idx = np.sort(substream(seed, "bootstrap", b).choice(n, size=m, replace=False))
        reps[b] = estimate(nn_two(x[idx]), method, discard_fraction).d_hat
    if rescale and m < n:
        reps = full.d_hat + np.sqrt(m / (n - m)) * (reps - full.d_hat)
    lo, hi = np.percentile(reps, [5.0, 95.0])
    full.ci = (float(min(lo, full.d_hat)), float(max(hi, full.d_hat)))
    return full


def dedupe_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Keep first occurrences of repeated rows; return (rows, dropped indices)."""
    _, first = np.unique(x, axis=0, return_index=True)
    keep = np.zeros(x.shape[0], dtype=bool)
    keep[first] = True
    return x[keep], np.flatnonzero(~keep)


def representation_id(rows, method: str = "mle", discard_fraction: float = 0.1,
                      n_resamples: int = 0, seed: int = 0, rescale: bool = False) -> IdEstimate:
    """Intrinsic dimension of a set of embedding or logit vectors (one per row)."""
    x = rows.data if isinstance(rows, TensorFile) else rows
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        x = x.reshape(x.shape[0], -1)
    notes = []
    if x.shape[0] < MIN_REPRESENTATION_ROWS:
        msg = f"N < {MIN_REPRESENTATION_ROWS}: estimate from {x.shape[0]} rows is unreliable"
        warnings.warn(msg)
        notes.append(msg)
    x, dropped = dedupe_rows(x)
    if dropped.size:
        msg = f"dropped {dropped.size} duplicate rows (first: {dropped[:5].tolist()})"
        warnings.warn(msg)
        notes.append(msg)
    if x.shape[0] < 3:
        raise DegenerateSampleError(f"only {x.shape[0]} distinct rows")
    if n_resamples:
        est = bootstrap_id(x, n_resamples, seed, method, discard_fraction, rescale=rescale)
    else:
        est = estimate(nn_two(x), method, discard_fraction)
    est.dropped_duplicates = int(dropped.size)
    est.warnings = notes
    return est
