"""Occlusion robustness: CutOcclusion curves, saliency-guided iOcclusion, and
patch-shuffling sensitivity with DI-index analysis.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .data_io import Dataset
from .errors import ShapeError
from .metrics import ClassIncrease, class_increase, di_index, worst_case_di
from .model import accuracy, evaluate, model_logits, saliency as builtin_saliency, wrong_counts
from .msda import (Box, MixCoeffDist, box_side, cut_box, fmix_mask, grid_shuffle, sample_mix_coeff)
from .rng import substream

KINDS = ("uniform_box", "other_image_box", "fourier_mask", "grid_tiles", "saliency_box")
SCORE_FLOOR = 1e-6


@dataclass(frozen=True)
class OccluderStrategy:
    """How occluders are drawn.

    ``size`` (a mixing-coefficient distribution) overrides the per-call fraction
    with a per-image random draw. ``aux`` supplies patch content for
    ``other_image_box`` and, when given, for ``fourier_mask``.
    """

    kind: str = "uniform_box"
    fill: float = 0.0
    aux: Dataset | None = field(default=None, compare=False)
    decay: float = 3.0
    k: int = 4
    size: MixCoeffDist | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown occluder kind {self.kind!r}")
        if self.kind == "other_image_box" and self.aux is None:
            raise ValueError("other_image_box needs an auxiliary dataset")

    def describe(self) -> dict:
        d = {"kind": self.kind, "fill": self.fill, "decay": self.decay, "k": self.k,
             "size": None if self.size is None else str(self.size)}
        if self.aux is not None:
            d["aux"] = self.aux.name
        return d

    @property
    def approximate(self) -> bool:
        return self.kind != "saliency_box"


def _fill_like(x, fill):
    return np.full_like(x, fill)


def occlude(x: np.ndarray, strategy: OccluderStrategy, fraction: float, rng: np.random.Generator,
            saliency_map: np.ndarray | None = None):
    """Occlude one (C, H, W) image; return (image, fraction of pixels replaced)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"occlusion fraction must lie in (0, 1], got {fraction}")
    c, h, w = x.shape
    kind = strategy.kind
    if kind == "saliency_box":
        if saliency_map is None:
            raise ValueError("saliency_box occlusion needs a saliency map")
        box, _ = saliency_box_placement(saliency_map, fraction)
        return _apply_box(x, box, _fill_like(x, strategy.fill)), box.area / (h * w)
    if kind == "uniform_box":
        box = cut_box(h, w, fraction, True, rng)
        return _apply_box(x, box, _fill_like(x, strategy.fill)), box.area / (h * w)
    if kind == "other_image_box":
        src = _aux_image(strategy.aux, x, rng)
        box = cut_box(h, w, fraction, True, rng)
        return _apply_box(x, box, src), box.area / (h * w)
    if kind == "fourier_mask":
        src = _fill_like(x, strategy.fill) if strategy.aux is None else _aux_image(strategy.aux, x, rng)
        mask = fmix_mask(h, w, fraction, strategy.decay, rng)
        return np.where(mask.bits[None], src, x), mask.set_count / (h * w)
    # grid_tiles
    k = strategy.k
    if h % k or w % k:
        raise ShapeError(f"{h}x{w} image is not divisible into a {k}x{k} grid")
    n_tiles = min(k * k, math.ceil(fraction * k * k - 1e-12))
    chosen = rng.choice(k * k, size=n_tiles, replace=False)
    th, tw = h // k, w // k
    out = x.copy()
    for t in chosen:
        r, q = divmod(int(t), k)
        out[:, r * th:(r + 1) * th, q * tw:(q + 1) * tw] = strategy.fill
    return out, n_tiles * th * tw / (h * w)


def _aux_image(aux: Dataset, x: np.ndarray, rng) -> np.ndarray:
    if aux.image_shape != x.shape:
        raise ShapeError(f"auxiliary images {aux.image_shape} vs occluded image {x.shape}")
    return aux.images[int(rng.integers(0, len(aux)))]


def _apply_box(x, box: Box, src) -> np.ndarray:
    out = x.copy()
    rows, cols = box.slices()
    out[:, rows, cols] = src[:, rows, cols]
    return out


# --------------------------------------------------------------------------
# saliency-guided placement


def _exact_window_sum(m: np.ndarray, t: int, l: int, s: int) -> float:
    return math.fsum(m[t:t + s, l:l + s].ravel().tolist())


def place_boxes(maps: np.ndarray, side: int):
    """Top-left corners of the s-by-s windows with maximal total saliency.

    Window sums come from a summed-area-table sweep; candidates within rounding
    distance of the best are re-scored with exactly rounded sums, and remaining
    ties go to the smallest (top, left). All-zero maps get a centred box and are
    flagged flat.
    """
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim == 2:
        maps = maps[None]
    if np.any(maps < 0):
        raise ValueError("saliency maps must be nonnegative")
    n, h, w = maps.shape
    sums = _kernels.window_sums(_kernels.summed_area(maps), side)
    tops = np.empty(n, dtype=np.int64)
    lefts = np.empty(n, dtype=np.int64)
    flat = np.zeros(n, dtype=bool)
    for i in range(n):
        total = float(maps[i].sum())
        if total <= 0.0:
            flat[i] = True
            tops[i], lefts[i] = (h - side) // 2, (w - side) // 2
            continue
        best = sums[i].max()
        tol = 1e-10 * total + 1e-300
        cand = np.argwhere(sums[i] >= best - tol)
        if len(cand) == 1:
            tops[i], lefts[i] = cand[0]
            continue
        exact = [(_exact_window_sum(maps[i], int(t), int(l), side), -int(t), -int(l)) for t, l in cand]
        _, nt, nl = max(exact)
        tops[i], lefts[i] = -nt, -nl
    return tops, lefts, flat


def saliency_box_placement(saliency_map: np.ndarray, area_fraction: float):
    """Square box of the given area fraction covering the most saliency; returns (box, flat)."""
    if not 0.0 < area_fraction <= 1.0:
        raise ValueError(f"area fraction must lie in (0, 1], got {area_fraction}")
    h, w = saliency_map.shape
    s = box_side(h, w, area_fraction)
    t, l, flat = place_boxes(saliency_map, s)
    return Box(int(t[0]), int(l[0]), s, s), bool(flat[0])


def brute_force_placement(saliency_map: np.ndarray, side: int) -> tuple[int, int]:
    """Reference placement scoring every window with an exactly rounded sum."""
    h, w = saliency_map.shape
    best, arg = -1.0, (0, 0)
    for t in range(h - side + 1):
        for l in range(w - side + 1):
            v = _exact_window_sum(saliency_map, t, l, side)
            if v > best:
                best, arg = v, (t, l)
    return arg


# --------------------------------------------------------------------------
# curves


@dataclass
class OcclusionCurve:
    fractions: list[float]
    accuracy: list[float]
    n_runs: int
    strategy: dict
    per_run: list[list[float]] = field(default_factory=list)
    lam_eff: list[float] = field(default_factory=list)
    clean_accuracy: float | None = None
    train_accuracy: list[float] | None = None
    clean_train_accuracy: float | None = None
    score: list[float] | None = None
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        f = np.asarray(self.fractions)
        if f.size and (np.any(np.diff(f) <= 0) or f[0] <= 0 or f[-1] > 1):
            raise ValueError("fractions must be strictly increasing within (0, 1]")

    def at(self, fraction: float, key: str = "accuracy") -> float:
        i = int(np.argmin(np.abs(np.asarray(self.fractions) - fraction)))
        return getattr(self, key)[i]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["fraction", "acc_test_occ", "acc_train_occ", "score", "run"])
        for r in range(self.n_runs):
            for j, f in enumerate(self.fractions):
                tr = "" if self.train_accuracy is None else repr(self.train_accuracy[j])
                sc = "" if self.score is None else repr(self.score[j])
                acc = self.per_run[r][j] if self.per_run else self.accuracy[j]
                wr.writerow([repr(f), repr(acc), tr, sc, r])
        return buf.getvalue()


def occlude_dataset(images: np.ndarray, strategy: OccluderStrategy, fraction: float, seed: int,
                    maps: np.ndarray | None = None):
    """Occlude every image with its own substream; return (images, lam_eff)."""
    if strategy.kind == "saliency_box" and strategy.size is None:
        return _saliency_occlude_all(images, maps, fraction, strategy.fill)
    out = np.empty_like(images)
    lam = np.empty(len(images))
    for i in range(len(images)):
        rng = substream(seed, i)
        f = fraction
        if strategy.size is not None:
            f = min(max(sample_mix_coeff(strategy.size, rng), 1.0 / images[i][0].size), 1.0)
        out[i], lam[i] = occlude(images[i], strategy, f, rng, None if maps is None else maps[i])
    return out, lam


def _saliency_occlude_all(images, maps, fraction: float, fill: float):
    # vectorised equivalent of occlude(..., "saliency_box") applied per image
    if maps is None:
        raise ValueError("saliency_box occlusion needs saliency maps")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"occlusion fraction must lie in (0, 1], got {fraction}")
    n, _, h, w = images.shape
    s = box_side(h, w, fraction)
    tops, lefts, _ = place_boxes(maps, s)
    rows = np.arange(h)[None, :]
    cols = np.arange(w)[None, :]
    in_r = (rows >= tops[:, None]) & (rows < tops[:, None] + s)
    in_c = (cols >= lefts[:, None]) & (cols < lefts[:, None] + s)
    mask = in_r[:, :, None] & in_c[:, None, :]
    return np.where(mask[:, None], fill, images), np.full(n, s * s / (h * w))


def _saliency_maps(model, images, source) -> np.ndarray:
    if source is None or (isinstance(source, str) and source == "builtin"):
        return builtin_saliency(model, images).maps
    maps = np.asarray(getattr(source, "maps", source), dtype=np.float64)
    if maps.shape != (len(images),) + images.shape[2:]:
        raise ShapeError(f"saliency stack {maps.shape} does not match images {images.shape}")
    return maps


def cut_occlusion(model, test: Dataset, fractions, strategy: OccluderStrategy | None = None,
                  runs: int = 1, seed: int = 0, saliency=None) -> OcclusionCurve:
    """Test accuracy under occlusion of each area fraction, averaged over runs."""
    strategy = strategy or OccluderStrategy()
    fractions = [float(f) for f in fractions]
    maps = _saliency_maps(model, test.images, saliency) if strategy.kind == "saliency_box" else None
    per_run, lam_runs = [], []
    for r in range(runs):
        accs, lams = [], []
        for j, f in enumerate(fractions):
            occ, lam = occlude_dataset(test.images, strategy, f, _seed(seed, "cutocc", r, j), maps)
            accs.append(accuracy(model, occ, test.labels))
            lams.append(float(lam.mean()))
        per_run.append(accs)
        lam_runs.append(lams)
    return OcclusionCurve(fractions, np.mean(per_run, axis=0).tolist(), runs, strategy.describe(),
                          per_run=per_run, lam_eff=np.mean(lam_runs, axis=0).tolist(),
                          clean_accuracy=accuracy(model, test.images, test.labels),
                          flags=["approximate placement"] if strategy.approximate else [])


def _seed(seed: int, *keys) -> int:
    return int(substream(seed, *keys).integers(0, 2**63 - 1))


def retention_score(acc_test_occ, acc_test, acc_train_occ, acc_train) -> float:
    """100 * (test retention) * (train retention), denominators floored at 1e-6."""
    return 100.0 * (acc_test_occ / max(acc_test, SCORE_FLOOR)) * (acc_train_occ / max(acc_train, SCORE_FLOOR))


def i_occlusion(model, train: Dataset, test: Dataset, fractions, saliency_train=None,
                saliency_test=None, seed: int = 0, strategy: OccluderStrategy | None = None) -> OcclusionCurve:
    """iOcclusion curve (operationalised).

    For each fraction the most salient square of that area is occluded on both
    train and test images and the score is 100 times the product of the test
    and train accuracy retention ratios. Passing a random ``strategy`` gives
    the cheaper random-placement approximation.
    """
    strategy = strategy or OccluderStrategy("saliency_box")
    fractions = [float(f) for f in fractions]
    flags = ["iOcclusion (operationalized)"]
    maps = {}
    if strategy.kind == "saliency_box":
        for name, data, src in (("train", train, saliency_train), ("test", test, saliency_test)):
            maps[name] = _saliency_maps(model, data.images, src)
            flat = float(np.mean(maps[name].reshape(len(data), -1).max(axis=1) <= 0))
            if flat > 0.5:
                msg = f"{100 * flat:.1f}% of {name} saliency maps are flat"
                warnings.warn(msg)
                flags.append(msg)
    else:
        flags.append("approximate placement")
    a_train = accuracy(model, train.images, train.labels)
    a_test = accuracy(model, test.images, test.labels)
    tr_acc, te_acc, score, lam_eff = [], [], [], []
    for j, f in enumerate(fractions):
        occ_tr, lam_tr = occlude_dataset(train.images, strategy, f, _seed(seed, "iocc-train", j), maps.get("train"))
        occ_te, _ = occlude_dataset(test.images, strategy, f, _seed(seed, "iocc-test", j), maps.get("test"))
        at = accuracy(model, occ_tr, train.labels)
        ae = accuracy(model, occ_te, test.labels)
        tr_acc.append(at)
        te_acc.append(ae)
        score.append(retention_score(ae, a_test, at, a_train))
        lam_eff.append(float(lam_tr.mean()))
    return OcclusionCurve(fractions, te_acc, 1, strategy.describe(), per_run=[te_acc], lam_eff=lam_eff,
                          clean_accuracy=a_test, train_accuracy=tr_acc, clean_train_accuracy=a_train,
                          score=score, flags=flags)


# --------------------------------------------------------------------------
# wrong-prediction bias


def distortion_increase(model, test: Dataset, distorted_images: np.ndarray) -> ClassIncrease:
    clean = evaluate(model, test)
    scores = model_logits(model, distorted_images)
    w_dist = wrong_counts(np.argmax(scores, axis=1), test.labels, len(clean.wrong_counts))
    return class_increase(clean.wrong_counts, w_dist, len(test))


def occlusion_di(model, test: Dataset, strategy: OccluderStrategy, fraction: float = 0.5,
                 runs: int = 1, seed: int = 0) -> dict:
    """DI index and worst-case DI for an occluder, one ClassIncrease per run."""
    incs = []
    for r in range(runs):
        occ, _ = occlude_dataset(test.images, strategy, fraction, _seed(seed, "occdi", r))
        incs.append(distortion_increase(model, test, occ))
    per_run = [di_index(i).value for i in incs]
    return {"strategy": strategy.describe(), "fraction": fraction, "runs": runs,
            "di_per_run": per_run, "di_mean": float(np.mean(per_run)),
            "worst_case_di": worst_case_di(incs).value, "increases": incs}


def shuffle_sensitivity(model, test: Dataset, ks, runs: int = 1, seed: int = 0) -> dict:
    """Accuracy drop and DI index under k-by-k tile shuffling, per grid size."""
    clean_acc = accuracy(model, test.images, test.labels)
    out = {}
    for k in ks:
        incs, accs = [], []
        for r in range(runs):
            base = _seed(seed, "shuffle", int(k), r)
            shuffled = np.stack([grid_shuffle(x, int(k), substream(base, i)) for i, x in enumerate(test.images)])
            accs.append(accuracy(model, shuffled, test.labels))
            incs.append(distortion_increase(model, test, shuffled))
        per_run = [di_index(i).value for i in incs]
        out[int(k)] = {"clean_accuracy": clean_acc, "accuracy": float(np.mean(accs)),
                       "accuracy_drop": float(clean_acc - np.mean(accs)), "di_per_run": per_run,
                       "di_mean": float(np.mean(per_run)), "worst_case_di": worst_case_di(incs).value,
                       "increases": incs}
    return out
