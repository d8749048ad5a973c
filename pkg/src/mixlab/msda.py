"""Mixed-sample augmentation and distortion kernels.

All kernels act on single (C, H, W) float images. Masking kernels report the
effective mixing weight computed from the pixels actually taken from the first
image, never the requested one.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .data_io import Dataset
from .errors import ShapeError
from .rng import child_seed, substream


@dataclass(frozen=True)
class MixCoeffDist:
    """Distribution of the mixing coefficient: ``beta``, ``uniform`` or ``fixed``."""

    kind: str
    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        if self.kind == "beta":
            if self.a <= 0 or self.b <= 0:
                raise ValueError("beta parameters must be positive")
        elif self.kind == "uniform":
            if not 0.0 <= self.a <= self.b <= 1.0:
                raise ValueError("uniform bounds need 0 <= lo <= hi <= 1")
        elif self.kind == "fixed":
            if not 0.0 <= self.a <= 1.0:
                raise ValueError("fixed coefficient must lie in [0, 1]")
        else:
            raise ValueError(f"unknown distribution kind {self.kind!r}")

    @classmethod
    def beta(cls, a: float, b: float) -> MixCoeffDist:
        return cls("beta", a, b)

    @classmethod
    def uniform(cls, lo: float, hi: float) -> MixCoeffDist:
        return cls("uniform", lo, hi)

    @classmethod
    def fixed(cls, lam: float) -> MixCoeffDist:
        return cls("fixed", lam, lam)

    @classmethod
    def parse(cls, text: str) -> MixCoeffDist:
        """Parse ``"beta(2,1)"``, ``"uniform(0.1,1)"`` or ``"fixed(0.5)"``."""
        name, _, rest = text.strip().partition("(")
        args = [float(v) for v in rest.rstrip(") ").split(",") if v.strip()]
        if name == "fixed" and len(args) == 1:
            return cls.fixed(args[0])
        if name in ("beta", "uniform") and len(args) == 2:
            return cls(name, *args)
        raise ValueError(f"cannot parse mixing distribution {text!r}")

    def __str__(self):
        if self.kind == "fixed":
            return f"fixed({self.a:g})"
        return f"{self.kind}({self.a:g},{self.b:g})"


def sample_mix_coeff(dist: MixCoeffDist, rng: np.random.Generator) -> float:
    if dist.kind == "fixed":
        return float(dist.a)
    if dist.kind == "uniform":
        return float(rng.uniform(dist.a, dist.b))
    return float(np.clip(rng.beta(dist.a, dist.b), 0.0, 1.0))


def _check_pair(x1: np.ndarray, x2: np.ndarray) -> None:
    if x1.shape != x2.shape:
        raise ShapeError(f"image shapes differ: {x1.shape} vs {x2.shape}")


def two_hot(y1: int, y2: int, w1: float, classes: int) -> np.ndarray:
    """Soft label with weight ``w1`` on ``y1`` and ``1 - w1`` on ``y2``."""
    t = np.zeros(classes)
    t[y1] += w1
    t[y2] += 1.0 - w1
    return t


def _blend(x1: np.ndarray, x2: np.ndarray, lam: float) -> np.ndarray:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixing coefficient must lie in [0, 1], got {lam}")
    return lam * x1 + (1.0 - lam) * x2


def mixup(x1, x2, y1: int, y2: int, lam: float, classes: int):
    """Pixel-wise interpolation with the matching soft label."""
    _check_pair(x1, x2)
    return _blend(x1, x2, lam), two_hot(y1, y2, lam, classes)


def rmixup(x1, x2, y1: int, lam: float):
    """Interpolate images but keep only the first image's label."""
    _check_pair(x1, x2)
    return _blend(x1, x2, lam), int(y1)


# --------------------------------------------------------------------------
# Fourier masks


@dataclass(frozen=True)
class Mask:
    bits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=bool))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def set_count(self) -> int:
        return int(self.bits.sum())

    def __invert__(self) -> Mask:
        return Mask(~self.bits)


def radial_frequency(h: int, w: int) -> np.ndarray:
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    return np.sqrt(fy * fy + fx * fx)


@functools.lru_cache(maxsize=32)
def spectral_filter(h: int, w: int, decay: float) -> np.ndarray:
    """Amplitude 1/max(f, f_min)^decay on the FFT grid; the DC bin counts as f_min."""
    if decay < 0:
        raise ValueError("decay power must be nonnegative")
    f = radial_frequency(h, w)
    nonzero = f[f > 0]
    f_min = nonzero.min() if nonzero.size else 1.0
    out = 1.0 / np.maximum(f, f_min) ** decay
    out.flags.writeable = False
    return out


def _spectrum(h: int, w: int, decay: float, rng: np.random.Generator) -> np.ndarray:
    return (rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))) * spectral_filter(h, w, float(decay))


def fourier_field(h: int, w: int, decay: float, rng: np.random.Generator) -> np.ndarray:
    """Real low-pass random field: a complex Gaussian spectrum scaled by 1/f^decay."""
    return np.real(np.fft.ifft2(_spectrum(h, w, decay, rng)))


def threshold_top(field: np.ndarray, count: int) -> Mask:
    """Set exactly ``count`` pixels: the largest values, ties to the lower flat index."""
    flat = field.ravel()
    order = np.argsort(-flat, kind="stable")
    bits = np.zeros(flat.size, dtype=bool)
    bits[order[:count]] = True
    return Mask(bits.reshape(field.shape))


def fmix_mask(h: int, w: int, lam: float, decay: float, rng: np.random.Generator) -> Mask:
    """Binary mask with exactly round(lam*h*w) set pixels from a thresholded low-pass field."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    field = fourier_field(h, w, decay, rng)
    return threshold_top(field, round_half_up(lam * h * w))


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def mask_mix(mask: Mask, x1, x2):
    """Take pixels of ``x1`` where the mask is set, else ``x2``; return (image, lam_eff)."""
    _check_pair(x1, x2)
    if mask.bits.shape != x1.shape[-2:]:
        raise ShapeError(f"mask {mask.bits.shape} does not match image {x1.shape[-2:]}")
    out = np.where(mask.bits[None], x1, x2)
    return out, mask.set_count / mask.bits.size


# --------------------------------------------------------------------------
# boxes


@dataclass(frozen=True)
class Box:
    top: int
    left: int
    height: int
    width: int

    @property
    def area(self) -> int:
        return self.height * self.width

    def slices(self):
        return slice(self.top, self.top + self.height), slice(self.left, self.left + self.width)


def box_side(h: int, w: int, lam: float) -> int:
    return max(1, min(round_half_up(math.sqrt(lam * h * w)), min(h, w)))


def cut_box(h: int, w: int, lam: float, within_margins: bool, rng: np.random.Generator) -> Box:
    """Square box covering roughly ``lam`` of the image.

    Within margins the whole box fits inside the image, so the covered fraction
    is exactly side**2/(h*w). Otherwise the centre is uniform over the image and
    the box is clipped at the borders.
    """
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"box area fraction must lie in (0, 1], got {lam}")
    s = box_side(h, w, lam)
    if within_margins:
        top = int(rng.integers(0, h - s + 1))
        left = int(rng.integers(0, w - s + 1))
        return Box(top, left, s, s)
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    return clipped_box(h, w, s, cy, cx)


def clipped_box(h: int, w: int, s: int, cy: int, cx: int) -> Box:
    t0, l0 = cy - s // 2, cx - s // 2
    t1, l1 = max(t0, 0), max(l0, 0)
    b1, r1 = min(t0 + s, h), min(l0 + s, w)
    return Box(t1, l1, b1 - t1, r1 - l1)


def _check_box(box: Box, h: int, w: int) -> None:
    if box.top < 0 or box.left < 0 or box.top + box.height > h or box.left + box.width > w:
        raise ShapeError(f"{box} lies outside a {h}x{w} image")


def cutout(x, box: Box, fill: float = 0.0) -> np.ndarray:
    if not 0.0 <= fill <= 1.0:
        raise ValueError("fill must lie in [0, 1]")
    _check_box(box, *x.shape[-2:])
    out = x.copy()
    rows, cols = box.slices()
    out[:, rows, cols] = fill
    return out


def paste(x1, x2, box: Box) -> np.ndarray:
    """Copy the region ``box`` from ``x2`` into the same location of ``x1``."""
    _check_pair(x1, x2)
    _check_box(box, *x1.shape[-2:])
    out = x1.copy()
    rows, cols = box.slices()
    out[:, rows, cols] = x2[:, rows, cols]
    return out


def cutmix(x1, x2, y1: int, y2: int, lam: float, classes: int, rng: np.random.Generator):
    """Paste a box of area about (1 - lam) from ``x2`` into ``x1``.

    The soft label weights use the actual pasted area.
    """
    _check_pair(x1, x2)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    h, w = x1.shape[-2:]
    if lam == 1.0:
        return x1.copy(), two_hot(y1, y2, 1.0, classes)
    box = cut_box(h, w, 1.0 - lam, True, rng)
    pasted = box.area / (h * w)
    return paste(x1, x2, box), two_hot(y1, y2, 1.0 - pasted, classes)


# --------------------------------------------------------------------------
# batch level

METHODS = ("mixup", "fmix", "cutmix")


def mix_pair(method: str, x1, x2, lam: float, rng: np.random.Generator, decay: float = 3.0):
    """Mix two images with ``method``; return (image, effective weight of x1)."""
    if method == "mixup":
        return _blend(x1, x2, lam), lam
    if method == "fmix":
        mask = fmix_mask(x1.shape[-2], x1.shape[-1], lam, decay, rng)
        return mask_mix(mask, x1, x2)
    if method == "cutmix":
        if lam == 1.0:
            return x1.copy(), 1.0
        h, w = x1.shape[-2:]
        box = cut_box(h, w, 1.0 - lam, True, rng)
        return paste(x1, x2, box), 1.0 - box.area / (h * w)
    raise ValueError(f"unknown mixing method {method!r}")


def inter_dataset_batch(images: np.ndarray, labels: np.ndarray, aux: Dataset, method: str,
                        dist: MixCoeffDist, rng: np.random.Generator, decay: float = 3.0):
    """Mix each primary sample with a uniformly drawn auxiliary sample.

    Output labels are the primary labels; auxiliary labels are never read.
    Returns (images, labels, lam_eff).
    """
    if aux.images.shape[1:] != images.shape[1:]:
        raise ShapeError(f"auxiliary images {aux.images.shape[1:]} vs primary {images.shape[1:]}")
    seed = child_seed(rng)
    out = np.empty_like(images, dtype=np.float64)
    lam_eff = np.empty(len(images))
    for i in range(len(images)):
        srng = substream(seed, i)
        j = int(srng.integers(0, len(aux)))
        lam = sample_mix_coeff(dist, srng)
        out[i], lam_eff[i] = mix_pair(method, images[i], aux.images[j], lam, srng, decay)
    return out, np.asarray(labels).copy(), lam_eff


def mix_batch(images: np.ndarray, labels: np.ndarray, classes: int, method: str, dist: MixCoeffDist,
              rng: np.random.Generator, decay: float = 3.0, keep_first_label: bool = False):
    """Mix a batch with a random permutation of itself.

    Returns (images, soft_labels, partner_labels, lam_eff). With
    ``keep_first_label`` the soft labels are one-hot on the primary label.
    """
    seed = child_seed(rng)
    perm = substream(seed, "perm").permutation(len(images))
    if method == "fmix":
        out, lam_eff = _fmix_batch(images, images[perm], dist, seed, decay)
    else:
        out = np.empty_like(images, dtype=np.float64)
        lam_eff = np.empty(len(images))
        for i in range(len(images)):
            srng = substream(seed, i)
            lam = sample_mix_coeff(dist, srng)
            out[i], lam_eff[i] = mix_pair(method, images[i], images[perm[i]], lam, srng, decay)
    partner = np.asarray(labels)[perm]
    soft = np.zeros((len(images), classes))
    rows = np.arange(len(images))
    if keep_first_label:
        soft[rows, labels] = 1.0
    else:
        np.add.at(soft, (rows, labels), lam_eff)
        np.add.at(soft, (rows, partner), 1.0 - lam_eff)
    return out, soft, partner, lam_eff


def _fmix_batch(x1: np.ndarray, x2: np.ndarray, dist: MixCoeffDist, seed: int, decay: float):
    # same draws per sample substream as mix_pair("fmix", ...), with one batched inverse FFT
    n = len(x1)
    h, w = x1.shape[-2:]
    counts = np.empty(n, dtype=np.int64)
    spectra = np.empty((n, h, w), dtype=np.complex128)
    for i in range(n):
        srng = substream(seed, i)
        counts[i] = round_half_up(sample_mix_coeff(dist, srng) * h * w)
        spectra[i] = _spectrum(h, w, decay, srng)
    fields = np.real(np.fft.ifft2(spectra)).reshape(n, -1)
    order = np.argsort(-fields, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(h * w)[None, :].repeat(n, 0), axis=1)
    bits = (ranks < counts[:, None]).reshape(n, 1, h, w)
    return np.where(bits, x1, x2), counts / (h * w)


def majority_labels(y1: np.ndarray, y2: np.ndarray, lam_eff: np.ndarray) -> np.ndarray:
    """Label of the source with weight above 0.5; an exact 0.5 goes to the first image."""
    return np.where(np.asarray(lam_eff) >= 0.5, y1, y2)


# --------------------------------------------------------------------------
# tile shuffling and stacking


def _tiles(x, k: int):
    c, h, w = x.shape
    if k < 1:
        raise ValueError("grid size must be >= 1")
    if h % k or w % k:
        raise ShapeError(f"{h}x{w} image is not divisible into a {k}x{k} grid")
    th, tw = h // k, w // k
    return x.reshape(c, k, th, k, tw).transpose(1, 3, 0, 2, 4).reshape(k * k, c, th, tw), (c, h, w, th, tw)


def _untile(tiles, k: int, geom):
    c, h, w, th, tw = geom
    return tiles.reshape(k, k, c, th, tw).transpose(2, 0, 3, 1, 4).reshape(c, h, w)


def grid_shuffle(x, k: int, rng: np.random.Generator, return_perm: bool = False):
    """Split into k*k equal tiles and rearrange them by a uniform random permutation.

    Output tile ``t`` is input tile ``perm[t]``.
    """
    tiles, geom = _tiles(x, k)
    perm = rng.permutation(k * k)
    out = _untile(tiles[perm], k, geom)
    return (out, perm) if return_perm else out


def grid_unshuffle(x, k: int, perm: np.ndarray) -> np.ndarray:
    tiles, geom = _tiles(x, k)
    restored = np.empty_like(tiles)
    restored[perm] = tiles
    return _untile(restored, k, geom)


def hflip(x) -> np.ndarray:
    return x[..., ::-1].copy()


def _pad_centered(x, h: int, w: int) -> np.ndarray:
    c, xh, xw = x.shape
    if xh > h or xw > w:
        raise ShapeError(f"cannot pad {xh}x{xw} down to {h}x{w}")
    out = np.zeros((c, h, w))
    t, l = (h - xh) // 2, (w - xw) // 2
    out[:, t:t + xh, l:l + xw] = x
    return out


def stack_composite(top, bottom, pad_top_height: int | None = None) -> np.ndarray:
    """Stack ``top`` above ``bottom``.

    The image with fewer channels is replicated up to the other's channel count
    (only from a single channel), the narrower one is zero-padded to equal width,
    and ``pad_top_height`` optionally zero-pads the top image's height first.
    """
    top = np.asarray(top, dtype=np.float64)
    bottom = np.asarray(bottom, dtype=np.float64)
    c = max(top.shape[0], bottom.shape[0])
    imgs = []
    for img in (top, bottom):
        if img.shape[0] != c:
            if img.shape[0] != 1:
                raise ShapeError(f"cannot replicate {img.shape[0]} channels to {c}")
            img = np.repeat(img, c, axis=0)
        imgs.append(img)
    top, bottom = imgs
    width = max(top.shape[2], bottom.shape[2])
    top = _pad_centered(top, pad_top_height or top.shape[1], width)
    bottom = _pad_centered(bottom, bottom.shape[1], width)
    return np.concatenate([top, bottom], axis=1)
