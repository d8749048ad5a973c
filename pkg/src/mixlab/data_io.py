"""Dataset containers, binary readers/writers and synthetic generators.

Images are float64 arrays of shape (C, H, W) with pixels in [0, 1]; a dataset
holds them stacked as (N, C, H, W).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError
from .rng import substream

CIFAR_PIXELS = 3 * 32 * 32


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    soft_labels: np.ndarray | None = None
    name: str = ""
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ShapeError(f"images must be (N, C, H, W), got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {images.shape[0]} images")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if self.soft_labels is not None:
            soft = np.asarray(self.soft_labels, dtype=np.float64)
            if soft.shape != (images.shape[0], self.class_count):
                raise ShapeError(f"soft labels shape {soft.shape} != {(images.shape[0], self.class_count)}")
            if not np.allclose(soft.sum(axis=1), 1.0, atol=1e-6, rtol=0):
                raise ValueError("soft labels must sum to 1")
            object.__setattr__(self, "soft_labels", soft)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx)
        soft = None if self.soft_labels is None else self.soft_labels[idx]
        extras = {k: np.asarray(v)[idx] for k, v in self.extras.items()}
        return Dataset(self.images[idx], self.labels[idx], self.class_count, soft, self.name, extras)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    true_dim: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 3:
            raise ShapeError(f"point cloud needs an (N >= 3, D) matrix, got {pts.shape}")
        object.__setattr__(self, "points", pts)


# --------------------------------------------------------------------------
# CIFAR binary


def read_cifar(path, variant: str = "c10") -> Dataset:
    """Read a CIFAR-10 or CIFAR-100 binary batch file.

    CIFAR-100 records carry a coarse and a fine label byte; the fine label is kept.
    """
    if variant not in ("c10", "c100"):
        raise ValueError(f"variant must be 'c10' or 'c100', got {variant!r}")
    n_label_bytes = 1 if variant == "c10" else 2
    record = n_label_bytes + CIFAR_PIXELS
    class_count = 10 if variant == "c10" else 100
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % record:
        offset = (raw.size // record) * record
        raise FormatError(f"{path}: truncated record at byte offset {offset} "
                          f"({raw.size - offset} of {record} bytes)")
    recs = raw.reshape(-1, record)
    labels = recs[:, n_label_bytes - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= class_count)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"{path}: label {labels[i]} >= {class_count} at byte offset "
                          f"{i * record + n_label_bytes - 1}")
    images = recs[:, n_label_bytes:].reshape(-1, 3, 32, 32) / 255.0
    return Dataset(images, labels, class_count, name=f"cifar-{variant}")


def write_cifar(path, data: Dataset, variant: str = "c10") -> None:
    """Write images in CIFAR binary layout (coarse byte written as 0 for c100)."""
    if data.image_shape != (3, 32, 32):
        raise ShapeError(f"CIFAR records are 3x32x32, got {data.image_shape}")
    pixels = np.rint(data.images * 255.0).astype(np.uint8).reshape(len(data), -1)
    labels = data.labels.astype(np.uint8)[:, None]
    cols = [labels, pixels] if variant == "c10" else [np.zeros_like(labels), labels, pixels]
    np.concatenate(cols, axis=1).tofile(path)


# --------------------------------------------------------------------------
# IDX (MNIST)

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def _read_idx_file(path, expected_magic: int, ndim: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 4 + 4 * ndim:
        raise FormatError(f"{path}: header too short ({len(buf)} bytes)")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    payload = buf[4 + 4 * ndim:]
    need = int(np.prod(dims))
    if len(payload) != need:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header implies {need}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def read_idx(images_path, labels_path) -> Dataset:
    imgs = _read_idx_file(images_path, IDX_IMAGES, 3)
    labels = _read_idx_file(labels_path, IDX_LABELS, 1).astype(np.int64)
    if imgs.shape[0] != labels.shape[0]:
        raise FormatError(f"count mismatch: {imgs.shape[0]} images vs {labels.shape[0]} labels")
    class_count = int(labels.max()) + 1 if labels.size else 1
    return Dataset(imgs[:, None, :, :] / 255.0, labels, class_count, name="idx")


def write_idx(images_path, labels_path, images_u8: np.ndarray, labels_u8: np.ndarray) -> None:
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">I3I", IDX_IMAGES, *images_u8.shape) + images_u8.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS, labels_u8.shape[0]) + labels_u8.tobytes())


# --------------------------------------------------------------------------
# MBT1 tensors

MBT_MAGIC = b"MBT1"
DTYPE_F32 = 0
DTYPE_U8 = 1
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype("u1")}


@dataclass(frozen=True)
class TensorFile:
    """A typed n-d array with its MBT1 dtype code."""

    dtype: int
    dims: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        if self.dtype not in _DTYPES:
            raise FormatError(f"dtype code {self.dtype} is not 0 (f32) or 1 (u8)")
        dims = tuple(int(d) for d in self.dims)
        if not dims or any(d <= 0 for d in dims):
            raise ValueError(f"tensor dims must be nonempty and nonzero, got {list(dims)}")
        data = np.asarray(self.data).astype(_DTYPES[self.dtype], copy=False)
        if data.size != int(np.prod(dims)):
            raise FormatError(f"payload has {data.size} values, dims {list(dims)} imply {int(np.prod(dims))}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", data.reshape(dims))

    @classmethod
    def from_array(cls, arr) -> TensorFile:
        arr = np.asarray(arr)
        code = DTYPE_U8 if arr.dtype == np.uint8 else DTYPE_F32
        return cls(code, arr.shape, arr)

    def __eq__(self, other):
        if not isinstance(other, TensorFile):
            return NotImplemented
        return (self.dtype == other.dtype and self.dims == other.dims
                and self.data.tobytes() == other.data.tobytes())


def encode_tensor(t: TensorFile) -> bytes:
    if len(t.dims) > 255:
        raise ValueError("MBT1 supports at most 255 dimensions")
    header = MBT_MAGIC + struct.pack("<BB", t.dtype, len(t.dims)) + struct.pack(f"<{len(t.dims)}I", *t.dims)
    return header + np.ascontiguousarray(t.data).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[TensorFile, int]:
    """Decode one MBT1 record starting at ``offset``; return it and the end offset."""
    if buf[offset:offset + 4] != MBT_MAGIC:
        raise FormatError(f"bad magic {buf[offset:offset + 4]!r} at byte offset {offset}")
    if len(buf) < offset + 6:
        raise FormatError(f"truncated header at byte offset {offset}")
    code, ndim = struct.unpack("<BB", buf[offset + 4:offset + 6])
    if code not in _DTYPES:
        raise FormatError(f"dtype code {code} > 1 at byte offset {offset + 4}")
    pos = offset + 6
    if ndim == 0 or len(buf) < pos + 4 * ndim:
        raise FormatError(f"invalid or truncated dims at byte offset {pos}")
    dims = struct.unpack(f"<{ndim}I", buf[pos:pos + 4 * ndim])
    pos += 4 * ndim
    if any(d == 0 for d in dims):
        raise FormatError(f"zero dimension in {list(dims)}")
    nbytes = int(np.prod(dims)) * _DTYPES[code].itemsize
    if len(buf) < pos + nbytes:
        raise FormatError(f"payload length mismatch: need {nbytes} bytes at offset {pos}, have {len(buf) - pos}")
    data = np.frombuffer(buf, dtype=_DTYPES[code], count=int(np.prod(dims)), offset=pos).reshape(dims).copy()
    return TensorFile(code, dims, data), pos + nbytes


def write_tensor(path, data: TensorFile) -> None:
    Path(path).write_bytes(encode_tensor(data))


def read_tensor(path) -> TensorFile:
    buf = Path(path).read_bytes()
    t, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after payload")
    return t


def write_tensors(path, tensors) -> None:
    """Write several MBT1 records back to back."""
    Path(path).write_bytes(b"".join(encode_tensor(t) for t in tensors))


def read_tensors(path) -> list[TensorFile]:
    buf = Path(path).read_bytes()
    out, pos = [], 0
    while pos < len(buf):
        t, pos = decode_tensor(buf, pos)
        out.append(t)
    return out


def write_dataset(prefix, data: Dataset) -> dict:
    """Write ``<prefix>.images.mbt`` (N,C,H,W f32) and labels (N u8 or N,K f32 soft)."""
    prefix = str(prefix)
    paths = {"images": prefix + ".images.mbt"}
    write_tensor(paths["images"], TensorFile.from_array(data.images.astype(np.float32)))
    if data.class_count <= 256:
        paths["labels"] = prefix + ".labels.mbt"
        write_tensor(paths["labels"], TensorFile.from_array(data.labels.astype(np.uint8)))
    if data.soft_labels is not None:
        paths["soft_labels"] = prefix + ".soft.mbt"
        write_tensor(paths["soft_labels"], TensorFile.from_array(data.soft_labels.astype(np.float32)))
    return paths


def read_dataset(prefix, class_count: int | None = None) -> Dataset:
    prefix = str(prefix)
    images = read_tensor(prefix + ".images.mbt").data.astype(np.float64)
    labels = read_tensor(prefix + ".labels.mbt").data.astype(np.int64)
    soft = None
    if Path(prefix + ".soft.mbt").exists():
        soft = read_tensor(prefix + ".soft.mbt").data.astype(np.float64)
        soft = soft / soft.sum(axis=1, keepdims=True)
    k = class_count or (soft.shape[1] if soft is not None else int(labels.max()) + 1)
    return Dataset(images, labels, k, soft, name=Path(prefix).name)


# --------------------------------------------------------------------------
# generators


def random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix from the QR factorisation of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def gen_hypercube(n: int, d: int, ambient: int, seed: int, rotate: bool = True) -> PointCloud:
    """Uniform points in [0,1]^d, zero-padded to ``ambient`` dims and randomly rotated."""
    if n < 10:
        raise ValueError(f"n must be >= 10, got {n}")
    if ambient < d:
        raise ValueError(f"ambient dimension {ambient} < intrinsic dimension {d}")
    rng = substream(seed, "hypercube")
    pts = np.zeros((n, ambient))
    pts[:, :d] = rng.random((n, d))
    if rotate and ambient > 1:
        pts = pts @ random_rotation(ambient, rng).T
    return PointCloud(pts, true_dim=d)


def gen_swiss_roll(n: int, noise: float, seed: int) -> PointCloud:
    """Swiss roll (t cos t, y, t sin t) with t in [1.5pi, 4.5pi] and y in [0, 21]."""
    if n < 10:
        raise ValueError(f"n must be >= 10, got {n}")
    if noise < 0:
        raise ValueError("noise must be nonnegative")
    rng = substream(seed, "swiss_roll")
    t = 1.5 * np.pi * (1.0 + 2.0 * rng.random(n))
    y = 21.0 * rng.random(n)
    pts = np.column_stack([t * np.cos(t), y, t * np.sin(t)])
    if noise > 0:
        pts = pts + noise * rng.standard_normal(pts.shape)
    return PointCloud(pts, true_dim=2)


def _easy_block(label: int, classes: int, h: int, w: int, strength: float, rng) -> np.ndarray:
    """Background noise plus a bright bar at a class-indexed horizontal position."""
    block = 0.5 + 0.1 * rng.standard_normal((h, w))
    if strength > 0:
        lo = (label * w) // classes
        hi = max(((label + 1) * w) // classes, lo + 1)
        block[:, lo:hi] += strength
    return block


def _hard_block(label: int, classes: int, h: int, w: int, noise: float, rng) -> np.ndarray:
    """Class-specific oriented grating with random phase, buried in noise."""
    angle = np.pi * label / classes
    freq = 2.0 + (label % 2)
    yy, xx = np.mgrid[0:h, 0:w]
    phase = rng.uniform(0, 2 * np.pi)
    proj = (np.cos(angle) * xx + np.sin(angle) * yy) / max(h, w)
    block = 0.5 + 0.3 * np.sin(2 * np.pi * freq * proj + phase)
    return block + noise * rng.standard_normal((h, w))


def gen_composite(n_per_class: int, classes: int, easy_strength: float, seed: int,
                  h: int = 12, w: int = 12, hard_noise: float = 0.15,
                  bottom_labels: np.ndarray | None = None) -> Dataset:
    """Stacked easy/hard images of shape (1, 2h, w).

    Rows [0, h) hold an easy, linearly separable cue for the class; rows [h, 2h)
    hold a harder grating texture. Both halves normally show the same class.
    Passing ``bottom_labels`` decouples the halves (used for conflicting test
    sets). The per-half ground truths are stored in ``extras`` under
    ``"easy_labels"`` and ``"hard_labels"``.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    labels = np.repeat(np.arange(classes), n_per_class)
    n = labels.size
    hard = labels.copy() if bottom_labels is None else np.asarray(bottom_labels, dtype=np.int64)
    if hard.shape != labels.shape:
        raise ShapeError("bottom_labels must have one entry per sample")
    images = np.empty((n, 1, 2 * h, w))
    for i in range(n):
        rng = substream(seed, "composite", i)
        images[i, 0, :h] = _easy_block(int(labels[i]), classes, h, w, easy_strength, rng)
        images[i, 0, h:] = _hard_block(int(hard[i]), classes, h, w, hard_noise, rng)
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images, labels, classes, name="composite",
                   extras={"easy_labels": labels.copy(), "hard_labels": hard})


def gen_composite_conflict(n_per_class: int, classes: int, easy_strength: float, seed: int, **kw) -> Dataset:
    """Composite test set whose bottom halves show an independently drawn class."""
    rng = substream(seed, "composite_conflict")
    bottom = rng.integers(0, classes, size=n_per_class * classes)
    return gen_composite(n_per_class, classes, easy_strength, seed, bottom_labels=bottom, **kw)
