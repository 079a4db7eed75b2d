"""Dataset ingestion, preprocessing, augmentation, folds, and batch assembly.

Supported image inputs are binary netpbm (P5 grayscale, P6 RGB) plus the
package's own packed container; TIFF sources must be converted externally.
Preprocessing pipeline: grayscale -> bilinear 28x28 -> invert to a dark
background -> bilinear 32x32 replicated to 3 channels -> scale to [0,1] ->
standardize with the train split's per-channel statistics.

Inversion is toward a dark background (applied only when the 28x28 image is
predominantly light), which makes the pixel pipeline a fixed point on
already-preprocessed inputs.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, InputError
from .optim import shuffle_epoch
from .tensor import Rng

GRAY_WEIGHTS = (0.299, 0.587, 0.114)  # ITU-R 601 luma
PACKED_MAGIC = b"BDND"
PACKED_VERSION = 1
NUM_CLASSES = 10


@dataclass
class RawImage:
    """Decoded 8-bit image, pixels shaped [height, width, channels]."""

    width: int
    height: int
    channels: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise InputError(f"degenerate image {self.width}x{self.height}")
        if self.channels not in (1, 3):
            raise InputError(f"channels must be 1 or 3, got {self.channels}")
        if self.pixels.shape != (self.height, self.width, self.channels):
            raise InputError(
                f"pixel buffer {self.pixels.shape} does not match "
                f"{self.height}x{self.width}x{self.channels}"
            )


@dataclass
class Sample:
    """One training-ready image tensor [3,32,32] with its class label."""

    image: np.ndarray
    label: int

    def __post_init__(self):
        if not 0 <= self.label < NUM_CLASSES:
            raise InputError(f"label must be in 0..{NUM_CLASSES - 1}, got {self.label}")


@dataclass
class AugmentConfig:
    """Random contrast / rotation / zoom sampler settings."""

    contrast_factors: list[float] = field(
        default_factory=lambda: [1, 0.2, 0.3, 0.5, 0.6, 0.7, 0.8, 0.9, 1.3, 1.5]
    )
    rotation_deg: float = 15.0
    zoom_max: float = 0.091
    enabled: bool = True

    def __post_init__(self):
        if any(f <= 0 for f in self.contrast_factors):
            raise ConfigError("contrast factors must be positive")
        if self.zoom_max < 0:
            raise ConfigError(f"zoom_max must be >= 0, got {self.zoom_max}")


@dataclass
class ArrayDataset:
    """In-memory split: uint8 image storage plus normalization statistics.

    Images stay in their [n,C,H,W] uint8 storage form; batch assembly
    rescales to [0,1], augments, and standardizes on the fly.
    """

    images: np.ndarray
    labels: np.ndarray
    norm_mean: np.ndarray
    norm_std: np.ndarray
    fold_seed: int = 1

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise InputError(f"images must be uint8 [n,C,H,W], got {self.images.dtype} {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise InputError(
                f"labels shape {self.labels.shape} does not match {self.images.shape[0]} images"
            )


@dataclass
class DatasetManifest:
    """Index of one split: (relative path, label) entries plus statistics."""

    entries: list[tuple[str, int]]
    split: str
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None
    fold_seed: int = 1
    packed_crc32: int | None = None  # checksum of the packed container file

    def class_counts(self) -> list[int]:
        counts = [0] * NUM_CLASSES
        for _, label in self.entries:
            counts[label] += 1
        return counts


# ---------------------------------------------------------------------------
# image decoding (binary netpbm)


class _Scanner:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def error(self, message: str) -> FormatError:
        return FormatError(message, offset=self.pos)

    def skip_space_and_comments(self):
        while self.pos < len(self.data):
            b = self.data[self.pos : self.pos + 1]
            if b.isspace():
                self.pos += 1
            elif b == b"#":
                while self.pos < len(self.data) and self.data[self.pos : self.pos + 1] != b"\n":
                    self.pos += 1
            else:
                return

    def read_int(self, what: str) -> int:
        self.skip_space_and_comments()
        start = self.pos
        while self.pos < len(self.data) and self.data[self.pos : self.pos + 1].isdigit():
            self.pos += 1
        if self.pos == start:
            raise self.error(f"expected integer for {what}")
        return int(self.data[start : self.pos])


def decode_image(data: bytes, fmt: str | None = None) -> RawImage:
    """Decode P5/P6 netpbm bytes, or the first sample of a packed container.

    `fmt` ("pgm", "ppm", "packed") is checked against the magic when given;
    by default the magic alone selects the decoder.
    """
    sniffed = {b"P5": "pgm", b"P6": "ppm", PACKED_MAGIC[:2]: "packed"}.get(data[:2])
    if sniffed is None:
        raise FormatError(f"unrecognized magic {data[:2]!r}", offset=0)
    if fmt is not None and fmt != sniffed:
        raise FormatError(f"expected {fmt} data but magic says {sniffed}", offset=0)
    if sniffed == "packed":
        images, labels = unpack_dataset_bytes(data)
        if len(labels) == 0:
            raise FormatError("packed container holds no samples", offset=11)
        chw = images[0]
        return RawImage(chw.shape[2], chw.shape[1], chw.shape[0], np.ascontiguousarray(chw.transpose(1, 2, 0)))

    sc = _Scanner(data)
    sc.pos = 2
    width = sc.read_int("width")
    height = sc.read_int("height")
    maxval = sc.read_int("maxval")
    if width < 1 or height < 1:
        raise FormatError(f"degenerate image {width}x{height}", offset=sc.pos)
    if not 0 < maxval < 256:
        raise FormatError(f"maxval {maxval} not supported (need 1..255)", offset=sc.pos)
    if sc.pos >= len(data) or not data[sc.pos : sc.pos + 1].isspace():
        raise sc.error("expected single whitespace before pixel payload")
    sc.pos += 1
    channels = 1 if sniffed == "pgm" else 3
    need = width * height * channels
    payload = data[sc.pos : sc.pos + need]
    if len(payload) < need:
        raise FormatError(
            f"truncated payload: need {need} bytes, have {len(payload)}", offset=len(data)
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return RawImage(width, height, channels, pixels.copy())


def encode_image(img: RawImage) -> bytes:
    """Canonical P5 (1 channel) or P6 (3 channels) encoding."""
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + f"\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


# ---------------------------------------------------------------------------
# preprocessing pipeline


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a [H,W] float image.

    Same-size resize is an exact identity (sample points land on the grid).
    """
    in_h, in_w = img.shape
    ys = np.arange(out_h) * ((in_h - 1) / (out_h - 1)) if out_h > 1 else np.zeros(1)
    xs = np.arange(out_w) * ((in_w - 1) / (out_w - 1)) if out_w > 1 else np.zeros(1)
    y0 = np.minimum(ys.astype(np.int64), in_h - 1)
    x0 = np.minimum(xs.astype(np.int64), in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def to_grayscale(img: RawImage) -> np.ndarray:
    """Luminance [H,W] float64 in 0..255."""
    px = img.pixels.astype(np.float64)
    if img.channels == 1:
        return px[:, :, 0]
    r, g, b = GRAY_WEIGHTS
    return r * px[:, :, 0] + g * px[:, :, 1] + b * px[:, :, 2]


def preprocess_image(img: RawImage) -> np.ndarray:
    """Pixel pipeline (grayscale/resize/invert/replicate): [3,32,32] in [0,1]."""
    g = to_grayscale(img)
    g = resize_bilinear(g, 28, 28)
    if g.mean() > 127.5:  # invert only light backgrounds, so reruns are stable
        g = 255.0 - g
    g = resize_bilinear(g, 32, 32)
    t = np.repeat(g[None, :, :], 3, axis=0) / 255.0
    return np.clip(t, 0.0, 1.0).astype(np.float32)


def standardize(t: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return ((t - np.asarray(mean, t.dtype)[:, None, None])
            / np.asarray(std, t.dtype)[:, None, None])


def preprocess(img: RawImage, norm_mean=None, norm_std=None) -> np.ndarray:
    """Full pipeline including standardization when statistics are given."""
    t = preprocess_image(img)
    if norm_mean is not None:
        t = standardize(t, norm_mean, norm_std)
    return t


def quantize_u8(t: np.ndarray) -> np.ndarray:
    """[0,1] float tensor -> uint8 bytes (storage form of the packed container)."""
    return np.clip(np.rint(t * 255.0), 0, 255).astype(np.uint8)


def compute_norm_stats(images_u8: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of [n,C,H,W] uint8 images on the [0,1] scale."""
    x = images_u8.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = np.maximum(x.std(axis=(0, 2, 3)), 1e-8)
    return mean, std


# ---------------------------------------------------------------------------
# augmentation


def _sample_bilinear(img: np.ndarray, src_y: np.ndarray, src_x: np.ndarray) -> np.ndarray:
    """Sample [C,H,W] at fractional (src_y, src_x); outside the image is 0."""
    c, h, w = img.shape
    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    out = np.zeros((c,) + src_y.shape, dtype=img.dtype)
    for dy in (0, 1):
        for dx in (0, 1):
            yy = y0 + dy
            xx = x0 + dx
            weight = (1 - np.abs(src_y - yy)) * (1 - np.abs(src_x - xx))
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = img[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += np.where(valid, weight, 0.0)[None] * vals
    return out


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    """Scale deviations from the per-image mean by `factor`, clamp to [0,1]."""
    if factor <= 0:
        raise ConfigError(f"contrast factor must be positive, got {factor}")
    mean = img.mean()
    return np.clip(mean + factor * (img - mean), 0.0, 1.0).astype(img.dtype)


def rotate(img: np.ndarray, degrees: float | None = None, rng: Rng | None = None) -> np.ndarray:
    """Rotate [C,H,W] about the image center, bilinear, black fill.

    Draws degrees uniformly from +-15 when not given explicitly.
    """
    if degrees is None:
        if rng is None:
            raise ConfigError("rotate needs either explicit degrees or an rng")
        degrees = float(rng.uniform(-15.0, 15.0))
    _, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(degrees)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    src_y = cos_t * yy - sin_t * xx + cy
    src_x = sin_t * yy + cos_t * xx + cx
    return _sample_bilinear(img, src_y, src_x)


def zoom(img: np.ndarray, scale: float | None = None, rng: Rng | None = None) -> np.ndarray:
    """Zoom in about the center by `scale` >= 1 (upscale + center crop).

    Draws the scale uniformly from [1, 1.091] when not given explicitly.
    """
    if scale is None:
        if rng is None:
            raise ConfigError("zoom needs either an explicit scale or an rng")
        scale = float(rng.uniform(1.0, 1.091))
    if scale < 1.0:
        raise ConfigError(f"zoom scale must be >= 1, got {scale}")
    if scale == 1.0:
        return img.copy()
    _, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    src_y = cy + (yy - cy) / scale
    src_x = cx + (xx - cx) / scale
    return _sample_bilinear(img, src_y, src_x)


def augment(img: np.ndarray, cfg: AugmentConfig, rng: Rng) -> np.ndarray:
    """Contrast -> rotation -> zoom with fresh draws from `rng`.

    Callers derive `rng` from (root seed, epoch, sample index), so each
    sample sees a new transform every epoch, reproducibly.
    """
    if not cfg.enabled:
        return img
    factor = cfg.contrast_factors[int(rng.integers(len(cfg.contrast_factors)))]
    out = adjust_contrast(img, factor)
    out = rotate(out, float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)))
    out = zoom(out, float(rng.uniform(1.0, 1.0 + cfg.zoom_max)))
    return out


# ---------------------------------------------------------------------------
# folds and batches


def kfold_assign(n_samples: int, k: int = 10, fold_seed: int = 1) -> np.ndarray:
    """Seeded permutation split into k folds with sizes differing by <= 1."""
    if n_samples < k:
        raise InputError(f"need at least k={k} samples, got {n_samples}")
    perm = shuffle_epoch(np.arange(n_samples), Rng(fold_seed).derive("folds"))
    fold_ids = np.empty(n_samples, dtype=np.int64)
    base, extra = divmod(n_samples, k)
    start = 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        fold_ids[perm[start : start + size]] = f
        start += size
    return fold_ids


def make_batches(indices, batch_size: int, rng: Rng | None = None) -> list[np.ndarray]:
    """Chunk (optionally shuffled) indices; a final partial batch is kept."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    idx = shuffle_epoch(indices, rng) if rng is not None else np.array(indices)
    return [idx[i : i + batch_size] for i in range(0, len(idx), batch_size)]


# ---------------------------------------------------------------------------
# manifest CSV + sidecar


def write_manifest_csv(path, entries: list[tuple[str, int]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("path,label\n")
        for rel, label in entries:
            fh.write(f"{rel},{label}\n")


def read_manifest_csv(path) -> list[tuple[str, int]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "path,label":
        raise FormatError(f"manifest {path} must start with 'path,label' header")
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        rel, sep, label_txt = line.rpartition(",")
        if not sep or not label_txt.isdigit():
            raise FormatError(f"manifest {path} line {lineno}: expected 'path,label'")
        label = int(label_txt)
        if not 0 <= label < NUM_CLASSES:
            raise InputError(f"manifest {path} line {lineno}: label {label} out of range")
        entries.append((rel, label))
    return entries


def write_sidecar(path, manifest: DatasetManifest) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"split={manifest.split}\n")
        fh.write(f"fold_seed={manifest.fold_seed}\n")
        fh.write("norm_mean=" + ",".join(repr(float(v)) for v in manifest.norm_mean) + "\n")
        fh.write("norm_std=" + ",".join(repr(float(v)) for v in manifest.norm_std) + "\n")
        if manifest.packed_crc32 is not None:
            fh.write(f"packed_crc32={manifest.packed_crc32}\n")


def read_sidecar(path) -> dict:
    values: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh.read().splitlines():
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise FormatError(f"sidecar {path}: bad line {line!r}")
            values[key] = val
    try:
        out = {
            "split": values["split"],
            "fold_seed": int(values["fold_seed"]),
            "norm_mean": np.array([float(v) for v in values["norm_mean"].split(",")]),
            "norm_std": np.array([float(v) for v in values["norm_std"].split(",")]),
        }
    except KeyError as missing:
        raise FormatError(f"sidecar {path}: missing key {missing}") from None
    out["packed_crc32"] = int(values["packed_crc32"]) if "packed_crc32" in values else None
    return out


# ---------------------------------------------------------------------------
# packed dataset container


def pack_dataset_bytes(images_u8: np.ndarray, labels) -> bytes:
    """Serialize [n,C,H,W] uint8 images + labels into the BDND container."""
    n, c, h, w = images_u8.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise InputError(f"need {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise InputError("labels must fit in a byte")
    out = bytearray()
    out += PACKED_MAGIC
    out += struct.pack("<HIHHB", PACKED_VERSION, n, h, w, c)
    for i in range(n):
        out.append(int(labels[i]))
        out += images_u8[i].tobytes()
    return bytes(out)


def unpack_dataset_bytes(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Parse a BDND container into ([n,C,H,W] uint8, labels)."""
    if data[:4] != PACKED_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {PACKED_MAGIC!r}", offset=0)
    header = struct.Struct("<HIHHB")
    if len(data) < 4 + header.size:
        raise FormatError("truncated container header", offset=len(data))
    version, n, h, w, c = header.unpack_from(data, 4)
    if version != PACKED_VERSION:
        raise FormatError(f"unsupported container version {version}", offset=4)
    if c not in (1, 3):
        raise FormatError(f"channels must be 1 or 3, got {c}", offset=4 + header.size - 1)
    sample_bytes = 1 + c * h * w
    need = 4 + header.size + n * sample_bytes
    if len(data) != need:
        raise FormatError(
            f"container size {len(data)} != expected {need}", offset=min(len(data), need)
        )
    images = np.empty((n, c, h, w), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    pos = 4 + header.size
    for i in range(n):
        labels[i] = data[pos]
        pos += 1
        images[i] = np.frombuffer(data, dtype=np.uint8, count=c * h * w, offset=pos).reshape(c, h, w)
        pos += c * h * w
    return images, labels


def write_packed(path, images_u8: np.ndarray, labels) -> None:
    with open(path, "wb") as fh:
        fh.write(pack_dataset_bytes(images_u8, labels))


def read_packed(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        return unpack_dataset_bytes(fh.read())


def sidecar_path(packed_path) -> str:
    return str(packed_path) + ".meta"


def load_dataset(packed_path, use_sidecar: bool = True) -> ArrayDataset:
    """Read a packed split; statistics come from its sidecar when present.

    A sidecar that records packed_crc32 also guards the container bytes, so
    any corruption of the packed file fails closed here. Without a sidecar
    the statistics are recomputed from the images themselves (appropriate
    for a train split, not for a test split).
    """
    with open(packed_path, "rb") as fh:
        blob = fh.read()
    side = sidecar_path(packed_path)
    if use_sidecar and os.path.exists(side):
        meta = read_sidecar(side)
        if meta["packed_crc32"] is not None and zlib.crc32(blob) != meta["packed_crc32"]:
            raise FormatError(f"{packed_path}: checksum mismatch against sidecar packed_crc32")
        images, labels = unpack_dataset_bytes(blob)
        return ArrayDataset(images, labels, meta["norm_mean"], meta["norm_std"], meta["fold_seed"])
    images, labels = unpack_dataset_bytes(blob)
    mean, std = compute_norm_stats(images)
    return ArrayDataset(images, labels, mean, std)


def class_counts(labels, num_classes: int = NUM_CLASSES) -> list[int]:
    counts = [0] * num_classes
    for label in np.asarray(labels):
        counts[int(label)] += 1
    return counts
