"""Dense numeric arrays and the deterministic random stream.

Tensors are plain ``numpy.ndarray`` values: row-major (C-contiguous),
rank 1-4, laid out NCHW for image data. float32 is the training dtype;
float64 is used in gradient-check mode. Every operation in this module
verifies its result is finite and raises ``NumericError`` otherwise, so
NaN/Inf never propagates silently out of the math substrate.

Randomness: one root seed feeds every stochastic decision in the repo.
``Rng`` wraps numpy's PCG64 generator seeded through ``SeedSequence``;
independent sub-streams are derived by hashing string/int labels into a
spawn key (see ``Rng.derive``), so streams like ("augment", epoch, index)
are reproducible across runs and platforms and never depend on call order.
"""

from __future__ import annotations

import hashlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ConfigError, NumericError

FLOAT32 = np.float32
FLOAT64 = np.float64


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericError(f"{what} contains NaN or Inf")
    return x


class Rng:
    """Seedable deterministic generator (PCG64) with labeled sub-streams."""

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def derive(self, *keys: int | str) -> "Rng":
        """Independent stream identified by `keys`, e.g. ("shuffle", epoch).

        Labels are hashed (sha256 over a type-tagged encoding) into a
        SeedSequence spawn key, so the derived stream depends only on the
        root seed and the labels, never on how much the parent was used.
        """
        tagged = "|".join(
            f"i:{k}" if isinstance(k, (int, np.integer)) else f"s:{k}" for k in keys
        )
        digest = hashlib.sha256(tagged.encode("utf-8")).digest()
        words = tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))
        parent = tuple(int(w) for w in self._seq.spawn_key)
        return Rng(self.seed, np.random.SeedSequence(self.seed, spawn_key=parent + words))

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, bound: int, size=None):
        """Uniform integers in [0, bound)."""
        return self._gen.integers(0, bound, size=size)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of rank-2 tensors [m,k] @ [k,n] -> [m,n]."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    return check_finite(a @ b, "matmul result")


def concat_channels(parts: list[np.ndarray]) -> np.ndarray:
    """Concatenate rank-4 tensors along the channel axis, order preserved."""
    if not parts:
        raise DimensionError("concat_channels needs at least one part")
    first = parts[0]
    for p in parts:
        if p.ndim != 4:
            raise DimensionError(f"concat_channels needs rank-4 parts, got {p.shape}")
        if p.shape[0] != first.shape[0] or p.shape[2:] != first.shape[2:]:
            raise DimensionError(
                f"concat_channels batch/spatial mismatch: {first.shape} vs {p.shape}"
            )
    if len(parts) == 1:
        return first
    return check_finite(np.concatenate(parts, axis=1), "concat result")


def slice_channels(x: np.ndarray, start: int, stop: int) -> np.ndarray:
    """Channel slice [start, stop) of a rank-4 tensor (concat's inverse)."""
    if x.ndim != 4:
        raise DimensionError(f"slice_channels needs a rank-4 tensor, got {x.shape}")
    return x[:, start:stop]


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if span < 0 or span % stride != 0:
        raise ConfigError(
            f"convolution geometry not integral: size={size} kernel={kernel} "
            f"stride={stride} pad={pad}"
        )
    return span // stride + 1


def im2col(x: np.ndarray, kernel: tuple[int, int], stride: int = 1, pad: int = 0) -> np.ndarray:
    """Unroll receptive fields of [N,C,H,W] into columns [C*kh*kw, N*Ho*Wo].

    Zero-pads outside the image. Adjoint of ``col2im``.
    """
    if x.ndim != 4:
        raise DimensionError(f"im2col needs a rank-4 input, got {x.shape}")
    check_finite(x, "im2col input")  # padding adds zeros, so finite in => finite out
    n, c, h, w = x.shape
    kh, kw = kernel
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # windows: [N, C, Ho, Wo, kh, kw] -> [C, kh, kw, N, Ho, Wo]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    return np.ascontiguousarray(cols)


def col2im(
    cols: np.ndarray,
    x_shape: tuple[int, int, int, int],
    kernel: tuple[int, int],
    stride: int = 1,
    pad: int = 0,
) -> np.ndarray:
    """Adjoint of ``im2col``: scatter-add columns back onto [N,C,H,W]."""
    n, c, h, w = x_shape
    kh, kw = kernel
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if cols.shape != (c * kh * kw, n * ho * wo):
        raise DimensionError(
            f"col2im got columns {cols.shape}, expected {(c * kh * kw, n * ho * wo)}"
        )
    blocks = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    # slices at a fixed (ky,kx) offset are disjoint, so += has no overlap races
    for ky in range(kh):
        for kx in range(kw):
            out[:, :, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += (
                blocks[:, ky, kx].transpose(1, 0, 2, 3)
            )
    if pad > 0:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return check_finite(np.ascontiguousarray(out), "col2im result")
