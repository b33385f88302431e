"""Numeric primitives shared by the network, optimizer and pruning code.

Arrays are plain ``numpy.ndarray`` objects of dtype float32 (row-major).
Matrix products go through numpy/BLAS, which is deterministic for a fixed
thread count and input, so repeated runs on one machine are bitwise equal.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

DTYPE = np.float32

# Named sub-streams derived from one master seed.
STREAMS = {"init": 0, "shuffle": 1, "data": 2, "eval": 3}


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise DimensionError(
            f"window {k} with stride {stride} and pad {pad} does not tile size {size}"
        )
    return span // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Unfold ``x`` (n, r, H, W) into receptive-field rows.

    Returns an array of shape (n*H'*W', kh*kw*r). Rows are ordered by
    (image, out_row, out_col); columns by (kernel_row, kernel_col, channel),
    which matches a kernel unfolded into a (kh*kw*r, s) matrix.
    """
    if x.ndim != 4:
        raise DimensionError(f"im2col expects a 4-d input, got shape {x.shape}")
    n, r, h, w = x.shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # (n, r, H'', W'', kh, kw) -> strided -> (n, oh, ow, kh, kw, r)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win.transpose(0, 2, 3, 4, 5, 1)
    return np.ascontiguousarray(win).reshape(n * oh * ow, kh * kw * r)


def col2im(cols: np.ndarray, input_shape, kh: int, kw: int, stride: int = 1,
           pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add rows back onto the input grid."""
    n, r, h, w = input_shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    cols = cols.reshape(n, oh, ow, kh, kw, r)
    out = np.zeros((n, r, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            # (n, oh, ow, r) -> (n, r, oh, ow)
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                cols[:, :, :, i, j, :].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def topk_threshold(values: np.ndarray, q: int) -> tuple[float, np.ndarray]:
    """Indices of the ``q`` greatest entries of a flat array.

    Returns ``(threshold, indices)`` where threshold is the q-th greatest
    value and ``indices`` is sorted ascending with exactly ``q`` entries.
    Entries equal to the threshold are admitted lowest index first.
    """
    flat = np.asarray(values).ravel()
    n = flat.size
    if not 1 <= q <= n:
        raise ValueError(f"q must lie in [1, {n}], got {q}")
    threshold = np.partition(flat, n - q)[n - q]
    above = np.flatnonzero(flat > threshold)
    ties = np.flatnonzero(flat == threshold)[: q - above.size]
    return threshold.item(), np.sort(np.concatenate([above, ties]))


def make_rng(seed: int, stream: str | None = None) -> np.random.Generator:
    """PCG64 generator; optionally a named sub-stream of ``seed``.

    PCG64 output is specified bit-for-bit by numpy and does not depend on
    the host platform.
    """
    if stream is None:
        return np.random.Generator(np.random.PCG64(seed))
    seq = np.random.SeedSequence(seed, spawn_key=(STREAMS[stream],))
    return np.random.Generator(np.random.PCG64(seq))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bit_gen = np.random.PCG64()
    bit_gen.state = state
    return np.random.Generator(bit_gen)
