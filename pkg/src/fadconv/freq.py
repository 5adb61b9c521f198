"""Orthonormal 2D DCT-II, adaptive pooling and frequency-block utilities.

The DCT uses the orthonormal scaling ``c(0) = sqrt(1/N)``, ``c(u>0) = sqrt(2/N)``
on both axes, so the inverse is the transpose and ``F(0, 0) = N * mean``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .nn.functional import ShapeError


@functools.lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis ``D`` with ``D[u, x] = c(u) cos((2x+1) u pi / 2n)``."""
    if n < 1:
        raise ValueError(f"DCT size must be positive, got {n}")
    x = np.arange(n)
    u = np.arange(n)[:, None]
    d = np.cos((2 * x + 1) * u * np.pi / (2 * n)) * np.sqrt(2.0 / n)
    d[0] = np.sqrt(1.0 / n)
    d.setflags(write=False)
    return d


def _as(basis: np.ndarray, like: np.ndarray) -> np.ndarray:
    # keep single-precision activations in single precision
    dt = like.dtype if np.issubdtype(like.dtype, np.floating) else np.float64
    return basis if basis.dtype == dt else basis.astype(dt)


def _square(block: np.ndarray) -> int:
    if block.ndim < 2 or block.shape[-1] != block.shape[-2]:
        raise ShapeError(f"expected square trailing dims, got shape {block.shape}")
    return block.shape[-1]


def dct2d(block: np.ndarray) -> np.ndarray:
    """2D DCT over the last two (square) axes; leading axes are batched."""
    d = _as(dct_matrix(_square(block)), block)
    return d @ block @ d.T


def idct2d(spec: np.ndarray) -> np.ndarray:
    d = _as(dct_matrix(_square(spec)), spec)
    return d.T @ spec @ d


@functools.lru_cache(maxsize=None)
def pool_matrix(size: int, out: int) -> np.ndarray:
    """Row ``i`` averages ``[floor(i*size/out), ceil((i+1)*size/out))``."""
    m = np.zeros((out, size))
    for i in range(out):
        start = (i * size) // out
        end = -((-(i + 1) * size) // out)
        m[i, start:end] = 1.0 / (end - start)
    m.setflags(write=False)
    return m


def effective_poolsize(p: int, h: int, w: int) -> int:
    if p <= 0:
        raise ValueError(f"poolsize must be positive, got {p}")
    return min(p, h, w)


def adaptive_avg_pool(x: np.ndarray, p: int) -> np.ndarray:
    """Pool the last two axes to ``p' x p'`` with ``p' = min(p, H, W)``."""
    h, w = x.shape[-2:]
    q = effective_poolsize(p, h, w)
    if h % q == 0 and w % q == 0:
        return x.reshape(*x.shape[:-2], q, h // q, q, w // q).mean(axis=(-3, -1))
    return _as(pool_matrix(h, q), x) @ x @ _as(pool_matrix(w, q), x).T


def adaptive_avg_pool_backward(grad_out: np.ndarray, h: int, w: int) -> np.ndarray:
    q = grad_out.shape[-1]
    if h % q == 0 and w % q == 0:
        g = grad_out / ((h // q) * (w // q))
        return np.repeat(np.repeat(g, h // q, axis=-2), w // q, axis=-1)
    return _as(pool_matrix(h, q), grad_out).T @ grad_out @ _as(pool_matrix(w, q), grad_out)


def extract_freq_block(spec: np.ndarray, n: int) -> np.ndarray:
    """Row-major flattening of the top-left ``n x n`` coefficients."""
    side = _square(spec)
    if n < 1 or n > side:
        raise ValueError(f"frequency side {n} outside [1, {side}]")
    return spec[..., :n, :n].reshape(*spec.shape[:-2], n * n)


def scatter_freq_block(grad_vec: np.ndarray, n: int, side: int) -> np.ndarray:
    """Adjoint of :func:`extract_freq_block`."""
    out = np.zeros((*grad_vec.shape[:-1], side, side), dtype=grad_vec.dtype)
    out[..., :n, :n] = grad_vec.reshape(*grad_vec.shape[:-1], n, n)
    return out


@dataclass(frozen=True)
class EnergyStats:
    mean: float
    total_energy: float
    avg_energy: float


def energy_stats(block: np.ndarray) -> EnergyStats:
    block = np.asarray(block, dtype=np.float64)
    n = _square(block)
    total = float(np.sum(block * block))
    return EnergyStats(mean=float(block.mean()), total_energy=total, avg_energy=total / (n * n))


def dc_energy_identity(block: np.ndarray, rtol: float = 1e-9) -> bool:
    """Check that the squared DC coefficient equals ``N^2 * mean^2``."""
    block = np.asarray(block, dtype=np.float64)
    n = _square(block)
    dc = dct2d(block)[0, 0]
    target = n * n * block.mean() ** 2
    return abs(dc * dc - target) <= rtol * max(1.0, target)


def zigzag_order(n: int) -> list[int]:
    """Row-major indices of an ``n x n`` block in JPEG zigzag order."""
    cells = sorted(
        ((u, v) for u in range(n) for v in range(n)),
        key=lambda t: (t[0] + t[1], t[1] if (t[0] + t[1]) % 2 == 0 else t[0]),
    )
    return [u * n + v for u, v in cells]


def truncate_spectrum(spec: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros_like(spec)
    out[..., :n, :n] = spec[..., :n, :n]
    return out


def _resample_nearest(img: np.ndarray, h: int, w: int) -> np.ndarray:
    sh, sw = img.shape
    rows = (np.arange(h) * sh) // h
    cols = (np.arange(w) * sw) // w
    return img[np.ix_(rows, cols)]


def square_resample(channel: np.ndarray) -> np.ndarray:
    """Adaptive-average the channel onto a ``min(H, W)`` square grid."""
    h, w = channel.shape
    return adaptive_avg_pool(channel, min(h, w))


def attention_heatmap(channel: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Low-frequency reconstruction map and GAP map for one channel.

    The channel is resampled to a square, its spectrum truncated to the top-left
    ``n x n`` block, inverted, and resampled back to ``H x W``. The GAP surface
    is the constant channel mean. Maps are returned unnormalized; see
    :func:`normalize01` for emission.
    """
    channel = np.asarray(channel, dtype=np.float64)
    if channel.ndim != 2:
        raise ShapeError(f"expected a single H x W channel, got shape {channel.shape}")
    h, w = channel.shape
    sq = square_resample(channel)
    side = sq.shape[0]
    if n < 1 or n > side:
        raise ValueError(f"frequency side {n} outside [1, {side}]")
    low = idct2d(truncate_spectrum(dct2d(sq), n))
    freq_map = low if (h, w) == low.shape else _resample_nearest(low, h, w)
    gap_map = np.full((h, w), channel.mean())
    return freq_map, gap_map


def resampled_channel(channel: np.ndarray) -> np.ndarray:
    """The square-resampled channel mapped back to its own grid."""
    channel = np.asarray(channel, dtype=np.float64)
    h, w = channel.shape
    sq = square_resample(channel)
    return sq if sq.shape == (h, w) else _resample_nearest(sq, h, w)


def normalize01(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi - lo <= 0 or not math.isfinite(hi - lo):
        return np.zeros_like(img, dtype=np.float64)
    return (img - lo) / (hi - lo)
