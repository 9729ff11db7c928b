"""Dense-tensor substrate: deterministic RNG, circular 2-D convolution,
small-matrix linear algebra, Gaussian kernels.

Tensors are plain ``numpy.ndarray`` objects with dtype float64 and row-major
layout throughout the package; signals are C x H x W, batches B x C x H x W.
All operations here are pure functions of their inputs.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError, SingularMatrixError

__all__ = [
    "Prng",
    "derive_seed",
    "conv2d_circular",
    "conv2d_circular_backward",
    "small_det_inv",
    "gaussian_kernel",
]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_SCALE = 1.0 / float(1 << 53)


def _mix64(z: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    """SplitMix64 finalizer; works elementwise on uint64 arrays."""
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Prng:
    """SplitMix64 stream with uniform doubles and Box-Muller Gaussians.

    The state advances by the 64-bit golden-ratio constant per draw and the
    new state is passed through the SplitMix64 mixing function.  Uniform
    doubles take the top 53 bits of the mixed output, giving values in
    [0, 1).  Each Gaussian draw consumes exactly two consecutive uniforms
    (u1, u2) and returns sqrt(-2 ln(1 - u1)) * cos(2 pi u2); array draws of
    n Gaussians consume 2n uniforms (pairs yield cos/sin companions
    interleaved, a trailing odd sample discards its sin companion).  The
    integer and uniform streams are bit-for-bit reproducible for a given
    seed.
    """

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)

    def next_u64(self) -> int:
        with np.errstate(over="ignore"):
            self.state = self.state + _GOLDEN
            return int(_mix64(self.state))

    def _u64_array(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64)
            out = _mix64(self.state + steps * _GOLDEN)
            self.state = self.state + np.uint64(n) * _GOLDEN
        return out

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * _U64_SCALE

    def uniform_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64)) if np.ndim(shape) else int(shape)
        bits = self._u64_array(n) >> np.uint64(11)
        return (bits.astype(np.float64) * _U64_SCALE).reshape(shape)

    def gauss(self) -> float:
        u1 = self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log1p(-u1)) * math.cos(2.0 * math.pi * u2)

    def gauss_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64)) if np.ndim(shape) else int(shape)
        pairs = (n + 1) // 2
        u = self.uniform_array(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        ang = 2.0 * np.pi * u[:, 1]
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(ang)
        out[1::2] = r * np.sin(ang)
        return out[:n].reshape(shape)


def derive_seed(base: int, *words: int) -> int:
    """Deterministically fold integer words into a 64-bit sub-seed.

    Used to give every (epoch, sample) pair its own independent stream
    without any cross-run state.
    """
    with np.errstate(over="ignore"):
        h = np.uint64(base & 0xFFFFFFFFFFFFFFFF)
        for w in words:
            h = _mix64((h + _GOLDEN) ^ np.uint64(w & 0xFFFFFFFFFFFFFFFF))
    return int(h)


# Cache of wrap-around gather indices keyed by (H, W, kh, kw).
_IDX_CACHE: dict[tuple[int, int, int, int], tuple[np.ndarray, np.ndarray]] = {}


def _circular_indices(h: int, w: int, kh: int, kw: int):
    key = (h, w, kh, kw)
    cached = _IDX_CACHE.get(key)
    if cached is None:
        rows = (np.arange(h)[None, :] + np.arange(kh)[:, None] - kh // 2) % h
        cols = (np.arange(w)[None, :] + np.arange(kw)[:, None] - kw // 2) % w
        cached = (rows, cols)
        _IDX_CACHE[key] = cached
    return cached


def _gather_patches(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B, Cin, H, W) -> (B, Cin*kh*kw, H*W) with circular boundary."""
    b, cin, h, w = x.shape
    rows, cols = _circular_indices(h, w, kh, kw)
    # (B, Cin, kh, H, kw, W) -> (B, Cin*kh*kw, H*W)
    patches = x[:, :, rows[:, :, None, None], cols[None, None, :, :]]
    return patches.transpose(0, 1, 2, 4, 3, 5).reshape(b, cin * kh * kw, h * w)


def conv2d_circular(
    x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None
) -> np.ndarray:
    """2-D convolution with wrap-around boundary.

    out(o, r, c) = bias(o) + sum_i,dr,dc x(i, (r+dr) mod H, (c+dc) mod W)
                   * kernel(o, i, dr+kh//2, dc+kw//2)

    Accepts x as (Cin, H, W) or batched (B, Cin, H, W); kernel is
    (Cout, Cin, kh, kw) with odd kh, kw; bias is (Cout,) or None for no bias.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(
            f"conv2d_circular: kernel expects {kcin} input channels, "
            f"input has {cin} (input {tuple(x.shape[1:])}, kernel {tuple(kernel.shape)})"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d_circular: kernel dims must be odd, got {kh}x{kw}")
    patches = _gather_patches(x, kh, kw)
    out = kernel.reshape(cout, -1) @ patches  # (B, Cout, H*W) via broadcasting
    out = out.reshape(b, cout, h, w)
    if bias is not None:
        out += bias[None, :, None, None]
    return out[0] if squeeze else out


def conv2d_circular_backward(
    x: np.ndarray,
    kernel: np.ndarray,
    gout: np.ndarray,
    patches: np.ndarray | None = None,
):
    """Reverse-mode rule for :func:`conv2d_circular` on batched input.

    Returns (gx, gkernel, gbias) for cotangent ``gout`` of the output.
    ``patches`` may pass the forward gather back in to avoid recomputing it.
    """
    b, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    if patches is None:
        patches = _gather_patches(x, kh, kw)
    gout_mat = gout.reshape(b, cout, h * w)
    gbias = gout_mat.sum(axis=(0, 2))
    gkernel = np.einsum("boq,bpq->op", gout_mat, patches).reshape(kernel.shape)
    # Input gradient is a circular convolution with the channel-transposed,
    # spatially flipped kernel (exact for odd kernel dims).
    kt = kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    gx = conv2d_circular(gout, np.ascontiguousarray(kt), np.zeros(cin))
    return gx, gkernel, gbias


def small_det_inv(m: np.ndarray):
    """Determinant and inverse of a small square matrix via pivoted LU.

    Raises :class:`SingularMatrixError` when |det| < 1e-12, which signals an
    invalid flow state upstream.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"small_det_inv: expected square matrix, got {m.shape}")
    det = float(np.linalg.det(m))
    if abs(det) < 1e-12:
        raise SingularMatrixError(
            f"matrix of size {m.shape[0]} is numerically singular (det={det:.3e})"
        )
    inverse = np.linalg.inv(m)
    return det, inverse


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    """Normalized isotropic Gaussian tap grid of size (2*radius+1)^2."""
    if sigma <= 0:
        raise ValueError(f"gaussian_kernel: sigma must be positive, got {sigma}")
    if radius < 1:
        raise ValueError(f"gaussian_kernel: radius must be >= 1, got {radius}")
    coords = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(coords[:, None] ** 2 + coords[None, :] ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()
