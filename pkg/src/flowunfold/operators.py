"""Linear measurement operators and the noisy measurement synthesizer.

Each operator knows its image shape, applies to a single (C, H, W) image or a
(B, C, H, W) batch, and provides an exact adjoint.  All three kinds are
self-adjoint here (identity and mask are diagonal, the blur kernel is
even-symmetric under circular boundary), but callers must go through
``adjoint`` anyway so the data-consistency gradient stays correct if a
non-symmetric operator is ever added.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import Prng, conv2d_circular, gaussian_kernel

__all__ = [
    "ForwardOp",
    "Identity",
    "CenterMask",
    "GaussianBlur",
    "apply",
    "adjoint",
    "make_measurement",
    "operator_for_task",
]


class ForwardOp:
    """Contract: linear map with apply/adjoint over a fixed image shape."""

    kind = "abstract"

    def __init__(self, shape: tuple[int, int, int]):
        self.shape = tuple(shape)

    def _check(self, x: np.ndarray) -> None:
        if x.shape[-3:] != self.shape or x.ndim not in (3, 4):
            raise ShapeError.mismatch(f"{self.kind} input", x.shape, self.shape)

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adjoint(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Identity(ForwardOp):
    """Denoising: A = I."""

    kind = "identity"

    def apply(self, x):
        self._check(x)
        return x.copy()

    def adjoint(self, v):
        self._check(v)
        return v.copy()


class CenterMask(ForwardOp):
    """Inpainting: zero a centered w x w window in every channel.

    Masked pixels are measured as exact zeros, keeping the operator square;
    a diagonal 0/1 projection, hence self-adjoint and idempotent.
    """

    kind = "center_mask"

    def __init__(self, shape, w: int):
        super().__init__(shape)
        _, h, wid = self.shape
        if not 1 <= w <= min(h, wid):
            raise ConfigError(f"mask width {w} outside [1, {min(h, wid)}]")
        self.w = w
        self.r0 = (h - w) // 2
        self.c0 = (wid - w) // 2

    def apply(self, x):
        self._check(x)
        y = x.copy()
        y[..., self.r0 : self.r0 + self.w, self.c0 : self.c0 + self.w] = 0.0
        return y

    adjoint = apply


class GaussianBlur(ForwardOp):
    """Deblurring: per-channel circular convolution with a normalized
    truncated Gaussian.  Even symmetry + circular boundary make the matrix
    symmetric, so the adjoint is the same convolution."""

    kind = "gaussian_blur"

    def __init__(self, shape, sigma_b: float, radius: int):
        super().__init__(shape)
        if sigma_b <= 0:
            raise ConfigError(f"blur sigma must be positive, got {sigma_b}")
        if radius < 1:
            raise ConfigError(f"blur radius must be >= 1, got {radius}")
        self.sigma_b = float(sigma_b)
        self.radius = int(radius)
        self.kernel = gaussian_kernel(self.sigma_b, self.radius)[None, None]

    def apply(self, x):
        self._check(x)
        single = x.ndim == 3
        b = x[None] if single else x
        n, c, h, w = b.shape
        flat = b.reshape(n * c, 1, h, w)
        out = conv2d_circular(flat, self.kernel).reshape(b.shape)
        return out[0] if single else out

    adjoint = apply


def apply(op: ForwardOp, x: np.ndarray) -> np.ndarray:
    """y = A x."""
    return op.apply(x)


def adjoint(op: ForwardOp, v: np.ndarray) -> np.ndarray:
    """u = A^T v."""
    return op.adjoint(v)


def make_measurement(
    op: ForwardOp, x: np.ndarray, sigma_n: float, rng: Prng
) -> np.ndarray:
    """y = A x + eta with eta i.i.d. Gaussian (mean 0, std sigma_n).

    sigma_n = 0 returns A x exactly, consuming no random draws.
    """
    if sigma_n < 0:
        raise ConfigError(f"noise std must be >= 0, got {sigma_n}")
    y = op.apply(x)
    if sigma_n > 0:
        y = y + sigma_n * rng.gauss_array(y.shape)
    return y


TASKS = ("denoise", "inpaint", "deblur")


def operator_for_task(
    task: str,
    shape: tuple[int, int, int],
    mask_w: int = 0,
    sigma_b: float = 0.0,
    blur_radius: int = 0,
) -> ForwardOp:
    """Build the operator a task name calls for; zeros mean library defaults
    (mask w = ceil(0.3 min(H, W)), radius = ceil(3 sigma_b))."""
    if task == "denoise":
        return Identity(shape)
    if task == "inpaint":
        w = mask_w if mask_w else -(-3 * min(shape[1], shape[2]) // 10)
        return CenterMask(shape, w)
    if task == "deblur":
        sb = sigma_b if sigma_b else 1.0
        radius = blur_radius if blur_radius else int(np.ceil(3 * sb))
        return GaussianBlur(shape, sb, radius)
    raise ConfigError(f"unknown task {task!r}, expected one of {TASKS}")
