"""Complex array helpers: 2-D FFTs and FFT-based convolutions.

Matrices are plain numpy arrays (``complex128`` unless the caller passes a
real array). Every function operates on the last two axes, so a stack of
matrices with arbitrary leading batch dimensions is accepted wherever a
single matrix is.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Raised when array dimensions violate an operation's preconditions."""


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def as_complex(m) -> np.ndarray:
    return np.asarray(m, dtype=np.complex128)


def _check_matrix(m: np.ndarray, name: str = "matrix") -> None:
    if m.ndim < 2:
        raise DimensionError(f"{name} must be at least 2-D, got shape {m.shape}")
    if m.shape[-2] < 1 or m.shape[-1] < 1:
        raise DimensionError(f"{name} has an empty dimension: {m.shape}")


def _check_pow2(m: np.ndarray, name: str = "matrix") -> None:
    _check_matrix(m, name)
    rows, cols = m.shape[-2:]
    if not (is_power_of_two(rows) and is_power_of_two(cols)):
        raise DimensionError(
            f"{name} dimensions must be powers of two, got {rows}x{cols}")


def fft2(m) -> np.ndarray:
    """Unnormalized 2-D DFT over the last two axes."""
    m = as_complex(m)
    _check_pow2(m)
    return np.fft.fft2(m, axes=(-2, -1))


def ifft2(m) -> np.ndarray:
    """Inverse of :func:`fft2`, including the ``1/(rows*cols)`` factor."""
    m = as_complex(m)
    _check_pow2(m)
    return np.fft.ifft2(m, axes=(-2, -1))


def pad_to(kernel: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Zero-pad ``kernel`` to ``shape``, anchored at index (0, 0)."""
    kh, kw = kernel.shape[-2:]
    rows, cols = shape
    if kh > rows or kw > cols:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than target {rows}x{cols}")
    out = np.zeros(kernel.shape[:-2] + (rows, cols), dtype=kernel.dtype)
    out[..., :kh, :kw] = kernel
    return out


def circ_conv2(kernel, x) -> np.ndarray:
    """Circular 2-D convolution of a zero-padded ``kernel`` with ``x``.

    The kernel is padded to the size of ``x`` with its (0, 0) entry at the
    matrix origin; output has the shape of ``x``.
    """
    kernel = as_complex(kernel)
    x = as_complex(x)
    _check_matrix(kernel, "kernel")
    _check_pow2(x, "input")
    kh, kw = kernel.shape[-2:]
    rows, cols = x.shape[-2:]
    if kh > rows or kw > cols:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than input {rows}x{cols}")
    kf = fft2(pad_to(kernel, (rows, cols)))
    return ifft2(kf * fft2(x))


def circ_corr2(kernel, x) -> np.ndarray:
    """Adjoint of :func:`circ_conv2` with respect to ``x``.

    Returns ``out[i] = sum_k conj(kernel[k - i]) * x[k]`` with periodic
    indices, so that ``<circ_conv2(k, a), b> == <a, circ_corr2(k, b)>``.
    """
    kernel = as_complex(kernel)
    x = as_complex(x)
    _check_matrix(kernel, "kernel")
    _check_pow2(x, "input")
    rows, cols = x.shape[-2:]
    kf = fft2(pad_to(kernel, (rows, cols)))
    return ifft2(np.conj(kf) * fft2(x))


def valid_conv2(kernel, x) -> np.ndarray:
    """'Valid' 2-D cross-correlation (no kernel flip, no conjugation).

    ``out[i, j] = sum_{u, v} kernel[u, v] * x[i + u, j + v]`` for the
    ``(rows - kh + 1) x (cols - kw + 1)`` positions where the kernel fits.
    Any input size is accepted: an FFT of the input's own size is exact for
    the valid region because no index there wraps around.
    """
    kernel = np.asarray(kernel)
    x = np.asarray(x)
    _check_matrix(kernel, "kernel")
    _check_matrix(x, "input")
    kh, kw = kernel.shape[-2:]
    rows, cols = x.shape[-2:]
    if kh > rows or kw > cols:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than input {rows}x{cols}")
    return xcorr_valid_fft(kernel, x)


def _flip_spectrum(kernel: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    # FFT of the index-reversed kernel, k[-u mod P]
    padded = pad_to(np.conj(kernel), shape)
    return np.conj(np.fft.fft2(padded, axes=(-2, -1)))


def xcorr_valid_fft(kernel: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Valid cross-correlation with broadcasting over leading axes."""
    rows, cols = x.shape[-2:]
    kh, kw = kernel.shape[-2:]
    real = not (np.iscomplexobj(kernel) or np.iscomplexobj(x))
    if real:
        kf = np.conj(np.fft.rfft2(pad_to(kernel, (rows, cols)), axes=(-2, -1)))
        full = np.fft.irfft2(kf * np.fft.rfft2(x, axes=(-2, -1)), s=(rows, cols), axes=(-2, -1))
    else:
        kf = _flip_spectrum(kernel, (rows, cols))
        full = np.fft.ifft2(kf * np.fft.fft2(x, axes=(-2, -1)), axes=(-2, -1))
    return full[..., : rows - kh + 1, : cols - kw + 1]



def centered_offsets(size: int) -> np.ndarray:
    """Integer offsets ``-size//2 ... size - size//2 - 1`` of a centered kernel axis."""
    return np.arange(size) - size // 2


def embed_centered(kernel: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Place ``kernel`` on a ``shape`` grid so that its centre sits at (0, 0).

    Entry ``kernel[i, j]`` lands at ``(i - kh//2, j - kw//2)`` modulo the grid
    size, which makes circular convolution with the result a 'same'-size,
    zero-lag-aligned filter.
    """
    kh, kw = kernel.shape[-2:]
    padded = pad_to(kernel, shape)
    return np.roll(padded, (-(kh // 2), -(kw // 2)), axis=(-2, -1))


def extract_centered(full: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Inverse of :func:`embed_centered`: gather the kernel footprint."""
    rolled = np.roll(full, (kh // 2, kw // 2), axis=(-2, -1))
    return rolled[..., :kh, :kw]
