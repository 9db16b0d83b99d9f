"""Trainable 2-D matched-filter layer.

The layer convolves raw radar data with a chirp-replica filter whose two FM
rates are learned, and returns the modulus of the result. Rates are stored
as dimensionless scale factors ``rho`` of nominal rates, because the range
and azimuth rates differ by many orders of magnitude.

Axis convention: rows are range (fast time, sampled at ``f_sr``), columns
are azimuth (slow time, sampled at ``prf``).
"""

from __future__ import annotations

import numpy as np

from .ctensor import centered_offsets, embed_centered, extract_centered, fft2, ifft2
from .network import Layer, as_image_batch, check_raw_input, modulus_subgradient


class ParameterError(ValueError):
    pass


def build_matched_filter(k_r: float, k_a: float, size: int, f_sr: float, prf: float) -> np.ndarray:
    """Filter with entries ``exp(-j pi k_r m'^2) * exp(+j pi k_a n'^2)``.

    ``m' = m_c / f_sr`` and ``n' = n_c / prf`` where ``m_c, n_c`` run over
    ``-size//2 ... size - size//2 - 1``, so entry ``[size//2, size//2]`` is
    the zero-delay tap.
    """
    if f_sr <= 0 or prf <= 0:
        raise ParameterError(f"sampling rates must be positive (f_sr={f_sr}, prf={prf})")
    if size < 2:
        raise ParameterError(f"filter size must be at least 2, got {size}")
    m = centered_offsets(size) / f_sr
    n = centered_offsets(size) / prf
    range_part = np.exp(-1j * np.pi * k_r * m ** 2)
    azimuth_part = np.exp(1j * np.pi * k_a * n ** 2)
    return np.outer(range_part, azimuth_part)


class MatchedFilterLayer(Layer):
    """``|conv(M(rho_r * K_r, rho_a * K_a), S)|`` with trainable ``rho``.

    ``params["rho"]`` holds ``[rho_r, rho_a]``. The convolution is circular
    with the filter centred on the matrix origin, so the output has the size
    of the input and a point target's response peaks at the target's sample.
    """

    group = "sp"

    def __init__(self, k_r_nominal: float, k_a_nominal: float, size: int,
                 f_sr: float, prf: float, rho=(1.0, 1.0)):
        super().__init__()
        if f_sr <= 0 or prf <= 0:
            raise ParameterError(f"sampling rates must be positive (f_sr={f_sr}, prf={prf})")
        if min(rho) <= 0:
            raise ParameterError(f"rho must be positive, got {tuple(rho)}")
        self.k_r_nominal = float(k_r_nominal)
        self.k_a_nominal = float(k_a_nominal)
        self.size = int(size)
        self.f_sr = float(f_sr)
        self.prf = float(prf)
        self.params["rho"] = np.array(rho, dtype=np.float64)

    @property
    def rho_r(self) -> float:
        return float(self.params["rho"][0])

    @property
    def rho_a(self) -> float:
        return float(self.params["rho"][1])

    @property
    def rates(self) -> tuple[float, float]:
        """Effective ``(K_r_hat, K_a_hat)``."""
        return self.rho_r * self.k_r_nominal, self.rho_a * self.k_a_nominal

    def matched_filter(self) -> np.ndarray:
        k_r, k_a = self.rates
        return build_matched_filter(k_r, k_a, self.size, self.f_sr, self.prf)

    def check_input(self, x):
        check_raw_input(self, x, self.size)

    def forward(self, x):
        x = np.asarray(x)
        in_shape = x.shape
        s = as_image_batch(x.astype(np.complex128, copy=False))
        m = self.matched_filter()
        kf = fft2(embed_centered(m, s.shape[-2:]))
        sf = fft2(s)
        y = ifft2(kf * sf)
        self._cache = (in_shape, m, kf, sf, y)
        return np.abs(y)

    def backward(self, delta):
        """Gradients for ``rho`` (stored in ``grads``); returns dL/d(conj S)."""
        in_shape, m, kf, sf, y = self._cached()
        delta = as_image_batch(np.asarray(delta, dtype=np.float64))
        # dL/d(conj y) through the modulus, with subgradient 0 at y == 0
        g = delta * modulus_subgradient(y) / 2
        gf = fft2(g)
        # dL/d(conj M): correlation of g with the input, summed over the batch
        g_filter = extract_centered(ifft2(gf * np.conj(sf)).sum(axis=(0, 1)), self.size, self.size)
        m_r = centered_offsets(self.size)[:, None] / self.f_sr
        n_a = centered_offsets(self.size)[None, :] / self.prf
        dm_dkr = -1j * np.pi * m_r ** 2 * m
        dm_dka = 1j * np.pi * n_a ** 2 * m
        # real parameter p: dL/dp = 2 Re sum conj(dL/d conj M) * dM/dp
        d_kr = 2.0 * np.real(np.sum(np.conj(g_filter) * dm_dkr))
        d_ka = 2.0 * np.real(np.sum(np.conj(g_filter) * dm_dka))
        self.grads["rho"] = np.array([d_kr * self.k_r_nominal, d_ka * self.k_a_nominal])
        return ifft2(np.conj(kf) * gf).reshape(in_shape)
