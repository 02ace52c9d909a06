# kspace_api.py

import logging
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import fft

from api.errors import ConfigurationError, ShapeError
from api.models import ComplexImage, GaussianEchoFilter, GridSpec, SequenceParams
from api.sequence_api import SequenceAPI

logger = logging.getLogger(__name__)


class KSpaceAPI:
    """
    Centred unitary FFT pair, zero-padding and the Gaussian echo filters.
    Frequencies are in cycles/FOV with bin rows // 2, cols // 2 at DC.
    """

    def __init__(self):
        """Initialize filter defaults"""
        self.sigma_fraction = 1.0 / 16.0   # default sigma = N / 16 cycles/FOV
        self.overlap_sigmas = 3.0          # echo centres closer than this are flagged
        self.sequence_api = SequenceAPI()

    def _validate_domain(self, img: ComplexImage, expected: str):
        if img.domain != expected:
            raise ConfigurationError(f"expected {expected}-domain data, got {img.domain}")

    def default_sigma(self, grid: GridSpec) -> float:
        return min(grid.rows, grid.cols) * self.sigma_fraction

    def fft2_centered(self, img: ComplexImage) -> ComplexImage:
        self._validate_domain(img, "image")
        data = fft.fftshift(fft.fft2(fft.ifftshift(img.data), norm="ortho"))
        return img.with_data(data, domain="kspace")

    def ifft2_centered(self, k: ComplexImage) -> ComplexImage:
        self._validate_domain(k, "kspace")
        data = fft.fftshift(fft.ifft2(fft.ifftshift(k.data), norm="ortho"))
        return k.with_data(data, domain="image")

    def gaussian_window(self, grid: GridSpec, center_cyc: Sequence[float], sigma_cyc: float) -> np.ndarray:
        """exp(-|k - center|^2 / (2 sigma^2)) with periodic (minimum-image) distances"""
        kx = np.arange(grid.cols) - grid.cols // 2
        ky = np.arange(grid.rows) - grid.rows // 2
        dx = np.mod(kx - center_cyc[0] + grid.cols / 2, grid.cols) - grid.cols / 2
        dy = np.mod(ky - center_cyc[1] + grid.rows / 2, grid.rows) - grid.rows / 2
        distance_sq = dx[None, :] ** 2 + dy[:, None] ** 2
        return np.exp(-distance_sq / (2 * sigma_cyc ** 2))

    def apply_echo_filter(self, k: ComplexImage, echo_filter: GaussianEchoFilter) -> ComplexImage:
        """Complex multiplication by g (pass) or 1 - g (reject)"""
        self._validate_domain(k, "kspace")
        g = self.gaussian_window(k.grid, echo_filter.center_cyc, echo_filter.sigma_cyc)
        weight = g if echo_filter.mode == "pass" else 1.0 - g
        return k.with_data(k.data * weight)

    def _echo_distance(self, grid: GridSpec, a: Sequence[float], b: Sequence[float]) -> float:
        dx = (a[0] - b[0] + grid.cols / 2) % grid.cols - grid.cols / 2
        dy = (a[1] - b[1] + grid.rows / 2) % grid.rows - grid.rows / 2
        return float(np.hypot(dx, dy))

    def remove_double_echo(self, img: ComplexImage, params: SequenceParams,
                           sigma_cyc: Optional[float] = None) -> ComplexImage:
        """Notch out the double spin echo at shift3 in k-space, keeping the overlapped pair"""
        self._validate_domain(img, "image")
        sigma = sigma_cyc or self.default_sigma(img.grid)

        nearest = min(self._echo_distance(img.grid, params.shift3_cyc, params.shift1_cyc),
                      self._echo_distance(img.grid, params.shift3_cyc, params.shift2_cyc))
        overlap = nearest < self.overlap_sigmas * sigma
        if overlap:
            logger.warning(f"Double echo lies {nearest:.1f} cycles from a primary echo (< {self.overlap_sigmas} sigma)")

        notch = GaussianEchoFilter(center_cyc=params.shift3_cyc, sigma_cyc=sigma, mode="reject")
        filtered = self.ifft2_centered(self.apply_echo_filter(self.fft2_centered(img), notch))
        return filtered.with_data(filtered.data, double_echo_removed=True,
                                  echo_sigma_cyc=sigma, echo_overlap_warning=bool(overlap))

    def windowed_split(self, img: ComplexImage, params: SequenceParams,
                       sigma_cyc: Optional[float] = None) -> Tuple[ComplexImage, ComplexImage]:
        """Gaussian pass bands around echoes 1 and 2, then demodulation of each band"""
        self._validate_domain(img, "image")
        sigma = sigma_cyc or self.default_sigma(img.grid)
        k = self.fft2_centered(img)
        separated = []
        for shift in (params.shift1_cyc, params.shift2_cyc):
            band = GaussianEchoFilter(center_cyc=shift, sigma_cyc=sigma, mode="pass")
            echo = self.ifft2_centered(self.apply_echo_filter(k, band))
            ramp = self.sequence_api.phase_ramp(img.grid, shift)
            separated.append(echo.with_data(echo.data * np.conj(ramp)))
        return separated[0], separated[1]

    def zero_pad(self, k: ComplexImage, target: GridSpec) -> ComplexImage:
        """
        Symmetric zero-padding of centred k-space.

        With the unitary transform, image energy is preserved and a constant image of value c
        on N x N becomes a constant c * N / M on the M x M grid.
        """
        self._validate_domain(k, "kspace")
        rows, cols = k.grid.shape
        if target.rows < rows or target.cols < cols:
            raise ShapeError(f"target {target.shape} is smaller than source {k.grid.shape}")

        before_r = target.rows // 2 - rows // 2
        before_c = target.cols // 2 - cols // 2
        padded = np.zeros(target.shape, dtype=np.complex128)
        padded[before_r:before_r + rows, before_c:before_c + cols] = k.data
        return ComplexImage(grid=target, data=padded, domain="kspace", metadata=dict(k.metadata))
