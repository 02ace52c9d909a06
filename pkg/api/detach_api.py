# detach_api.py

import logging
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage

from api.errors import ConfigurationError
from api.kspace_api import KSpaceAPI
from api.models import ComplexImage, DetachParams, DetachResult, EchoAmplitudes, SequenceParams
from api.sequence_api import SequenceAPI

logger = logging.getLogger(__name__)

# dual variables: (x1, x2, x1 - kappa x2) terms, each with an x and a y component
Duals = List[np.ndarray]


class DetachAPI:
    """
    Echo-detachment baseline.

    Minimises
        |x0 - x1 e^{i phi1} - x2 e^{i phi2}|^2
        + l1 |M grad x1|_1 + l2 |M grad x2|_1 + l3 |M grad (x1 - kappa x2)|_1
    over the demodulated echo images with a first-order primal-dual scheme, then maps
    the separated magnitudes to T2.
    """

    def __init__(self):
        """Initialize solver constants"""
        self.edge_blur_px = 1.5       # smoothing of |x0| before the edge gradient
        self.inner_iters = 5          # primal-dual steps between energy evaluations
        self.kappa_bounds = (0.1, 10.0)
        self.support_floor = 1e-3     # joint-support floor for kappa, relative to each peak
        self.t2_bounds_ms = (1.0, 5000.0)
        self.kspace_api = KSpaceAPI()
        self.sequence_api = SequenceAPI()

    def _validate_image(self, x0: ComplexImage):
        if x0.domain != "image":
            raise ConfigurationError("echo detachment works on image-domain data")

    @staticmethod
    def _gradient(u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Forward differences, zero on the last row/column (Neumann boundary)"""
        gx = np.zeros_like(u)
        gy = np.zeros_like(u)
        gx[:, :-1] = u[:, 1:] - u[:, :-1]
        gy[:-1, :] = u[1:, :] - u[:-1, :]
        return gx, gy

    @staticmethod
    def _gradient_adjoint(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
        out = np.zeros_like(gx)
        out[:, :-1] -= gx[:, :-1]
        out[:, 1:] += gx[:, :-1]
        out[:-1, :] -= gy[:-1, :]
        out[1:, :] += gy[:-1, :]
        return out

    def _weighted_tv(self, u: np.ndarray, weight: np.ndarray) -> float:
        gx, gy = self._gradient(u)
        return float(np.sum(weight * (np.abs(gx) + np.abs(gy))))

    def edge_weight_matrix(self, x0: ComplexImage, edge_sigma: float) -> np.ndarray:
        """
        M = 1 / (1 + |grad s| / edge_sigma) with s a small Gaussian blur of |x0|.

        edge_sigma is in the intensity units of x0. The blur also suppresses the
        checkerboard beat of the two overlapped echoes.
        """
        self._validate_image(x0)
        if edge_sigma <= 0:
            raise ConfigurationError(f"edge_sigma must be positive, got {edge_sigma}")
        smooth = ndimage.gaussian_filter(x0.magnitude(), self.edge_blur_px, mode="nearest")
        gx, gy = self._gradient(smooth)
        return 1.0 / (1.0 + np.hypot(gx, gy) / edge_sigma)

    def kappa_estimate(self, x1: ComplexImage, x2: ComplexImage) -> float:
        """median(|x1|) / median(|x2|) over pixels where both echoes carry signal"""
        m1, m2 = x1.magnitude(), x2.magnitude()
        if m1.max() == 0 or m2.max() == 0:
            raise ConfigurationError("kappa needs nonzero signal in both echoes")
        support = (m1 > self.support_floor * m1.max()) & (m2 > self.support_floor * m2.max())
        if not support.any():
            raise ConfigurationError("echo images have no joint support")
        return float(np.median(m1[support]) / np.median(m2[support]))

    def detach_energy(self, x0: np.ndarray, x1: np.ndarray, x2: np.ndarray, ramps: Tuple[np.ndarray, np.ndarray],
                      lambdas: Tuple[float, float, float], weight: np.ndarray, kappa: float) -> float:
        """Objective value; lambdas here are absolute (already multiplied by the intensity scale)"""
        residual = x0 - x1 * ramps[0] - x2 * ramps[1]
        energy = float(np.sum(residual.real ** 2 + residual.imag ** 2))
        energy += lambdas[0] * self._weighted_tv(x1, weight)
        energy += lambdas[1] * self._weighted_tv(x2, weight)
        energy += lambdas[2] * self._weighted_tv(x1 - kappa * x2, weight)
        return energy

    @staticmethod
    def _step_size(kappa: float) -> float:
        # |K|^2 <= 8 * lambda_max([[2, -k], [-k, 1 + k^2]]) for forward differences
        gram = np.array([[2.0, -kappa], [-kappa, 1.0 + kappa ** 2]])
        return 1.0 / np.sqrt(8.0 * np.linalg.eigvalsh(gram).max())

    @staticmethod
    def _project(p: np.ndarray, radius: np.ndarray) -> np.ndarray:
        """Pixelwise projection onto complex disks |p| <= radius"""
        magnitude = np.abs(p)
        scale = np.where(magnitude > radius, radius / np.maximum(magnitude, 1e-300), 1.0)
        return p * scale

    def _data_prox(self, v1: np.ndarray, v2: np.ndarray, x0: np.ndarray,
                   ramps: Tuple[np.ndarray, np.ndarray], tau: float) -> Tuple[np.ndarray, np.ndarray]:
        """Closed-form prox of tau * |x0 - a^T z|^2 per pixel, a = (ramp1, ramp2), |a|^2 = 2"""
        c = 2.0 * tau
        w1 = v1 + c * np.conj(ramps[0]) * x0
        w2 = v2 + c * np.conj(ramps[1]) * x0
        projected = (ramps[0] * w1 + ramps[1] * w2) * (c / (1.0 + 2.0 * c))
        return w1 - np.conj(ramps[0]) * projected, w2 - np.conj(ramps[1]) * projected

    def _initial_kappa(self, x1: ComplexImage, x2: ComplexImage, dp: DetachParams) -> float:
        if dp.kappa_mode == "fixed":
            return dp.kappa
        try:
            return float(np.clip(self.kappa_estimate(x1, x2), *self.kappa_bounds))
        except ConfigurationError:
            logger.warning(f"Median-ratio kappa unavailable on the warm start, using kappa={dp.kappa}")
            return dp.kappa

    def detach_echoes(self, x0: ComplexImage, params: SequenceParams, dp: DetachParams) -> DetachResult:
        """
        Separate the overlapped echoes of a double-echo-removed OLED image.

        Args:
            x0: image-domain OLED data after remove_double_echo
            params: sequence that produced x0 (echo shifts, angles, echo times)
            dp: solver weights and stopping rules

        Returns:
            DetachResult with demodulated x1, x2, the non-increasing objective trace and the T2 map
        """
        self._validate_image(x0)
        grid = x0.grid
        data = x0.data.astype(np.complex128)
        scale = float(np.abs(data).max())
        if scale == 0:
            raise ConfigurationError("x0 carries no signal")

        ramps = (self.sequence_api.phase_ramp(grid, params.shift1_cyc),
                 self.sequence_api.phase_ramp(grid, params.shift2_cyc))
        lambdas = (dp.lambda1 * scale, dp.lambda2 * scale, dp.lambda3 * scale)
        weight = self.edge_weight_matrix(x0, dp.edge_sigma * scale)
        radii = [lam * weight for lam in lambdas]

        start1, start2 = self.kspace_api.windowed_split(x0, params, dp.echo_sigma_cyc)
        kappa = self._initial_kappa(start1, start2, dp)
        z1, z2 = start1.data.copy(), start2.data.copy()
        z1_bar, z2_bar = z1.copy(), z2.copy()
        duals: Duals = [np.zeros_like(data) for _ in range(6)]
        step = self._step_size(kappa)

        energy = self.detach_energy(data, z1, z2, ramps, lambdas, weight, kappa)
        best = (z1.copy(), z2.copy())
        best_energy = previous = energy
        trace = [energy]
        converged = False
        iteration = 0

        for iteration in range(1, dp.max_outer_iters + 1):
            for _ in range(self.inner_iters):
                gradients = (*self._gradient(z1_bar), *self._gradient(z2_bar),
                             *self._gradient(z1_bar - kappa * z2_bar))
                duals = [self._project(p + step * g, radii[i // 2]) for i, (p, g) in enumerate(zip(duals, gradients))]

                adj1 = self._gradient_adjoint(duals[0], duals[1])
                adj2 = self._gradient_adjoint(duals[2], duals[3])
                adj3 = self._gradient_adjoint(duals[4], duals[5])
                n1, n2 = self._data_prox(z1 - step * (adj1 + adj3), z2 - step * (adj2 - kappa * adj3),
                                         data, ramps, step)
                z1_bar, z2_bar = 2 * n1 - z1, 2 * n2 - z2
                z1, z2 = n1, n2

            energy = self.detach_energy(data, z1, z2, ramps, lambdas, weight, kappa)
            change = abs(previous - energy) / max(abs(previous), np.finfo(float).tiny)
            previous = energy
            if energy < best_energy:
                best, best_energy = (z1.copy(), z2.copy()), energy

            if dp.kappa_mode == "median_ratio":
                kappa, best_energy, step = self._refresh_kappa(data, best, ramps, lambdas, weight,
                                                               kappa, best_energy, step, grid, x0)
            trace.append(best_energy)

            if change < dp.tol:
                converged = True
                break

        if not converged:
            logger.warning(f"Echo detachment stopped at max_outer_iters={dp.max_outer_iters} without converging")
        logger.info(f"Echo detachment: {iteration} outer iterations, energy {trace[0]:.4g} -> {trace[-1]:.4g}, kappa={kappa:.3f}")

        x1 = x0.with_data(best[0], detached_echo=1)
        x2 = x0.with_data(best[1], detached_echo=2)
        amp = self.sequence_api.echo_amplitudes(params.alpha_deg, params.beta_deg)
        t2, mask = self.t2_from_echoes(x1, x2, amp, params.te1_ms, params.te2_ms, dp.pd_threshold)
        return DetachResult(x1=x1, x2=x2, objective_trace=trace, t2_ms=t2, mask=mask,
                            converged=converged, kappa=kappa, iterations=iteration)

    def _refresh_kappa(self, data, best, ramps, lambdas, weight, kappa, best_energy, step, grid, x0):
        """Median-ratio kappa on the incumbent, kept only if it does not raise the incumbent energy"""
        try:
            candidate = self.kappa_estimate(x0.with_data(best[0]), x0.with_data(best[1]))
        except ConfigurationError:
            return kappa, best_energy, step
        candidate = float(np.clip(candidate, *self.kappa_bounds))
        energy = self.detach_energy(data, best[0], best[1], ramps, lambdas, weight, candidate)
        if energy <= best_energy:
            return candidate, energy, self._step_size(candidate)
        return kappa, best_energy, step

    def t2_from_echoes(self, x1: ComplexImage, x2: ComplexImage, amp: EchoAmplitudes,
                       te1_ms: float, te2_ms: float, pd_threshold: float) -> Tuple[np.ndarray, np.ndarray]:
        """
        T2 = (te2 - te1) / ln[(|x1| / a1) / (|x2| / a2)] on pixels above pd_threshold * max|x1|.

        Pixels whose ratio is not a finite value above 1 are excluded from the mask and left at 0.
        """
        if te2_ms <= te1_ms:
            raise ConfigurationError("te2_ms must be greater than te1_ms")
        if amp.a1 <= 0 or amp.a2 <= 0:
            raise ConfigurationError(f"echo amplitudes must be positive, got {amp}")

        m1, m2 = x1.magnitude(), x2.magnitude()
        computed = (m1 > pd_threshold * m1.max()) & (m2 > 0)
        ratio = np.zeros(x1.grid.shape)
        np.divide(m1 * amp.a2, m2 * amp.a1, out=ratio, where=computed)
        mask = computed & np.isfinite(ratio) & (ratio > 1.0)

        t2 = np.zeros(x1.grid.shape)
        t2[mask] = np.clip((te2_ms - te1_ms) / np.log(ratio[mask]), *self.t2_bounds_ms)
        return t2, mask

    def write_trace(self, result: DetachResult, path: str) -> str:
        """Objective trace as CSV (iteration, energy)"""
        frame = pd.DataFrame({
            "iteration": np.arange(len(result.objective_trace)),
            "energy": result.objective_trace,
        })
        frame.to_csv(path, index=False)
        return path

    def reconstruct(self, x0: ComplexImage, params: SequenceParams, dp: Optional[DetachParams] = None) -> DetachResult:
        """remove_double_echo followed by detach_echoes, for raw three-echo images"""
        dp = dp or DetachParams()
        cleaned = x0 if x0.metadata.get("double_echo_removed") else \
            self.kspace_api.remove_double_echo(x0, params, dp.echo_sigma_cyc)
        return self.detach_echoes(cleaned, params, dp)
