# sequence_api.py

import logging
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np

from api.errors import ConfigurationError
from api.models import ComplexImage, EchoAmplitudes, GridSpec, SequenceParams, TissueMap, Vector2
from api.phantom_api import PhantomAPI
from presets.preset_configs import SE_REFERENCE_TES_MS

logger = logging.getLogger(__name__)


class SequenceAPI:
    """
    OLED signal synthesis: closed-form three-echo model, a rotation-matrix isochromat
    oracle for the echo prefactors, spin-echo references and calibrated noise.
    """

    def __init__(self):
        """Initialize the isochromat ensemble used by the oracle"""
        self.n_isochromats = 64
        # gradient moment (cycles across the voxel) applied in each free-precession interval;
        # powers of three keep every coherence pathway on its own harmonic
        self.interval_moments = (1, 3, 9)
        # harmonic carrying each echo at readout for the moments above
        self.pathway_orders = {"first": 6, "second": 5, "double": 7}
        self.se_tes_ms = list(SE_REFERENCE_TES_MS)

    def _validate_angles(self, alpha_deg: float, beta_deg: float):
        if not 0.0 < alpha_deg <= 180.0:
            raise ConfigurationError(f"alpha_deg must lie in (0, 180], got {alpha_deg}")
        # beta = 0 is the no-refocusing limit and stays accepted
        if not 0.0 <= beta_deg <= 180.0:
            raise ConfigurationError(f"beta_deg must lie in [0, 180], got {beta_deg}")

    def echo_amplitudes(self, alpha_deg: float, beta_deg: float) -> EchoAmplitudes:
        """Prefactors of the first spin echo, second spin echo and double spin echo"""
        self._validate_angles(alpha_deg, beta_deg)
        sa, ca = np.sin(np.radians(alpha_deg)), np.cos(np.radians(alpha_deg))
        refocus = 1.0 - np.cos(np.radians(beta_deg))
        return EchoAmplitudes(
            a1=float(0.5 * abs(sa * ca) * refocus),
            a2=float(0.25 * abs(sa) * (1.0 + ca) * refocus),
            a3=float(0.25 * abs(sa) * (1.0 - ca) * refocus),
        )

    @staticmethod
    def _rotation_x(angle_deg: float) -> np.ndarray:
        c, s = np.cos(np.radians(angle_deg)), np.sin(np.radians(angle_deg))
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])

    def _free_precession(self, m: np.ndarray, moment: int, duration_ms: float, t2_ms: float) -> np.ndarray:
        """Gradient dephasing (rotation about z per isochromat) plus T2 decay; T1 is ignored"""
        phase = 2 * np.pi * moment * np.arange(self.n_isochromats) / self.n_isochromats
        c, s = np.cos(phase), np.sin(phase)
        decay = np.exp(-duration_ms / t2_ms)
        return np.stack([
            decay * (c * m[0] - s * m[1]),
            decay * (s * m[0] + c * m[1]),
            m[2],
        ])

    def simulate_isochromat(self, alpha_deg: float, beta_deg: float, te1_ms: float,
                            te2_ms: float, t2_ms: float) -> EchoAmplitudes:
        """
        Rotation-matrix simulation of one voxel: alpha, delay, alpha, delay, beta, delay.

        The second excitation is placed te2 - te1 after the first and the readout at te2,
        so the first spin echo spends te1 in the transverse plane and the other two spend te2.
        Each echo magnitude is divided by the decay it accumulated.
        """
        if t2_ms <= 0:
            raise ConfigurationError(f"t2_ms must be positive, got {t2_ms}")
        if te2_ms <= te1_ms or te1_ms <= 0:
            raise ConfigurationError("echo times must satisfy 0 < te1 < te2")
        self._validate_angles(alpha_deg, beta_deg)

        m1, m2, m3 = self.interval_moments
        m = np.zeros((3, self.n_isochromats))
        m[2] = 1.0

        m = self._rotation_x(alpha_deg) @ m
        m = self._free_precession(m, m1, te2_ms - te1_ms, t2_ms)
        m = self._rotation_x(alpha_deg) @ m
        m = self._free_precession(m, m2, te1_ms / 2, t2_ms)
        m = self._rotation_x(beta_deg) @ m
        m = self._free_precession(m, m3, te1_ms / 2, t2_ms)

        transverse = m[0] + 1j * m[1]
        n = np.arange(self.n_isochromats)

        def harmonic(order: int) -> float:
            basis = np.exp(-2j * np.pi * order * n / self.n_isochromats)
            return float(np.abs(np.mean(transverse * basis)))

        return EchoAmplitudes(
            a1=harmonic(self.pathway_orders["first"]) / np.exp(-te1_ms / t2_ms),
            a2=harmonic(self.pathway_orders["second"]) / np.exp(-te2_ms / t2_ms),
            a3=harmonic(self.pathway_orders["double"]) / np.exp(-te2_ms / t2_ms),
        )

    def default_shift_layout(self, grid: GridSpec) -> Tuple[Vector2, Vector2, Vector2]:
        params = SequenceParams.for_grid(grid)
        return params.shifts

    def phase_ramp(self, grid: GridSpec, shift_cyc: Sequence[float]) -> np.ndarray:
        """exp(i 2 pi k.r / FOV) on pixel coordinates centred at (rows // 2, cols // 2)"""
        x = np.arange(grid.cols) - grid.cols // 2
        y = np.arange(grid.rows) - grid.rows // 2
        phase = 2 * np.pi * (shift_cyc[0] * x[None, :] / grid.cols + shift_cyc[1] * y[:, None] / grid.rows)
        return np.exp(1j * phase)

    def _decay(self, tissue: TissueMap, te_ms: float) -> np.ndarray:
        """pd * exp(-te / T2), zero where there is no proton density"""
        weight = np.zeros(tissue.grid.shape)
        support = tissue.support
        weight[support] = tissue.pd[support] * np.exp(-te_ms / tissue.t2_ms[support])
        return weight

    def forward_oled(self, tissue: TissueMap, params: SequenceParams,
                     echoes: Sequence[int] = (1, 2, 3)) -> ComplexImage:
        """Noiseless composite of the three echoes, each carrying its own linear phase ramp.

        echoes selects a subset of pathways (1 = first spin echo, 2 = second, 3 = double echo).
        """
        amp = self.echo_amplitudes(params.alpha_deg, params.beta_deg)
        echo_tes = (params.te1_ms, params.te2_ms, params.te1_ms)  # double echo weighted at TE1

        data = np.zeros(tissue.grid.shape, dtype=np.complex128)
        for echo, (a, te, shift) in enumerate(zip(amp.as_tuple(), echo_tes, params.shifts), start=1):
            if echo not in echoes or a == 0.0:
                continue
            data += a * self._decay(tissue, te) * self.phase_ramp(tissue.grid, shift)

        return ComplexImage(grid=tissue.grid, data=data, domain="image",
                            metadata={"sequence": params.model_dump(mode="json")})

    def forward_se(self, tissue: TissueMap, te_ms: float, grid: Optional[GridSpec] = None) -> ComplexImage:
        """Real-valued spin-echo image pd * exp(-te / T2)"""
        if te_ms <= 0:
            raise ConfigurationError(f"te_ms must be positive, got {te_ms}")
        if grid is not None and grid != tissue.grid:
            tissue = PhantomAPI().downsample(tissue, grid)
        data = self._decay(tissue, te_ms).astype(np.complex128)
        return ComplexImage(grid=tissue.grid, data=data, domain="image", metadata={"te_ms": te_ms})

    def se_reference_t2(self, tissue: TissueMap, tes_ms: Optional[List[float]] = None) -> np.ndarray:
        """Log-linear least-squares T2 fit over simulated spin-echo images"""
        tes = np.asarray(tes_ms or self.se_tes_ms, dtype=float)
        support = tissue.support
        log_signal = np.stack([np.log(np.abs(self.forward_se(tissue, te).data[support])) for te in tes])

        te_centered = tes - tes.mean()
        slope = (te_centered[:, None] * (log_signal - log_signal.mean(axis=0))).sum(axis=0) / (te_centered ** 2).sum()
        t2 = np.zeros(tissue.grid.shape)
        with np.errstate(divide="ignore"):
            t2[support] = np.where(slope < 0, -1.0 / slope, 0.0)
        return t2

    def add_noise(self, img: ComplexImage, snr_db: Optional[float], seed: int) -> ComplexImage:
        """
        Circular complex Gaussian noise at SNR = 20 lg(mu_s / delta_n).

        mu_s is the mean magnitude over pixels with nonzero signal; delta_n is the std of each
        of the real and imaginary components. snr_db of None (or +inf) returns a copy.
        """
        if img.domain != "image":
            raise ConfigurationError("noise is added in the image domain")
        if snr_db is None or np.isposinf(snr_db):
            return img.with_data(img.data.copy())
        if not np.isfinite(snr_db):
            raise ConfigurationError(f"snr_db must be finite, got {snr_db}")

        magnitude = np.abs(img.data)
        support = magnitude > 0
        if not support.any():
            raise ConfigurationError("cannot calibrate noise on a zero-signal image")
        mu_s = magnitude[support].mean()
        delta_n = mu_s / 10 ** (snr_db / 20)

        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(img.grid.shape) + 1j * rng.standard_normal(img.grid.shape)
        logger.debug(f"Noise at {snr_db:.1f} dB: mu_s={mu_s:.4g}, delta_n={delta_n:.4g}")
        return img.with_data(img.data + delta_n * noise, snr_db=snr_db, noise_std=float(delta_n))

    def measure_snr_db(self, clean: ComplexImage, noisy: ComplexImage) -> float:
        """Re-estimate the SNR from the residual noisy - clean"""
        residual = noisy.data - clean.data
        delta_hat = np.sqrt(np.mean(residual.real ** 2 + residual.imag ** 2) / 2)
        magnitude = np.abs(clean.data)
        mu_s = magnitude[magnitude > 0].mean()
        return float(20 * np.log10(mu_s / delta_hat))

    def jitter_shifts(self, params: SequenceParams, jitter_frac: float,
                      rng: np.random.Generator) -> Tuple[SequenceParams, List[float]]:
        """Scale every shift component by (1 + u), u ~ U(-jitter_frac, jitter_frac)"""
        factors = 1.0 + rng.uniform(-jitter_frac, jitter_frac, size=(3, 2))
        shifts = np.asarray(params.shifts) * factors
        jittered = params.model_copy(update={
            "shift1_cyc": tuple(shifts[0]),
            "shift2_cyc": tuple(shifts[1]),
            "shift3_cyc": tuple(shifts[2]),
        })
        return jittered, factors.ravel().tolist()

    def perturb_shifts(self, params: SequenceParams, fraction: float,
                       direction: Literal["frequency", "both"] = "both") -> SequenceParams:
        """Non-ideal echo-shifting gradients: scale the x (and optionally y) components"""
        if direction not in ("frequency", "both"):
            raise ConfigurationError(f"unknown perturbation direction: {direction}")
        scale = np.array([1.0 + fraction, 1.0 + fraction if direction == "both" else 1.0])
        shifts = np.asarray(params.shifts) * scale
        return params.model_copy(update={
            "shift1_cyc": tuple(shifts[0]),
            "shift2_cyc": tuple(shifts[1]),
            "shift3_cyc": tuple(shifts[2]),
        })
