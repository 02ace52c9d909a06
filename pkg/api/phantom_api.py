# phantom_api.py

import logging
from typing import Tuple

import numpy as np
from scipy import ndimage
from skimage.draw import ellipse, polygon

from api.errors import ConfigurationError, ShapeError
from api.models import GridSpec, RandomTemplateSpec, TissueMap
from presets.preset_configs import BRAIN_PHANTOM

logger = logging.getLogger(__name__)


class PhantomAPI:
    """
    Tissue phantoms that supply T2 and proton-density ground truth.
    Random templates feed training; the layered brain phantom is the fixed evaluation object.
    """

    def __init__(self):
        """Initialize shape-size limits and the brain class table"""
        self.min_axis_frac = 0.04   # semi-axis limits as a fraction of the smaller grid side
        self.max_axis_frac = 0.35
        self.polygon_probability = 0.4
        self.polygon_vertices = (3, 8)
        self.support_floor = 1e-3   # smoothed pd below this becomes background
        self.classes = BRAIN_PHANTOM["classes"]
        self.layers = BRAIN_PHANTOM["layers"]

    def _validate_grid(self, grid: GridSpec):
        if grid.rows < 8 or grid.cols < 8:
            raise ConfigurationError(f"grid must be at least 8x8, got {grid.shape}")

    def _validate_spec(self, spec: RandomTemplateSpec):
        for name in ("t2_range_ms", "csf_t2_range_ms", "pd_range", "n_shapes"):
            low, high = getattr(spec, name)
            if low > high:
                raise ConfigurationError(f"{name} is empty: {low} > {high}")
        if spec.n_shapes[0] < 1:
            raise ConfigurationError("n_shapes must be at least 1")

    def _normalised_coords(self, grid: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
        """Pixel-centre coordinates u (columns) and v (rows) spanning [-1, 1]"""
        u = (np.arange(grid.cols) - grid.cols / 2 + 0.5) / (grid.cols / 2)
        v = (np.arange(grid.rows) - grid.rows / 2 + 0.5) / (grid.rows / 2)
        return np.meshgrid(u, v)

    def _draw_shape(self, rng: np.random.Generator, grid: GridSpec, allow_polygon: bool = True):
        rows, cols = grid.shape
        side = min(rows, cols)
        center_r = rng.uniform(0, rows)
        center_c = rng.uniform(0, cols)
        radius_r = rng.uniform(self.min_axis_frac, self.max_axis_frac) * side
        radius_c = rng.uniform(self.min_axis_frac, self.max_axis_frac) * side

        if allow_polygon and rng.uniform() < self.polygon_probability:
            # vertices on an ellipse in angular order give a convex polygon
            n_vertices = rng.integers(self.polygon_vertices[0], self.polygon_vertices[1] + 1)
            angles = np.sort(rng.uniform(0, 2 * np.pi, size=n_vertices))
            rr = center_r + radius_r * np.sin(angles)
            cc = center_c + radius_c * np.cos(angles)
            return polygon(rr, cc, shape=grid.shape)

        rotation = rng.uniform(-np.pi, np.pi)
        return ellipse(center_r, center_c, radius_r, radius_c, shape=grid.shape, rotation=rotation)

    def make_random_phantom(self, spec: RandomTemplateSpec, grid: GridSpec) -> TissueMap:
        """
        Overlapping ellipses and convex polygons with piecewise-constant T2/PD.

        Args:
            spec: template recipe (seed, shape count, value ranges, smoothing)
            grid: output grid

        Returns:
            TissueMap, bit-identical for equal (spec, grid)
        """
        self._validate_grid(grid)
        self._validate_spec(spec)
        rng = np.random.default_rng(spec.seed)

        t2 = np.zeros(grid.shape)
        pd = np.zeros(grid.shape)
        n_shapes = int(rng.integers(spec.n_shapes[0], spec.n_shapes[1] + 1))
        for index in range(n_shapes):
            # the first shape is always an ellipse (the body outline)
            rr, cc = self._draw_shape(rng, grid, allow_polygon=index > 0)
            if rng.uniform() < spec.csf_fraction:
                t2_value = rng.uniform(*spec.csf_t2_range_ms)
            else:
                t2_value = rng.uniform(*spec.t2_range_ms)
            pd_value = rng.uniform(*spec.pd_range)
            t2[rr, cc] = t2_value
            pd[rr, cc] = pd_value

        if spec.smooth_sigma_px > 0:
            t2, pd = self._smooth_regions(t2, pd, spec.smooth_sigma_px)

        logger.debug(f"Random phantom seed={spec.seed}: {n_shapes} shapes on {grid.rows}x{grid.cols}")
        return TissueMap(grid=grid, t2_ms=t2, pd=pd)

    def _smooth_regions(self, t2: np.ndarray, pd: np.ndarray, sigma: float):
        """Partial-volume edges; T2 by pd-normalised convolution so it stays inside the drawn values"""
        pd_smooth = ndimage.gaussian_filter(pd, sigma, mode="constant")
        weighted = ndimage.gaussian_filter(pd * t2, sigma, mode="constant")
        weight = ndimage.gaussian_filter(pd, sigma, mode="constant")

        support = pd_smooth >= self.support_floor
        t2_smooth = np.zeros_like(t2)
        t2_smooth[support] = weighted[support] / weight[support]

        # convex combinations can exceed the original extrema by rounding only
        present = t2[pd > 0]
        if present.size:
            t2_smooth[support] = np.clip(t2_smooth[support], present.min(), present.max())
        pd_smooth[~support] = 0.0
        return t2_smooth, np.clip(pd_smooth, 0.0, 1.0)

    def tissue_classes(self, grid: GridSpec) -> np.ndarray:
        """Integer class label raster of the brain phantom (0 = background)"""
        self._validate_grid(grid)
        u, v = self._normalised_coords(grid)
        labels = np.zeros(grid.shape, dtype=np.int32)
        for layer in self.layers:
            cu, cv = layer["center"]
            au, av = layer["axes"]
            inside = ((u - cu) / au) ** 2 + ((v - cv) / av) ** 2 <= 1.0
            labels[inside] = layer["class"]
        return labels

    def make_brain_phantom(self, grid: GridSpec) -> TissueMap:
        """Fixed layered head phantom: background, skull-like ring, GM, WM and CSF pockets"""
        labels = self.tissue_classes(grid)
        t2 = np.zeros(grid.shape)
        pd = np.zeros(grid.shape)
        for label, tissue in self.classes.items():
            t2[labels == label] = tissue["t2_ms"]
            pd[labels == label] = tissue["pd"]
        return TissueMap(grid=grid, t2_ms=t2, pd=pd)

    def downsample(self, tissue: TissueMap, target: GridSpec) -> TissueMap:
        """Block average of pd and pd-weighted block average of T2"""
        rows, cols = tissue.grid.shape
        if rows % target.rows or cols % target.cols:
            raise ShapeError(f"target {target.shape} does not divide source {tissue.grid.shape}")
        fr, fc = rows // target.rows, cols // target.cols

        def block_sum(raster: np.ndarray) -> np.ndarray:
            return raster.reshape(target.rows, fr, target.cols, fc).sum(axis=(1, 3))

        pd_sum = block_sum(tissue.pd)
        weighted = block_sum(tissue.pd * tissue.t2_ms)
        t2 = np.zeros(target.shape)
        np.divide(weighted, pd_sum, out=t2, where=pd_sum > 0)
        return TissueMap(grid=target, t2_ms=t2, pd=pd_sum / (fr * fc))
