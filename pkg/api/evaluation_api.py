# evaluation_api.py

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage

from api.errors import ConfigurationError, ShapeError
from api.models import GridSpec, RoiSpec
from presets.preset_configs import EVALUATION_ROIS

logger = logging.getLogger(__name__)


class EvaluationAPI:
    """
    ROI statistics, T2 error reports and profile traces.
    Standard deviations are population (ddof = 0) values; a pixel belongs to a ROI when its
    centre lies within the radius.
    """

    def __init__(self):
        """Initialize report defaults"""
        self.interior_erosion_px = 2
        self.circle_samples = 360
        self.roi_table = EVALUATION_ROIS

    def _validate_same_grid(self, *rasters: np.ndarray):
        shapes = {r.shape for r in rasters}
        if len(shapes) != 1:
            raise ShapeError(f"rasters must share one grid, got {sorted(shapes)}")

    def _roi_mask(self, shape: Tuple[int, int], roi: RoiSpec) -> np.ndarray:
        rows, cols = np.ogrid[:shape[0], :shape[1]]
        cx, cy = roi.center_px
        return (cols - cx) ** 2 + (rows - cy) ** 2 <= roi.radius_px ** 2

    def default_rois(self, grid: GridSpec) -> List[RoiSpec]:
        """The fifteen brain-phantom ROIs in pixel coordinates of `grid`"""
        rois = []
        for entry in self.roi_table:
            u, v = entry["center"]
            # inverse of the phantom's pixel-centre normalisation
            x = u * grid.cols / 2 + grid.cols / 2 - 0.5
            y = v * grid.rows / 2 + grid.rows / 2 - 0.5
            radius = max(1.0, entry["radius"] * min(grid.rows, grid.cols) / 2)
            rois.append(RoiSpec(id=entry["id"], center_px=(x, y), radius_px=radius))
        return rois

    def roi_stats(self, t2: np.ndarray, mask: np.ndarray, rois: Sequence[RoiSpec]) -> List[Dict[str, Any]]:
        """Mean, population std and pixel count of masked T2 inside each circle"""
        self._validate_same_grid(t2, mask)
        rows = []
        for roi in rois:
            values = t2[self._roi_mask(t2.shape, roi) & mask]
            if values.size == 0:
                rows.append({"id": roi.id, "mean_ms": float("nan"), "std_ms": float("nan"), "n": 0})
                continue
            rows.append({"id": roi.id, "mean_ms": float(values.mean()), "std_ms": float(values.std()),
                         "n": int(values.size)})
        return rows

    def mask_interior(self, mask: np.ndarray, erosion_px: Optional[int] = None) -> np.ndarray:
        """Binary erosion that drops partial-volume pixels at region borders"""
        erosion = self.interior_erosion_px if erosion_px is None else erosion_px
        if erosion <= 0:
            return mask.copy()
        return ndimage.binary_erosion(mask, iterations=erosion)

    def t2_error_report(self, est: np.ndarray, ref: np.ndarray, mask: np.ndarray,
                        rois: Optional[Sequence[RoiSpec]] = None) -> Dict[str, Any]:
        """
        Relative and absolute T2 errors over mask, plus the worst ROI deviation.

        Returns:
            dict with median/mean relative error, RMSE (ms), the per-pixel error map
            (est - ref, zero off-mask) and, when ROIs are given, the ROI table and
            worst deviation in ms and percent
        """
        self._validate_same_grid(est, ref, mask)
        valid = mask & (ref > 0)
        if not valid.any():
            raise ConfigurationError("error report needs at least one masked pixel with positive reference T2")

        error = est[valid] - ref[valid]
        relative = np.abs(error) / ref[valid]
        error_map = np.zeros_like(est, dtype=float)
        error_map[valid] = error

        report: Dict[str, Any] = {
            "n_pixels": int(valid.sum()),
            "median_rel_error": float(np.median(relative)),
            "mean_rel_error": float(np.mean(relative)),
            "rmse_ms": float(np.sqrt(np.mean(error ** 2))),
            "error_map": error_map,
            "std_convention": "population (ddof=0)",
        }

        if rois:
            est_rows = self.roi_stats(est, valid, rois)
            ref_rows = self.roi_stats(ref, valid, rois)
            table = []
            for e, r in zip(est_rows, ref_rows):
                deviation = e["mean_ms"] - r["mean_ms"]
                table.append({"id": e["id"], "n": e["n"], "est_mean_ms": e["mean_ms"], "est_std_ms": e["std_ms"],
                              "ref_mean_ms": r["mean_ms"], "deviation_ms": deviation,
                              "deviation_pct": 100.0 * deviation / r["mean_ms"] if r["n"] else float("nan")})
            report["roi_table"] = table
            scored = [row for row in table if row["n"] > 0]
            if scored:
                worst = max(scored, key=lambda row: abs(row["deviation_pct"]))
                report["worst_roi"] = {"id": worst["id"], "deviation_ms": abs(worst["deviation_ms"]),
                                       "deviation_pct": abs(worst["deviation_pct"])}
        return report

    def add_se_reference(self, report: Dict[str, Any], est: np.ndarray, se_ref: np.ndarray, mask: np.ndarray,
                         rois: Optional[Sequence[RoiSpec]] = None) -> Dict[str, Any]:
        """Score the estimate against a spin-echo fit too: median error plus per-ROI columns"""
        self._validate_same_grid(est, se_ref, mask)
        valid = mask & (se_ref > 0)
        if valid.any():
            relative = np.abs(est[valid] - se_ref[valid]) / se_ref[valid]
            report["se_median_rel_error"] = float(np.median(relative))
        if rois and "roi_table" in report:
            for row, se in zip(report["roi_table"], self.roi_stats(se_ref, valid, rois)):
                row["se_mean_ms"] = se["mean_ms"]
                row["se_deviation_pct"] = (100.0 * (row["est_mean_ms"] - se["mean_ms"]) / se["mean_ms"]
                                           if se["n"] else float("nan"))
        return report

    def circle_path(self, center: Sequence[float], radius: float, n: Optional[int] = None) -> np.ndarray:
        """
        Closed anticlockwise (as displayed, rows growing downwards) circle from the 3 o'clock position.

        Returns (n + 1, 2) pixel coordinates (x = column, y = row); the last point repeats the first.
        """
        n = n or self.circle_samples
        angles = 2 * np.pi * np.arange(n + 1) / n
        x = center[0] + radius * np.cos(angles)
        y = center[1] - radius * np.sin(angles)
        path = np.stack([x, y], axis=1)
        path[-1] = path[0]
        return path

    def profile_trace(self, t2: np.ndarray, path: np.ndarray) -> pd.DataFrame:
        """Bilinear samples of T2 along a pixel path, with cumulative arc length"""
        path = np.asarray(path, dtype=float)
        rows, cols = t2.shape
        x, y = path[:, 0], path[:, 1]
        if np.any(x < 0) or np.any(x > cols - 1) or np.any(y < 0) or np.any(y > rows - 1):
            raise ConfigurationError("profile path leaves the raster")
        values = ndimage.map_coordinates(t2.astype(float), [y, x], order=1, mode="nearest")
        steps = np.hypot(np.diff(x), np.diff(y))
        arc = np.concatenate([[0.0], np.cumsum(steps)])
        return pd.DataFrame({"arc_px": arc, "t2_ms": values})

    def write_report(self, report: Dict[str, Any], out_dir: str, stem: str = "report") -> Dict[str, str]:
        """JSON summary plus CSV tables; raster fields are written as .npy next to them"""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written: Dict[str, str] = {}
        summary: Dict[str, Any] = {}
        for key, value in report.items():
            if isinstance(value, np.ndarray):
                path = out / f"{stem}_{key}.npy"
                np.save(path, value)
                written[key] = str(path)
            elif isinstance(value, list) and value and isinstance(value[0], dict):
                path = out / f"{stem}_{key}.csv"
                pd.DataFrame(value).to_csv(path, index=False)
                written[key] = str(path)
                summary[key] = value
            else:
                summary[key] = value

        summary_path = out / f"{stem}.json"
        summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
        written["summary"] = str(summary_path)
        logger.info(f"Report '{stem}' written to {out}")
        return written
