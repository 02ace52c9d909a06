# experiment_api.py

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from api.container_api import ContainerAPI
from api.detach_api import DetachAPI
from api.errors import CheckpointError, ConfigurationError
from api.evaluation_api import EvaluationAPI
from api.kspace_api import KSpaceAPI
from api.models import (BatchNormLayer, ComplexImage, DatasetManifest, ExperimentConfig, NetworkConfig,
                        SampleRecord, SequenceParams, TissueMap, TrainConfig)
from api.network_layers import (batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward,
                                gradient_check, mse_loss, relu_backward, relu_forward)
from api.phantom_api import PhantomAPI
from api.resnet_api import ResNetAPI
from api.sequence_api import SequenceAPI

logger = logging.getLogger(__name__)


def load_config(path: Optional[str] = None) -> ExperimentConfig:
    """Read one experiment TOML file; no path means all defaults"""
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, "rb") as handle:
            data = tomllib.load(handle)
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"config {path} is not valid TOML: {e}")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid config {path}: {e}")


def _error(e: Exception, message: str) -> Dict[str, Any]:
    return {"status": "error", "error": str(e), "error_type": type(e).__name__, "message": message}


def build_sample(cfg: ExperimentConfig, root_seed: int, index: int, jitter_frac: float,
                 out_dir: str) -> Dict[str, Any]:
    """
    Generate and write one training pair.

    Every random draw comes from default_rng(SeedSequence([root_seed, index])), so a sample
    does not depend on the worker that produced it or on the other samples.
    """
    phantom_api, sequence_api = PhantomAPI(), SequenceAPI()
    kspace_api, container_api = KSpaceAPI(), ContainerAPI()
    rng = np.random.default_rng(np.random.SeedSequence([root_seed, index]))

    phantom_seed = int(rng.integers(2 ** 31))
    template = cfg.phantom.model_copy(update={"seed": phantom_seed})
    tissue = phantom_api.downsample(phantom_api.make_random_phantom(template, cfg.model_grid), cfg.grid)

    params = cfg.sequence_params()
    jitter: List[float] = []
    if jitter_frac > 0:
        params, jitter = sequence_api.jitter_shifts(params, jitter_frac, rng)
    params = params.model_copy(update={"snr_db": cfg.dataset.snr_db})

    noise_seed = int(rng.integers(2 ** 31))
    img = sequence_api.add_noise(sequence_api.forward_oled(tissue, params), cfg.dataset.snr_db, noise_seed)
    img = kspace_api.remove_double_echo(img, params)
    img = img.with_data(img.data, sample_index=index, phantom_seed=phantom_seed, noise_seed=noise_seed)

    oled_name = f"sample_{index:04d}_oled.oimg"
    t2_name = f"sample_{index:04d}_t2.oimg"
    container_api.write_image(img, Path(out_dir) / oled_name)
    container_api.write_tissue_map(tissue, Path(out_dir) / t2_name, {"phantom_seed": phantom_seed})
    record = SampleRecord(index=index, oled_path=oled_name, t2_path=t2_name, seed=phantom_seed,
                          sequence=params, jitter=jitter)
    return record.model_dump(mode="json")


def _build_sample_star(args: Tuple) -> Dict[str, Any]:
    return build_sample(*args)


class ExperimentAPI:
    """
    Command layer: dataset generation, training, reconstruction, sweeps, evaluation and
    gradient checks. Every public method returns {"status": "success", ...} or an error dict.
    """

    def __init__(self):
        """Initialize the domain APIs and command defaults"""
        self.phantom_api = PhantomAPI()
        self.sequence_api = SequenceAPI()
        self.kspace_api = KSpaceAPI()
        self.detach_api = DetachAPI()
        self.resnet_api = ResNetAPI()
        self.evaluation_api = EvaluationAPI()
        self.container_api = ContainerAPI()
        self.gradcheck_tolerance = 1e-4

    # ---- dataset ----

    def _generate(self, cfg: ExperimentConfig, out_dir: str, jitter_frac: float) -> Path:
        """Write all samples plus the manifest and return the manifest path"""
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigurationError(f"output directory {out} is not writable: {e}")

        ds = cfg.dataset
        jobs = [(cfg, ds.seed, index, jitter_frac, str(out)) for index in range(ds.count)]
        if ds.workers > 1:
            with ProcessPoolExecutor(max_workers=ds.workers) as pool:
                records = list(pool.map(_build_sample_star, jobs))
        else:
            records = [_build_sample_star(job) for job in jobs]
        for record in records:
            logger.info(f"Sample {record['index']} written (phantom seed {record['seed']})")

        order = np.random.default_rng(np.random.SeedSequence([ds.seed])).permutation(ds.count)
        split = {"train": sorted(int(i) for i in order[:ds.n_train]),
                 "test": sorted(int(i) for i in order[ds.n_train:])}
        manifest = DatasetManifest(root_seed=ds.seed, samples=[SampleRecord(**r) for r in records], split=split)
        return self.container_api.write_manifest(manifest, out / "manifest.json")

    def gen_dataset(self, cfg: ExperimentConfig, out_dir: str, seed: Optional[int] = None,
                    jitter_frac: Optional[float] = None) -> Dict[str, Any]:
        """Random phantom -> jitter -> forward model -> noise -> double-echo removal, per sample"""
        try:
            if seed is not None:
                cfg = cfg.model_copy(update={"dataset": cfg.dataset.model_copy(update={"seed": seed})})
            jitter = cfg.dataset.jitter_frac if jitter_frac is None else jitter_frac
            manifest_path = self._generate(cfg, out_dir, jitter)
            logger.info(f"Dataset of {cfg.dataset.count} samples written to {out_dir}")
            return {"status": "success", "manifest": str(manifest_path), "count": cfg.dataset.count,
                    "jitter_frac": jitter, "message": "dataset generated"}
        except Exception as e:
            logger.error(f"Dataset generation failed: {e}")
            return _error(e, "dataset generation failed")

    # ---- training ----

    def train(self, cfg: ExperimentConfig, manifest_path: str, out_dir: str,
              seed: Optional[int] = None) -> Dict[str, Any]:
        """Train on the manifest's train split, validate on its test split"""
        try:
            train_cfg = cfg.train if seed is None else cfg.train.model_copy(update={"seed": seed})
            ckpt_path, ckpt = self._train_model(cfg.network, train_cfg, manifest_path, out_dir)
            return {"status": "success", "checkpoint": str(ckpt_path), "log": str(Path(out_dir) / "training_log.csv"),
                    "initial_val_loss": ckpt.metadata.get("initial_val_loss"),
                    "final_val_loss": ckpt.metadata.get("final_val_loss"),
                    "message": f"trained for {ckpt.iteration} iterations"}
        except Exception as e:
            logger.error(f"Training failed: {e}")
            return _error(e, "training failed")

    def _train_model(self, net_cfg: NetworkConfig, train_cfg: TrainConfig, manifest_path: str, out_dir: str):
        train_pairs = self.container_api.load_training_pairs(manifest_path, "train")
        val_pairs = self.container_api.load_training_pairs(manifest_path, "test")
        ckpt = self.resnet_api.train(train_pairs, net_cfg, train_cfg, val_dataset=val_pairs, out_dir=out_dir,
                                     log_path=str(Path(out_dir) / "training_log.csv"))
        return Path(out_dir) / "checkpoint_final.olnc", ckpt

    # ---- reconstruction ----

    @staticmethod
    def _timed(fn: Callable[[], Any], runs: int, warmup: int) -> Tuple[Any, float, List[float]]:
        """Median wall-clock seconds over `runs` calls after `warmup` discarded calls"""
        for _ in range(warmup):
            fn()
        times, result = [], None
        for _ in range(runs):
            start = time.perf_counter()
            result = fn()
            times.append(time.perf_counter() - start)
        return result, float(np.median(times)), times

    def _sequence_of(self, img: ComplexImage, cfg: ExperimentConfig) -> SequenceParams:
        stored = img.metadata.get("sequence")
        if stored:
            return SequenceParams.model_validate(stored)
        return cfg.sequence_params(img.grid)

    def reconstruct_t2(self, img: ComplexImage, params: SequenceParams, method: str, cfg: ExperimentConfig,
                       ckpt=None) -> Tuple[np.ndarray, Dict[str, Any], Any]:
        """One pass of the selected pipeline on a double-echo-removed image, with timing"""
        timing = cfg.timing
        if method == "detach":
            result, seconds, runs = self._timed(lambda: self.detach_api.detach_echoes(img, params, cfg.detach),
                                                timing.runs, timing.warmup)
            if not result.converged:
                logger.warning("Echo detachment flagged as not converged")
            info = {"converged": result.converged, "iterations": result.iterations, "kappa": result.kappa}
            return result.t2_ms, {"median_ms": 1e3 * seconds, "runs_ms": [1e3 * t for t in runs], **info}, result
        if method == "network":
            if ckpt is None:
                raise CheckpointError("the network method needs a checkpoint")
            ev = cfg.evaluation
            t2, seconds, runs = self._timed(
                lambda: self.resnet_api.infer_t2(img, ckpt, ev.guided_filter, ev.guided_radius, ev.guided_eps),
                timing.runs, timing.warmup)
            return t2, {"median_ms": 1e3 * seconds, "runs_ms": [1e3 * t for t in runs]}, None
        raise ConfigurationError(f"unknown reconstruction method: {method}")

    def _load_matching_checkpoint(self, cfg: ExperimentConfig, checkpoint_path: Optional[str]):
        if checkpoint_path is None:
            raise CheckpointError("the network method needs --checkpoint")
        ckpt = self.container_api.load_checkpoint(checkpoint_path)
        if ckpt.config != cfg.network:
            raise CheckpointError(f"checkpoint network {ckpt.config.model_dump()} does not match "
                                  f"config network {cfg.network.model_dump()}")
        return ckpt

    def upsample_to_recon_grid(self, img: ComplexImage, cfg: ExperimentConfig) -> ComplexImage:
        """Sinc interpolation onto cfg.recon_grid (same FOV); shifts in cycles/FOV stay valid"""
        if cfg.recon_grid is None or cfg.recon_grid.shape == img.grid.shape:
            return img
        target = img.grid.resized(cfg.recon_grid.rows, cfg.recon_grid.cols)
        padded = self.kspace_api.zero_pad(self.kspace_api.fft2_centered(img), target)
        logger.info(f"Zero-padding {img.grid.rows}x{img.grid.cols} k-space to {target.rows}x{target.cols}")
        return self.kspace_api.ifft2_centered(padded)

    def reconstruct(self, cfg: ExperimentConfig, input_path: str, method: str, out_path: str,
                    checkpoint_path: Optional[str] = None) -> Dict[str, Any]:
        """T2 raster (OIMG) plus a JSON report with the median reconstruction time"""
        try:
            img = self.container_api.read_image(input_path)
            params = self._sequence_of(img, cfg)
            if not img.metadata.get("double_echo_removed"):
                img = self.kspace_api.remove_double_echo(img, params, cfg.detach.echo_sigma_cyc)
            img = self.upsample_to_recon_grid(img, cfg)
            ckpt = self._load_matching_checkpoint(cfg, checkpoint_path) if method == "network" else None

            t2, timing, result = self.reconstruct_t2(img, params, method, cfg, ckpt)
            out = Path(out_path)
            self.container_api.write_raster(t2, img.grid, out, {"method": method, "source": str(input_path)})
            report = {"method": method, "input": str(input_path), "output": str(out), "timing": timing}
            if result is not None:
                report["trace"] = self.detach_api.write_trace(result, str(out.with_suffix(".trace.csv")))
            self.evaluation_api.write_report(report, str(out.parent), out.stem)
            logger.info(f"Reconstruction ({method}) took {timing['median_ms']:.1f} ms (median)")
            return {"status": "success", "output": str(out), "timing": timing, "message": f"{method} reconstruction done"}
        except Exception as e:
            logger.error(f"Reconstruction failed: {e}")
            return _error(e, "reconstruction failed")

    # ---- evaluation ----

    def evaluate(self, cfg: ExperimentConfig, estimate_path: str, reference_path: str, out_dir: str) -> Dict[str, Any]:
        """Error report of an estimated T2 raster against a reference tissue map or T2 raster.

        A tissue-map reference also yields spin-echo reference columns (simulated multi-TE fit).
        """
        try:
            estimate = self.container_api.read_t2(estimate_path)
            reference, _, _ = self.container_api.read_raster(reference_path)
            se_reference = None
            if reference.ndim == 3:
                tissue = self.container_api.read_tissue_map(reference_path)
                reference = tissue.t2_ms
                se_reference = self.sequence_api.se_reference_t2(tissue)
            report = self._score(estimate, reference, cfg, se_reference)
            written = self.evaluation_api.write_report(report, out_dir, "evaluation")
            return {"status": "success", "files": written,
                    "median_rel_error": report["median_rel_error"], "rmse_ms": report["rmse_ms"],
                    "se_median_rel_error": report.get("se_median_rel_error"),
                    "worst_roi": report.get("worst_roi"), "message": "evaluation done"}
        except Exception as e:
            logger.error(f"Evaluation failed: {e}")
            return _error(e, "evaluation failed")

    def _score(self, estimate: np.ndarray, reference: np.ndarray, cfg: ExperimentConfig,
               se_reference: Optional[np.ndarray] = None) -> Dict[str, Any]:
        mask = self.evaluation_api.mask_interior(reference > 0, cfg.evaluation.erosion_px)
        rois = None
        if cfg.evaluation.use_default_rois:
            rows, cols = reference.shape
            rois = self.evaluation_api.default_rois(cfg.grid.resized(rows, cols))
        report = self.evaluation_api.t2_error_report(estimate, reference, mask, rois)
        if se_reference is not None:
            self.evaluation_api.add_se_reference(report, estimate, se_reference, mask, rois)
        return report

    # ---- sweeps ----

    def _brain_test_case(self, cfg: ExperimentConfig) -> TissueMap:
        return self.phantom_api.downsample(self.phantom_api.make_brain_phantom(cfg.model_grid), cfg.grid)

    def _test_image(self, tissue: TissueMap, nominal: SequenceParams, actual: SequenceParams,
                    snr_db: Optional[float], seed: int) -> ComplexImage:
        """Acquire with the actual shifts; the double-echo notch only knows the nominal layout"""
        img = self.sequence_api.add_noise(self.sequence_api.forward_oled(tissue, actual), snr_db, seed)
        return self.kspace_api.remove_double_echo(img, nominal)

    def _roi_rows(self, t2: np.ndarray, tissue: TissueMap, cfg: ExperimentConfig) -> List[Dict[str, Any]]:
        """ROI table with ground-truth and spin-echo-reference columns"""
        report = self._score(t2, tissue.t2_ms, cfg, self.sequence_api.se_reference_t2(tissue))
        return report.get("roi_table", [])

    def sweep(self, cfg: ExperimentConfig, kind: str, out_dir: str, seed: Optional[int] = None) -> Dict[str, Any]:
        """Depth or robustness sweep; a failing cell is recorded and the sweep continues"""
        try:
            if seed is not None:
                cfg = cfg.model_copy(update={"dataset": cfg.dataset.model_copy(update={"seed": seed})})
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            if kind == "depth":
                rows = self._depth_sweep(cfg, out)
            elif kind == "robustness":
                rows = self._robustness_sweep(cfg, out)
            else:
                raise ConfigurationError(f"unknown sweep kind: {kind}")
            table = out / f"sweep_{kind}.csv"
            pd.DataFrame(rows).to_csv(table, index=False)
            failed = sum(1 for row in rows if row.get("error"))
            return {"status": "success", "table": str(table), "rows": rows, "failed_cells": failed,
                    "message": f"{kind} sweep done"}
        except Exception as e:
            logger.error(f"Sweep failed: {e}")
            return _error(e, f"{kind} sweep failed")

    def _depth_sweep(self, cfg: ExperimentConfig, out: Path) -> List[Dict[str, Any]]:
        manifest = self._generate(cfg, str(out / "dataset"), cfg.dataset.jitter_frac)
        tissue = self._brain_test_case(cfg)
        nominal = cfg.sequence_params()
        img = self._test_image(tissue, nominal, nominal, cfg.evaluation.test_snr_db, cfg.dataset.seed)

        rows = []
        for depth in cfg.sweep.depths:
            try:
                net_cfg = cfg.network.model_copy(update={"n_param_layers": depth})
                NetworkConfig.model_validate(net_cfg.model_dump())
                _, ckpt = self._train_model(net_cfg, cfg.train, str(manifest), str(out / f"depth_{depth}"))
                t2, _, _ = self.reconstruct_t2(img, nominal, "network", cfg.model_copy(
                    update={"timing": cfg.timing.model_copy(update={"runs": 1, "warmup": 0})}), ckpt)
                for row in self._roi_rows(t2, tissue, cfg):
                    rows.append({"depth": depth, **row, "error": ""})
            except Exception as e:
                logger.warning(f"Depth sweep cell {depth} failed: {e}")
                rows.append({"depth": depth, "error": str(e)})
        return rows

    def _robustness_sweep(self, cfg: ExperimentConfig, out: Path) -> List[Dict[str, Any]]:
        tissue = self._brain_test_case(cfg)
        nominal = cfg.sequence_params()
        modes = {"single": 0.0, "multiple": cfg.sweep.multi_jitter_frac}
        no_timing = cfg.model_copy(update={"timing": cfg.timing.model_copy(update={"runs": 1, "warmup": 0})})

        rows = []
        for mode, jitter in modes.items():
            try:
                manifest = self._generate(cfg, str(out / f"dataset_{mode}"), jitter)
                _, ckpt = self._train_model(cfg.network, cfg.train, str(manifest), str(out / f"model_{mode}"))
            except Exception as e:
                logger.warning(f"Robustness sweep: training the {mode}-sequence model failed: {e}")
                rows.append({"mode": mode, "error": str(e)})
                continue

            for direction in cfg.sweep.directions:
                for deviation in cfg.sweep.deviations:
                    try:
                        actual = self.sequence_api.perturb_shifts(nominal, deviation, direction)
                        img = self._test_image(tissue, nominal, actual, cfg.evaluation.test_snr_db, cfg.dataset.seed)
                        t2, _, _ = self.reconstruct_t2(img, nominal, "network", no_timing, ckpt)
                        roi_rows = [r for r in self._roi_rows(t2, tissue, cfg) if r["n"] > 0]
                        worst = max(abs(r["deviation_pct"]) for r in roi_rows) if roi_rows else float("nan")
                        mean_abs = float(np.mean([abs(r["deviation_pct"]) for r in roi_rows])) if roi_rows else float("nan")
                        se_worst = max(abs(r["se_deviation_pct"]) for r in roi_rows) if roi_rows else float("nan")
                        rows.append({"mode": mode, "direction": direction, "deviation": deviation,
                                     "worst_roi_dev_pct": worst, "mean_roi_dev_pct": mean_abs, "worst_roi_se_dev_pct": se_worst,
                                     "error": ""})
                    except Exception as e:
                        logger.warning(f"Robustness cell {mode}/{direction}/{deviation} failed: {e}")
                        rows.append({"mode": mode, "direction": direction, "deviation": deviation, "error": str(e)})
        return rows

    # ---- gradient checks ----

    def _layer_checks(self, seed: int) -> Dict[str, float]:
        rng = np.random.default_rng(seed)
        errors: Dict[str, float] = {}

        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        upstream = rng.standard_normal((2, 4, 5, 5))
        dx, dw, db = conv2d_backward(upstream, x, w)
        conv_loss = lambda: float(np.sum(conv2d_forward(x, w, b) * upstream))
        errors["conv2d.x"] = gradient_check(conv_loss, x, dx)
        errors["conv2d.w"] = gradient_check(conv_loss, w, dw)
        errors["conv2d.b"] = gradient_check(conv_loss, b, db)

        z = rng.standard_normal((2, 3, 5, 5)) * 2 + 1
        gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
        upstream = rng.standard_normal(z.shape)
        _, cache = batchnorm_forward(z, gamma, beta, mode="train")
        dz, dgamma, dbeta = batchnorm_backward(upstream, cache)
        bn_loss = lambda: float(np.sum(batchnorm_forward(z, gamma, beta, mode="train")[0] * upstream))
        errors["batchnorm_train.x"] = gradient_check(bn_loss, z, dz)
        errors["batchnorm_train.gamma"] = gradient_check(bn_loss, gamma, dgamma)
        errors["batchnorm_train.beta"] = gradient_check(bn_loss, beta, dbeta)

        state = BatchNormLayer(gamma=gamma, beta=beta, running_mean=rng.standard_normal(3),
                               running_var=rng.uniform(0.5, 2.0, 3), initialized=True)
        _, cache = batchnorm_forward(z, gamma, beta, mode="inference", state=state)
        dz, _, _ = batchnorm_backward(upstream, cache)
        errors["batchnorm_inference.x"] = gradient_check(
            lambda: float(np.sum(batchnorm_forward(z, gamma, beta, mode="inference", state=state)[0] * upstream)), z, dz)

        a = rng.standard_normal((2, 3, 5, 5))
        upstream = rng.standard_normal(a.shape)
        errors["relu.x"] = gradient_check(lambda: float(np.sum(relu_forward(a) * upstream)), a, relu_backward(upstream, a))

        pred, target = rng.standard_normal((2, 1, 5, 5)), rng.standard_normal((2, 1, 5, 5))
        _, grad = mse_loss(pred, target)
        errors["mse.pred"] = gradient_check(lambda: mse_loss(pred, target)[0], pred, grad)
        return errors

    def _network_check(self, seed: int) -> Dict[str, float]:
        """End-to-end check on a two-unit, four-filter network in double precision"""
        rng = np.random.default_rng(seed)
        net_cfg = NetworkConfig(n_param_layers=6, filters=4, kernel=3)
        ckpt = self.resnet_api.init_checkpoint(net_cfg, seed=seed, dtype=np.float64)
        for bn in ckpt.bn:
            bn.beta[...] = rng.normal(0.0, 0.5, bn.beta.shape)
        x = rng.standard_normal((2, 2, 6, 6))
        target = rng.standard_normal((2, 1, 6, 6))

        def loss() -> float:
            y, _ = self.resnet_api.forward_with_tape(x, ckpt, mode="train", update_stats=False)
            return mse_loss(y, target)[0]

        y, tape = self.resnet_api.forward_with_tape(x, ckpt, mode="train", update_stats=False)
        grads = self.resnet_api.resnet_backward(mse_loss(y, target)[1], ckpt, tape)
        # conv biases ahead of BN have a vanishing gradient; normalise by the whole-model norm
        total = float(np.sqrt(sum(np.sum(g ** 2) for g in grads.values())))
        return {f"network.{name}": gradient_check(loss, array, grads[name], scale=total)
                for name, array in ckpt.parameters().items()}

    def gradcheck(self, seeds: Sequence[int] = (0, 1, 2, 3, 4), out_dir: Optional[str] = None) -> Dict[str, Any]:
        """Central finite-difference checks of every layer and of the whole micro-network"""
        try:
            rows = []
            for seed in seeds:
                errors = {**self._layer_checks(seed), **self._network_check(seed)}
                for check, error in errors.items():
                    rows.append({"seed": seed, "check": check, "rel_error": error,
                                 "passed": bool(error <= self.gradcheck_tolerance)})
            table = pd.DataFrame(rows)
            if out_dir:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                table.to_csv(Path(out_dir) / "gradcheck.csv", index=False)
            worst = float(table["rel_error"].max())
            logger.info(f"Gradient checks over {len(seeds)} seeds: worst relative error {worst:.3g}")
            if not table["passed"].all():
                failing = table.loc[~table["passed"], "check"].unique().tolist()
                return {"status": "error", "error": f"gradient check failed for {failing}", "rows": rows,
                        "message": f"worst relative error {worst:.3g} exceeds {self.gradcheck_tolerance}"}
            return {"status": "success", "rows": rows, "worst_rel_error": worst, "message": "all gradient checks passed"}
        except Exception as e:
            logger.error(f"Gradient check failed: {e}")
            return _error(e, "gradient check failed")
