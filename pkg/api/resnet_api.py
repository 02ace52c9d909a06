# resnet_api.py

import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from api.container_api import ContainerAPI
from api.errors import CheckpointError, ConfigurationError, ShapeError, TrainingDivergedError
from api.models import (BatchNormLayer, ComplexImage, ConvLayer, NetworkCheckpoint, NetworkConfig,
                        Tensor4, TrainConfig, TrainingPair)
from api.network_layers import (BN_MOMENTUM, batchnorm_backward, batchnorm_forward, conv2d_backward,
                                conv2d_forward, mse_loss, relu_backward, relu_forward)
from presets.preset_configs import DEFAULTS

logger = logging.getLogger(__name__)


class ResNetAPI:
    """
    Compact residual network mapping a two-channel (real, imaginary) OLED image to a T2 map.

    Layer 1 and the residual units use conv -> BN -> ReLU; unit l adds its input X^(2l-1) after
    the ReLU of its second layer. The last layer is conv -> BN with no activation and no skip.
    """

    def __init__(self):
        """Initialize guided-filter defaults and the checkpoint store"""
        self.guided_radius = DEFAULTS["guided_filter"]["radius"]
        self.guided_eps = DEFAULTS["guided_filter"]["eps"]
        self.container_api = ContainerAPI()

    # ---- network ----

    def init_checkpoint(self, cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> NetworkCheckpoint:
        """He-normal weights (variance 2 / fan-in), zero biases, BN gamma = 1 and beta = 0"""
        rng = np.random.default_rng(seed)
        conv, bn = [], []
        for i in range(1, cfg.n_param_layers + 1):
            in_ch = cfg.in_channels if i == 1 else cfg.filters
            out_ch = cfg.out_channels if i == cfg.n_param_layers else cfg.filters
            fan_in = in_ch * cfg.kernel * cfg.kernel
            weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, cfg.kernel, cfg.kernel))
            conv.append(ConvLayer(weight=weight.astype(dtype), bias=np.zeros(out_ch, dtype=dtype)))
            bn.append(BatchNormLayer(gamma=np.ones(out_ch, dtype=dtype), beta=np.zeros(out_ch, dtype=dtype),
                                     running_mean=np.zeros(out_ch, dtype=dtype),
                                     running_var=np.ones(out_ch, dtype=dtype)))
        digest = hashlib.sha256(json.dumps(rng.bit_generator.state, sort_keys=True, default=str).encode()).hexdigest()
        return NetworkCheckpoint(config=cfg, conv=conv, bn=bn, rng_digest=digest[:16])

    def _layer(self, x: Tensor4, ckpt: NetworkCheckpoint, index: int, mode: str, update_stats: bool,
               bn_momentum: float):
        conv, bn = ckpt.conv[index], ckpt.bn[index]
        z = conv2d_forward(x, conv.weight, conv.bias)
        state = bn if (update_stats or mode == "inference") else None
        y, cache = batchnorm_forward(z, bn.gamma, bn.beta, mode=mode, state=state, momentum=bn_momentum)
        return y, cache

    def _forward(self, x: Tensor4, ckpt: NetworkCheckpoint, mode: str, update_stats: bool,
                 bn_momentum: float = BN_MOMENTUM):
        cfg = ckpt.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"network input must be (batch, {cfg.in_channels}, h, w), got {x.shape}")
        if min(x.shape[2:]) < cfg.kernel:
            raise ShapeError(f"spatial size {x.shape[2:]} is smaller than the kernel {cfg.kernel}")

        dtype = ckpt.conv[0].weight.dtype
        activations = [x.astype(dtype, copy=False)]   # X^0 .. X^(L-1)
        tape: List[Dict] = []
        last = cfg.n_param_layers - 1
        for index in range(cfg.n_param_layers):
            layer_input = activations[-1]
            bn_out, cache = self._layer(layer_input, ckpt, index, mode, update_stats, bn_momentum)
            entry = {"input": layer_input, "bn_cache": cache, "bn_out": bn_out, "skip": None}
            tape.append(entry)
            if index == last:
                return bn_out, tape
            out = relu_forward(bn_out)
            # layers 3, 5, ... (1-based) close a residual unit
            if index >= 2 and index % 2 == 0:
                out = out + activations[index - 1]
                entry["skip"] = index - 2  # layer whose output was added
            activations.append(out)
        raise AssertionError("unreachable")

    def resnet_forward(self, x: Tensor4, ckpt: NetworkCheckpoint, mode: str = "inference") -> Tensor4:
        """Output (batch, 1, h, w); training mode also updates the BN running statistics"""
        y, _ = self._forward(x, ckpt, mode, update_stats=(mode == "train"))
        return y

    def forward_with_tape(self, x: Tensor4, ckpt: NetworkCheckpoint, mode: str = "train",
                          update_stats: bool = True) -> Tuple[Tensor4, List[Dict]]:
        return self._forward(x, ckpt, mode, update_stats)

    def settle_bn_statistics(self, x: Tensor4, ckpt: NetworkCheckpoint) -> Tensor4:
        """Train-mode pass that replaces every running mean/variance with the statistics of batch x"""
        y, _ = self._forward(x, ckpt, "train", update_stats=True, bn_momentum=1.0)
        return y

    def resnet_backward(self, dy: Tensor4, ckpt: NetworkCheckpoint, tape: List[Dict]) -> Dict[str, np.ndarray]:
        """Gradients w.r.t. every learnable array, keyed like NetworkCheckpoint.parameters()"""
        grads: Dict[str, np.ndarray] = {}
        n_layers = len(tape)
        upstream: Dict[int, np.ndarray] = {n_layers - 1: dy}   # gradient of each layer's output

        for index in range(n_layers - 1, -1, -1):
            entry = tape[index]
            d_out = upstream.pop(index)
            if index == n_layers - 1:
                d_bn = d_out
            else:
                if entry["skip"] is not None:
                    upstream[entry["skip"]] = upstream.get(entry["skip"], 0) + d_out
                d_bn = relu_backward(d_out, entry["bn_out"])

            d_z, d_gamma, d_beta = batchnorm_backward(d_bn, entry["bn_cache"])
            d_x, d_w, d_b = conv2d_backward(d_z, entry["input"], ckpt.conv[index].weight)
            name = f"layer{index + 1}"
            grads[f"{name}.weight"], grads[f"{name}.bias"] = d_w, d_b
            grads[f"{name}.gamma"], grads[f"{name}.beta"] = d_gamma, d_beta
            if index > 0:
                upstream[index - 1] = upstream.get(index - 1, 0) + d_x
        return grads

    # ---- optimisation ----

    @staticmethod
    def lr_at(cfg: TrainConfig, iteration: int) -> float:
        lr = cfg.lr_schedule[0][1]
        for start, value in cfg.lr_schedule:
            if iteration >= start:
                lr = value
        return lr

    def sgd_step(self, ckpt: NetworkCheckpoint, grads: Dict[str, np.ndarray], cfg: TrainConfig,
                 iteration: int) -> NetworkCheckpoint:
        """v <- momentum v - lr (g + weight_decay w); w <- w + v. Running BN statistics are not parameters."""
        lr = self.lr_at(cfg, iteration)
        for name, weight in ckpt.parameters().items():
            if name not in grads:
                raise CheckpointError(f"missing gradient for {name}")
            grad = grads[name]
            if grad.shape != weight.shape:
                raise ShapeError(f"gradient for {name} has shape {grad.shape}, parameter {weight.shape}")
            velocity = ckpt.velocity.get(name)
            if velocity is None:
                velocity = np.zeros_like(weight)
            velocity = cfg.momentum * velocity - lr * (grad + cfg.weight_decay * weight)
            ckpt.velocity[name] = velocity.astype(weight.dtype, copy=False)
            weight += ckpt.velocity[name]
        return ckpt

    # ---- data ----

    @staticmethod
    def normalise_input(img: ComplexImage) -> np.ndarray:
        """(2, h, w) real/imaginary channels scaled by the image's own peak magnitude"""
        peak = np.abs(img.data).max()
        data = img.data / peak if peak > 0 else img.data
        return np.stack([data.real, data.imag])

    def sample_patches(self, dataset: Sequence[TrainingPair], patch: int, batch: int, rng: np.random.Generator,
                       t2_scale_ms: float = 500.0, dtype=np.float32) -> Tuple[Tensor4, Tensor4]:
        """Random aligned crops of (normalised input, T2 / t2_scale_ms)"""
        if not dataset:
            raise ConfigurationError("cannot sample patches from an empty dataset")
        inputs = np.empty((batch, 2, patch, patch), dtype=dtype)
        targets = np.empty((batch, 1, patch, patch), dtype=dtype)
        for b in range(batch):
            pair = dataset[int(rng.integers(len(dataset)))]
            rows, cols = pair.oled.grid.shape
            if patch > rows or patch > cols:
                raise ShapeError(f"patch {patch} is larger than the image {rows}x{cols}")
            r = int(rng.integers(rows - patch + 1))
            c = int(rng.integers(cols - patch + 1))
            inputs[b] = self.normalise_input(pair.oled)[:, r:r + patch, c:c + patch]
            targets[b, 0] = pair.t2_ms[r:r + patch, c:c + patch] / t2_scale_ms
        return inputs, targets

    def validation_loss(self, ckpt: NetworkCheckpoint, dataset: Sequence[TrainingPair], t2_scale_ms: float) -> float:
        """Mean per-pixel squared error of full-image inference"""
        losses = []
        dtype = ckpt.conv[0].weight.dtype
        for pair in dataset:
            x = self.normalise_input(pair.oled)[None].astype(dtype)
            target = (pair.t2_ms / t2_scale_ms)[None, None].astype(dtype)
            loss, _ = mse_loss(self.resnet_forward(x, ckpt, mode="inference"), target)
            losses.append(loss / target[0, 0].size)
        return float(np.mean(losses))

    # ---- training ----

    def train(self, dataset: Sequence[TrainingPair], net_cfg: NetworkConfig, train_cfg: TrainConfig,
              val_dataset: Optional[Sequence[TrainingPair]] = None, out_dir: Optional[str] = None,
              log_path: Optional[str] = None) -> NetworkCheckpoint:
        """
        Patch-based SGD training.

        Args:
            dataset: training pairs (double-echo-removed OLED image, T2 raster)
            net_cfg: architecture
            train_cfg: optimiser, schedule and sampling settings
            val_dataset: held-out pairs for the periodic full-image validation loss
            out_dir: where checkpoints go (schedule boundaries, termination, divergence)
            log_path: CSV with columns iteration, lr, train_loss, val_loss; row 0 is the baseline
                after BN statistics are settled on one batch, before any update

        Returns:
            Final NetworkCheckpoint; its metadata holds the baseline and last validation losses
        """
        if not dataset:
            raise ConfigurationError("training dataset is empty")
        init_seq, sample_seq, settle_seq = np.random.SeedSequence(train_cfg.seed).spawn(3)
        ckpt = self.init_checkpoint(net_cfg, seed=int(init_seq.generate_state(1)[0]))
        ckpt.metadata.update({"t2_scale_ms": train_cfg.t2_scale_ms, "seed": train_cfg.seed})
        rng = np.random.default_rng(sample_seq)
        boundaries = {start for start, _ in train_cfg.lr_schedule if start > 0}

        # iteration 0: BN statistics of one training batch, then the untrained baseline
        x, target = self.sample_patches(dataset, train_cfg.patch, train_cfg.batch,
                                        np.random.default_rng(settle_seq), train_cfg.t2_scale_ms)
        baseline, _ = mse_loss(self.settle_bn_statistics(x, ckpt), target)
        baseline /= train_cfg.patch * train_cfg.patch
        val_losses: List[float] = []
        val_loss = np.nan
        if val_dataset:
            val_loss = self.validation_loss(ckpt, val_dataset, train_cfg.t2_scale_ms)
            val_losses.append(val_loss)
        rows = [{"iteration": 0, "lr": self.lr_at(train_cfg, 0), "train_loss": baseline, "val_loss": val_loss}]
        logger.info(f"Training {net_cfg.n_param_layers}-layer network on {len(dataset)} pairs "
                    f"for {train_cfg.max_iters} iterations; baseline val_loss={val_loss:.5g}")
        for iteration in tqdm(range(train_cfg.max_iters), disable=not train_cfg.progress, desc="train"):
            if iteration in boundaries and out_dir:
                self.container_api.save_checkpoint(ckpt, Path(out_dir) / f"checkpoint_{iteration:06d}.olnc")

            x, target = self.sample_patches(dataset, train_cfg.patch, train_cfg.batch, rng, train_cfg.t2_scale_ms)
            y, tape = self.forward_with_tape(x, ckpt)
            loss, d_y = mse_loss(y, target)
            pixels = train_cfg.patch * train_cfg.patch
            loss, d_y = loss / pixels, d_y / pixels

            if not np.isfinite(loss):
                diagnostic = None
                if out_dir:
                    diagnostic = str(self.container_api.save_checkpoint(
                        ckpt, Path(out_dir) / f"diverged_{iteration:06d}.olnc"))
                logger.error(f"Training diverged at iteration {iteration}")
                raise TrainingDivergedError(f"loss became {loss} at iteration {iteration}", iteration, diagnostic)

            grads = self.resnet_backward(d_y, ckpt, tape)
            lr = self.lr_at(train_cfg, iteration)
            self.sgd_step(ckpt, grads, train_cfg, iteration)
            ckpt.iteration = iteration + 1

            done = ckpt.iteration
            val_loss = np.nan
            if val_dataset and (done % train_cfg.val_every == 0 or done == train_cfg.max_iters):
                val_loss = self.validation_loss(ckpt, val_dataset, train_cfg.t2_scale_ms)
                val_losses.append(val_loss)
            if done % train_cfg.log_every == 0 or not np.isnan(val_loss) or done == train_cfg.max_iters:
                rows.append({"iteration": done, "lr": lr, "train_loss": loss, "val_loss": val_loss})
                logger.info(f"iter {done}: lr={lr:g} train_loss={loss:.5g} val_loss={val_loss:.5g}")

        if val_losses:
            ckpt.metadata.update({"initial_val_loss": val_losses[0], "final_val_loss": val_losses[-1]})
        if log_path:
            Path(log_path).parent.mkdir(parents=True, exist_ok=True)
            pd.DataFrame(rows, columns=["iteration", "lr", "train_loss", "val_loss"]).to_csv(log_path, index=False)
        if out_dir:
            self.container_api.save_checkpoint(ckpt, Path(out_dir) / "checkpoint_final.olnc")
        return ckpt

    # ---- inference ----

    def infer_t2(self, img: ComplexImage, ckpt: NetworkCheckpoint, use_guided_filter: bool = True,
                 radius: Optional[int] = None, eps: Optional[float] = None) -> np.ndarray:
        """Full-image inference in ms; the optional self-guided filter runs on the scaled output"""
        if not all(bn.initialized for bn in ckpt.bn):
            raise CheckpointError("checkpoint has never been trained (uninitialised BN statistics)")
        dtype = ckpt.conv[0].weight.dtype
        x = self.normalise_input(img)[None].astype(dtype)
        out = self.resnet_forward(x, ckpt, mode="inference")[0, 0].astype(np.float64)
        if use_guided_filter:
            out = self.guided_filter(out, out, radius or self.guided_radius, eps or self.guided_eps)
        return out * float(ckpt.metadata.get("t2_scale_ms", 500.0))

    @staticmethod
    def box_mean(x: np.ndarray, radius: int) -> np.ndarray:
        """Mean over (2r+1)^2 windows truncated at the border, via an integral image"""
        rows, cols = x.shape
        integral = np.zeros((rows + 1, cols + 1))
        integral[1:, 1:] = x.cumsum(axis=0).cumsum(axis=1)
        r0 = np.clip(np.arange(rows) - radius, 0, rows)
        r1 = np.clip(np.arange(rows) + radius + 1, 0, rows)
        c0 = np.clip(np.arange(cols) - radius, 0, cols)
        c1 = np.clip(np.arange(cols) + radius + 1, 0, cols)
        total = (integral[np.ix_(r1, c1)] - integral[np.ix_(r0, c1)]
                 - integral[np.ix_(r1, c0)] + integral[np.ix_(r0, c0)])
        count = np.outer(r1 - r0, c1 - c0)
        return total / count

    def guided_filter(self, p: np.ndarray, guide: np.ndarray, radius: int, eps: float) -> np.ndarray:
        """Guided filter: per-window a = cov(I, p) / (var(I) + eps), b = mean(p) - a mean(I)"""
        if p.shape != guide.shape:
            raise ShapeError(f"filter input {p.shape} and guide {guide.shape} differ")
        if radius < 1 or eps <= 0:
            raise ConfigurationError(f"guided filter needs radius >= 1 and eps > 0, got {radius}, {eps}")
        mean_i = self.box_mean(guide, radius)
        mean_p = self.box_mean(p, radius)
        cov_ip = self.box_mean(guide * p, radius) - mean_i * mean_p
        var_i = self.box_mean(guide * guide, radius) - mean_i * mean_i
        a = cov_ip / (var_i + eps)
        b = mean_p - a * mean_i
        return self.box_mean(a, radius) * guide + self.box_mean(b, radius)
