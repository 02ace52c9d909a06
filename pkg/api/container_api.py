# container_api.py

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from api.errors import CheckpointError, ContainerError
from api.models import (BatchNormLayer, ComplexImage, ConvLayer, DatasetManifest, GridSpec,
                        NetworkCheckpoint, NetworkConfig, TissueMap, TrainingPair)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class ContainerAPI:
    """
    Binary containers shared by every command.

    OIMG: magic, version, rows, cols, channels, dtype code, domain code (u32 little-endian),
    row-major float32 payload (complex interleaved), u32-length JSON trailer.
    OLNC: magic, version, network config block, shape-prefixed float32 arrays per layer,
    u32-length JSON trailer.
    """

    def __init__(self):
        """Initialize format constants"""
        self.image_magic = b"OIMG"
        self.checkpoint_magic = b"OLNC"
        self.version = 1
        self.image_header = struct.Struct("<4s6I")
        self.checkpoint_header = struct.Struct("<4s7I")
        self.dtype_codes = {0: np.dtype("<f4"), 1: np.dtype("<c8")}
        self.domain_codes = {0: "image", 1: "kspace"}

    # ---- shared helpers ----

    @staticmethod
    def _dump_json(payload: Dict[str, Any]) -> bytes:
        return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")

    def _read_trailer(self, raw: bytes, offset: int, path: PathLike) -> Dict[str, Any]:
        if len(raw) < offset + 4:
            raise ContainerError(f"{path}: truncated before metadata trailer")
        (length,) = struct.unpack_from("<I", raw, offset)
        body = raw[offset + 4:]
        if len(body) != length:
            raise ContainerError(f"{path}: trailer length {len(body)} != declared {length}")
        try:
            return json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ContainerError(f"{path}: corrupt metadata trailer ({e})")

    def _read_bytes(self, path: PathLike) -> bytes:
        try:
            return Path(path).read_bytes()
        except OSError as e:
            raise ContainerError(f"cannot read {path}: {e}")

    # ---- OIMG ----

    def _write_oimg(self, path: PathLike, payload: np.ndarray, dtype_code: int, domain: str,
                    grid: GridSpec, metadata: Dict[str, Any]) -> Path:
        channels, rows, cols = payload.shape
        domain_code = {v: k for k, v in self.domain_codes.items()}[domain]
        trailer = self._dump_json({"grid": grid.model_dump(), "metadata": metadata})
        header = self.image_header.pack(self.image_magic, self.version, rows, cols, channels, dtype_code, domain_code)

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = np.ascontiguousarray(payload, dtype=self.dtype_codes[dtype_code]).tobytes()
        path.write_bytes(header + data + struct.pack("<I", len(trailer)) + trailer)
        return path

    def _read_oimg(self, path: PathLike) -> Tuple[np.ndarray, int, str, GridSpec, Dict[str, Any]]:
        raw = self._read_bytes(path)
        if len(raw) < self.image_header.size:
            raise ContainerError(f"{path}: file too short for an OIMG header")
        magic, version, rows, cols, channels, dtype_code, domain_code = self.image_header.unpack_from(raw)
        if magic != self.image_magic:
            raise ContainerError(f"{path}: bad magic {magic!r}")
        if version != self.version:
            raise ContainerError(f"{path}: unsupported OIMG version {version}")
        if dtype_code not in self.dtype_codes or domain_code not in self.domain_codes:
            raise ContainerError(f"{path}: unknown dtype/domain code {dtype_code}/{domain_code}")

        dtype = self.dtype_codes[dtype_code]
        size = rows * cols * channels * dtype.itemsize
        offset = self.image_header.size
        if len(raw) < offset + size:
            raise ContainerError(f"{path}: payload shorter than {rows}x{cols}x{channels}")
        payload = np.frombuffer(raw, dtype=dtype, count=rows * cols * channels, offset=offset)
        trailer = self._read_trailer(raw, offset + size, path)

        try:
            grid = GridSpec(**trailer["grid"])
        except (KeyError, TypeError, ValidationError) as e:
            raise ContainerError(f"{path}: trailer has no valid grid ({e})")
        if grid.shape != (rows, cols):
            raise ContainerError(f"{path}: trailer grid {grid.shape} disagrees with header {(rows, cols)}")
        return payload.reshape(channels, rows, cols).copy(), dtype_code, self.domain_codes[domain_code], \
            grid, trailer.get("metadata", {})

    def write_image(self, img: ComplexImage, path: PathLike) -> Path:
        """Complex image stored as interleaved float32 (precision drops to complex64)"""
        return self._write_oimg(path, img.data[None], 1, img.domain, img.grid, img.metadata)

    def read_image(self, path: PathLike) -> ComplexImage:
        payload, dtype_code, domain, grid, metadata = self._read_oimg(path)
        if dtype_code != 1 or payload.shape[0] != 1:
            raise ContainerError(f"{path}: expected one complex channel")
        return ComplexImage(grid=grid, data=payload[0].astype(np.complex128), domain=domain, metadata=metadata)

    def write_raster(self, raster: np.ndarray, grid: GridSpec, path: PathLike,
                     metadata: Optional[Dict[str, Any]] = None) -> Path:
        """Real raster(s): (rows, cols) or (channels, rows, cols)"""
        stack = raster[None] if raster.ndim == 2 else raster
        return self._write_oimg(path, stack, 0, "image", grid, metadata or {})

    def read_raster(self, path: PathLike) -> Tuple[np.ndarray, GridSpec, Dict[str, Any]]:
        payload, dtype_code, _, grid, metadata = self._read_oimg(path)
        if dtype_code != 0:
            raise ContainerError(f"{path}: expected real-valued channels")
        raster = payload[0] if payload.shape[0] == 1 else payload
        return raster.astype(np.float64), grid, metadata

    def write_tissue_map(self, tissue: TissueMap, path: PathLike, metadata: Optional[Dict[str, Any]] = None) -> Path:
        meta = {"channels": ["t2_ms", "pd"]}
        meta.update(metadata or {})
        return self.write_raster(np.stack([tissue.t2_ms, tissue.pd]), tissue.grid, path, meta)

    def read_tissue_map(self, path: PathLike) -> TissueMap:
        raster, grid, _ = self.read_raster(path)
        if raster.ndim != 3 or raster.shape[0] != 2:
            raise ContainerError(f"{path}: a tissue map stores exactly two channels (t2, pd)")
        return TissueMap(grid=grid, t2_ms=raster[0], pd=raster[1])

    def read_t2(self, path: PathLike) -> np.ndarray:
        """T2 raster from either a single-channel raster or a tissue map"""
        raster, _, _ = self.read_raster(path)
        return raster[0] if raster.ndim == 3 else raster

    # ---- OLNC ----

    def save_checkpoint(self, ckpt: NetworkCheckpoint, path: PathLike) -> Path:
        cfg = ckpt.config
        chunks = [self.checkpoint_header.pack(self.checkpoint_magic, self.version, cfg.n_param_layers,
                                              cfg.filters, cfg.kernel, cfg.in_channels, cfg.out_channels,
                                              ckpt.iteration)]
        for conv, bn in zip(ckpt.conv, ckpt.bn):
            for array in (conv.weight, conv.bias, bn.gamma, bn.beta, bn.running_mean, bn.running_var):
                chunks.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
                chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())

        trailer = self._dump_json({
            "rng_digest": ckpt.rng_digest,
            "initialized": [bn.initialized for bn in ckpt.bn],
            "metadata": ckpt.metadata,
        })
        chunks.append(struct.pack("<I", len(trailer)) + trailer)

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"".join(chunks))
        logger.info(f"Checkpoint at iteration {ckpt.iteration} written to {path}")
        return path

    def _read_array(self, raw: bytes, offset: int, path: PathLike) -> Tuple[np.ndarray, int]:
        try:
            (ndim,) = struct.unpack_from("<I", raw, offset)
            shape = struct.unpack_from(f"<{ndim}I", raw, offset + 4)
        except struct.error:
            raise ContainerError(f"{path}: truncated array header")
        offset += 4 * (ndim + 1)
        count = int(np.prod(shape))
        if len(raw) < offset + 4 * count:
            raise ContainerError(f"{path}: truncated array payload")
        array = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        return array.astype(np.float32), offset + 4 * count

    def load_checkpoint(self, path: PathLike) -> NetworkCheckpoint:
        raw = self._read_bytes(path)
        if len(raw) < self.checkpoint_header.size:
            raise ContainerError(f"{path}: file too short for an OLNC header")
        magic, version, layers, filters, kernel, in_ch, out_ch, iteration = self.checkpoint_header.unpack_from(raw)
        if magic != self.checkpoint_magic:
            raise ContainerError(f"{path}: bad magic {magic!r}")
        if version != self.version:
            raise ContainerError(f"{path}: unsupported OLNC version {version}")
        try:
            config = NetworkConfig(n_param_layers=layers, filters=filters, kernel=kernel,
                                   in_channels=in_ch, out_channels=out_ch)
        except ValidationError as e:
            raise CheckpointError(f"{path}: invalid network config block ({e})")

        offset = self.checkpoint_header.size
        conv, bn = [], []
        for _ in range(layers):
            arrays = []
            for _ in range(6):
                array, offset = self._read_array(raw, offset, path)
                arrays.append(array)
            conv.append(ConvLayer(weight=arrays[0], bias=arrays[1]))
            bn.append(BatchNormLayer(gamma=arrays[2], beta=arrays[3], running_mean=arrays[4], running_var=arrays[5]))

        trailer = self._read_trailer(raw, offset, path)
        for layer, flag in zip(bn, trailer.get("initialized", [])):
            layer.initialized = bool(flag)
        ckpt = NetworkCheckpoint(config=config, conv=conv, bn=bn, iteration=iteration,
                                 rng_digest=trailer.get("rng_digest", ""), metadata=trailer.get("metadata", {}))
        self.validate_checkpoint(ckpt)
        return ckpt

    def validate_checkpoint(self, ckpt: NetworkCheckpoint):
        """Layer shapes must follow the config; running variances must be non-negative"""
        cfg = ckpt.config
        if len(ckpt.conv) != cfg.n_param_layers or len(ckpt.bn) != cfg.n_param_layers:
            raise CheckpointError(f"checkpoint has {len(ckpt.conv)} layers, config says {cfg.n_param_layers}")
        for i, (conv, bn) in enumerate(zip(ckpt.conv, ckpt.bn), start=1):
            in_ch = cfg.in_channels if i == 1 else cfg.filters
            out_ch = cfg.out_channels if i == cfg.n_param_layers else cfg.filters
            expected = (out_ch, in_ch, cfg.kernel, cfg.kernel)
            if conv.weight.shape != expected:
                raise CheckpointError(f"layer {i}: weight shape {conv.weight.shape} != {expected}")
            for name, array in (("bias", conv.bias), ("gamma", bn.gamma), ("beta", bn.beta),
                                ("running_mean", bn.running_mean), ("running_var", bn.running_var)):
                if array.shape != (out_ch,):
                    raise CheckpointError(f"layer {i}: {name} shape {array.shape} != ({out_ch},)")
            if np.any(bn.running_var < 0):
                raise CheckpointError(f"layer {i}: negative running variance")

    # ---- dataset manifest ----

    def write_manifest(self, manifest: DatasetManifest, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(manifest.model_dump_json(indent=2) + "\n")
        return path

    def read_manifest(self, path: PathLike, validate_files: bool = True) -> DatasetManifest:
        """Parse a manifest; with validate_files, every referenced container must exist and parse"""
        path = Path(path)
        try:
            manifest = DatasetManifest.model_validate_json(path.read_text())
        except OSError as e:
            raise ContainerError(f"cannot read manifest {path}: {e}")
        except ValidationError as e:
            raise ContainerError(f"invalid manifest {path}: {e}")

        known = {record.index for record in manifest.samples}
        for split, indices in manifest.split.items():
            missing = set(indices) - known
            if missing:
                raise ContainerError(f"manifest split '{split}' references unknown samples {sorted(missing)}")

        if validate_files:
            for record in manifest.samples:
                self.read_image(path.parent / record.oled_path)
                self.read_t2(path.parent / record.t2_path)
        return manifest

    def load_training_pairs(self, manifest_path: PathLike, split: str = "train") -> List[TrainingPair]:
        manifest_path = Path(manifest_path)
        manifest = self.read_manifest(manifest_path, validate_files=False)
        by_index = {record.index: record for record in manifest.samples}
        pairs = []
        for index in manifest.split.get(split, []):
            record = by_index[index]
            pairs.append(TrainingPair(oled=self.read_image(manifest_path.parent / record.oled_path),
                                      t2_ms=self.read_t2(manifest_path.parent / record.t2_path)))
        logger.info(f"Loaded {len(pairs)} '{split}' pairs from {manifest_path}")
        return pairs
