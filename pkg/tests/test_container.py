import numpy as np
import pytest

from api.container_api import ContainerAPI
from api.errors import CheckpointError, ContainerError
from api.models import ComplexImage, DatasetManifest, NetworkConfig, SampleRecord
from api.resnet_api import ResNetAPI
from api.sequence_api import SequenceAPI


@pytest.fixture
def container_api():
    return ContainerAPI()


@pytest.fixture
def oled_image(make_blob, grid64, params64):
    return SequenceAPI().forward_oled(make_blob(grid64, 8.0), params64)


def test_image_container_keeps_data_and_metadata(container_api, oled_image, tmp_path):
    path = container_api.write_image(oled_image, tmp_path / "x.oimg")
    loaded = container_api.read_image(path)
    assert loaded.grid == oled_image.grid
    assert loaded.domain == "image"
    assert loaded.metadata == oled_image.metadata
    np.testing.assert_allclose(loaded.data, oled_image.data, atol=1e-6)


def test_image_header_layout(container_api, oled_image, tmp_path):
    raw = container_api.write_image(oled_image, tmp_path / "x.oimg").read_bytes()
    assert raw[:4] == b"OIMG"
    values = np.frombuffer(raw[4:28], dtype="<u4").tolist()
    assert values == [1, 64, 64, 1, 1, 0]


def test_kspace_domain_survives(container_api, grid64, tmp_path):
    k = ComplexImage(grid=grid64, data=np.ones(grid64.shape, complex), domain="kspace")
    assert container_api.read_image(container_api.write_image(k, tmp_path / "k.oimg")).domain == "kspace"


def test_bad_magic_and_truncation(container_api, oled_image, tmp_path):
    path = container_api.write_image(oled_image, tmp_path / "x.oimg")
    raw = path.read_bytes()
    (tmp_path / "magic.oimg").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.oimg").write_bytes(raw[:100])
    (tmp_path / "trailer.oimg").write_bytes(raw[:-3])
    for name in ("magic.oimg", "short.oimg", "trailer.oimg", "missing.oimg"):
        with pytest.raises(ContainerError):
            container_api.read_image(tmp_path / name)


def test_raster_and_tissue_map(container_api, make_blob, grid64, tmp_path):
    tissue = make_blob(grid64, 8.0, t2_ms=90.0)
    container_api.write_tissue_map(tissue, tmp_path / "tissue.oimg")
    loaded = container_api.read_tissue_map(tmp_path / "tissue.oimg")
    np.testing.assert_allclose(loaded.t2_ms, 90.0)
    np.testing.assert_allclose(loaded.pd, tissue.pd, rtol=1e-6)
    np.testing.assert_allclose(container_api.read_t2(tmp_path / "tissue.oimg"), 90.0)

    container_api.write_raster(tissue.t2_ms, grid64, tmp_path / "t2.oimg", {"method": "detach"})
    raster, grid, metadata = container_api.read_raster(tmp_path / "t2.oimg")
    assert raster.shape == grid64.shape and grid == grid64
    assert metadata == {"method": "detach"}
    with pytest.raises(ContainerError):
        container_api.read_image(tmp_path / "t2.oimg")
    with pytest.raises(ContainerError):
        container_api.read_tissue_map(tmp_path / "t2.oimg")


def test_checkpoint_round_trip(container_api, tmp_path):
    resnet_api = ResNetAPI()
    ckpt = resnet_api.init_checkpoint(NetworkConfig(n_param_layers=4, filters=3), seed=9)
    resnet_api.resnet_forward(np.random.default_rng(0).standard_normal((2, 2, 8, 8)), ckpt, mode="train")
    ckpt.iteration = 17
    ckpt.metadata["t2_scale_ms"] = 500.0

    loaded = container_api.load_checkpoint(container_api.save_checkpoint(ckpt, tmp_path / "net.olnc"))
    assert loaded.config == ckpt.config
    assert loaded.iteration == 17
    assert loaded.rng_digest == ckpt.rng_digest
    assert loaded.metadata == {"t2_scale_ms": 500.0}
    assert all(bn.initialized for bn in loaded.bn)
    assert loaded.velocity == {}
    for name, param in ckpt.parameters().items():
        assert np.array_equal(loaded.parameters()[name], param)
    for a, b in zip(loaded.bn, ckpt.bn):
        assert np.array_equal(a.running_mean, b.running_mean)
        assert np.array_equal(a.running_var, b.running_var)


def test_checkpoint_corruption(container_api, tmp_path):
    ckpt = ResNetAPI().init_checkpoint(NetworkConfig(n_param_layers=4, filters=3), seed=0)
    raw = container_api.save_checkpoint(ckpt, tmp_path / "net.olnc").read_bytes()
    (tmp_path / "short.olnc").write_bytes(raw[: len(raw) // 2])
    (tmp_path / "magic.olnc").write_bytes(b"OIMG" + raw[4:])
    for name in ("short.olnc", "magic.olnc"):
        with pytest.raises(ContainerError):
            container_api.load_checkpoint(tmp_path / name)


def test_validate_checkpoint(container_api):
    ckpt = ResNetAPI().init_checkpoint(NetworkConfig(n_param_layers=4, filters=3), seed=0)
    container_api.validate_checkpoint(ckpt)
    ckpt.bn[1].running_var[0] = -1.0
    with pytest.raises(CheckpointError):
        container_api.validate_checkpoint(ckpt)
    ckpt.bn[1].running_var[0] = 1.0
    ckpt.conv[2].weight = np.zeros((3, 3, 5, 5), dtype=np.float32)
    with pytest.raises(CheckpointError):
        container_api.validate_checkpoint(ckpt)


def _write_pair(container_api, tmp_path, pair, index):
    container_api.write_image(pair.oled, tmp_path / f"sample_{index:04d}_oled.oimg")
    container_api.write_raster(pair.t2_ms, pair.oled.grid, tmp_path / f"sample_{index:04d}_t2.oimg")
    return SampleRecord(index=index, oled_path=f"sample_{index:04d}_oled.oimg",
                        t2_path=f"sample_{index:04d}_t2.oimg", seed=index,
                        sequence={"shift1_cyc": (-4, -4), "shift2_cyc": (4, 4), "shift3_cyc": (0, 8)})


def test_manifest_and_training_pairs(container_api, tiny_pairs, tmp_path):
    records = [_write_pair(container_api, tmp_path, pair, i) for i, pair in enumerate(tiny_pairs)]
    manifest = DatasetManifest(root_seed=3, samples=records, split={"train": [1], "test": [0]})
    path = container_api.write_manifest(manifest, tmp_path / "manifest.json")

    assert container_api.read_manifest(path) == manifest
    pairs = container_api.load_training_pairs(path, "train")
    assert len(pairs) == 1
    np.testing.assert_allclose(pairs[0].t2_ms, tiny_pairs[1].t2_ms, rtol=1e-6)


def test_manifest_problems_are_container_errors(container_api, tiny_pairs, tmp_path):
    records = [_write_pair(container_api, tmp_path, pair, i) for i, pair in enumerate(tiny_pairs)]

    unknown = DatasetManifest(samples=records, split={"train": [0, 5], "test": []})
    container_api.write_manifest(unknown, tmp_path / "unknown.json")
    with pytest.raises(ContainerError):
        container_api.read_manifest(tmp_path / "unknown.json")

    container_api.write_manifest(DatasetManifest(samples=records, split={"train": [0], "test": [1]}),
                                 tmp_path / "manifest.json")
    (tmp_path / "sample_0001_t2.oimg").unlink()
    with pytest.raises(ContainerError):
        container_api.read_manifest(tmp_path / "manifest.json")
    container_api.read_manifest(tmp_path / "manifest.json", validate_files=False)

    (tmp_path / "broken.json").write_text('{"samples": [], "split": {"train": [1], "test": [1]}}')
    with pytest.raises(ContainerError):
        container_api.read_manifest(tmp_path / "broken.json")
