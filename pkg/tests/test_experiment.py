import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from api.container_api import ContainerAPI
from api.errors import ConfigurationError
from api.experiment_api import ExperimentAPI, load_config
from api.models import DetachParams, ExperimentConfig, GridSpec
from main import build_parser, main

EXPERIMENTS = Path(__file__).resolve().parent.parent / "experiments"


@pytest.fixture
def experiment_api():
    return ExperimentAPI()


@pytest.fixture
def tiny_cfg():
    return ExperimentConfig.model_validate({
        "grid": {"rows": 16, "cols": 16},
        "model_grid": {"rows": 32, "cols": 32},
        "phantom": {"n_shapes": [3, 6]},
        "dataset": {"count": 4, "n_train": 3, "seed": 5},
        "detach": {"max_outer_iters": 20},
        "network": {"n_param_layers": 4, "filters": 4},
        "train": {"lr_schedule": [[0, 0.01]], "batch": 2, "patch": 8, "max_iters": 3, "val_every": 3,
                  "log_every": 1},
        "evaluation": {"erosion_px": 0},
        "sweep": {"depths": [4, 6]},
        "timing": {"runs": 1, "warmup": 0},
    })


@pytest.fixture
def root_logging():
    """main() reconfigures the root logger; put the previous handlers back afterwards"""
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    for handler in root.handlers:
        if handler not in handlers:
            handler.close()
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def tiny_dataset(experiment_api, tiny_cfg, tmp_path):
    result = experiment_api.gen_dataset(tiny_cfg, str(tmp_path / "data"))
    assert result["status"] == "success", result
    return Path(result["manifest"])


@pytest.mark.parametrize("path", sorted(EXPERIMENTS.glob("*.toml")), ids=lambda p: p.stem)
def test_experiment_files_load(path):
    cfg = load_config(str(path))
    assert cfg.model_grid.rows % cfg.grid.rows == 0
    assert cfg.sequence_params().shift3_cyc == (0.0, cfg.grid.rows / 2)


def test_missing_config_means_defaults():
    cfg = load_config(None)
    assert cfg.grid.shape == (128, 128)
    assert cfg.detach == DetachParams()


def test_bad_configs_raise_configuration_error(tmp_path):
    (tmp_path / "syntax.toml").write_text("[grid\nrows = 3")
    (tmp_path / "unknown.toml").write_text("[grid]\nrows = 64\ncolour = 1\n")
    (tmp_path / "nesting.toml").write_text("[grid]\nrows = 64\ncols = 64\n[model_grid]\nrows = 100\ncols = 100\n")
    (tmp_path / "split.toml").write_text("[dataset]\ncount = 5\nn_train = 6\n")
    for name in ("syntax.toml", "unknown.toml", "nesting.toml", "split.toml", "absent.toml"):
        with pytest.raises(ConfigurationError):
            load_config(str(tmp_path / name))


def test_gen_dataset_writes_manifest_and_split(tiny_dataset):
    manifest = ContainerAPI().read_manifest(tiny_dataset)
    assert [record.index for record in manifest.samples] == [0, 1, 2, 3]
    assert len(manifest.split["train"]) == 3 and len(manifest.split["test"]) == 1
    assert not set(manifest.split["train"]) & set(manifest.split["test"])
    img = ContainerAPI().read_image(tiny_dataset.parent / manifest.samples[0].oled_path)
    assert img.metadata["double_echo_removed"] is True
    assert img.grid.shape == (16, 16)


def test_gen_dataset_is_byte_identical_for_any_worker_count(experiment_api, tiny_cfg, tmp_path):
    parallel = tiny_cfg.model_copy(update={"dataset": tiny_cfg.dataset.model_copy(update={"workers": 2})})
    assert experiment_api.gen_dataset(tiny_cfg, str(tmp_path / "a"))["status"] == "success"
    assert experiment_api.gen_dataset(parallel, str(tmp_path / "b"))["status"] == "success"
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_gen_dataset_seed_changes_samples(experiment_api, tiny_cfg, tmp_path):
    experiment_api.gen_dataset(tiny_cfg, str(tmp_path / "a"), seed=1)
    experiment_api.gen_dataset(tiny_cfg, str(tmp_path / "b"), seed=2)
    name = "sample_0000_t2.oimg"
    assert (tmp_path / "a" / name).read_bytes() != (tmp_path / "b" / name).read_bytes()


def test_zero_jitter_keeps_nominal_sequence(experiment_api, tiny_cfg, tmp_path):
    result = experiment_api.gen_dataset(tiny_cfg, str(tmp_path / "data"), jitter_frac=0.0)
    manifest = ContainerAPI().read_manifest(result["manifest"])
    nominal = tiny_cfg.sequence_params().model_copy(update={"snr_db": tiny_cfg.dataset.snr_db})
    for record in manifest.samples:
        assert record.sequence == nominal
        assert record.jitter == []


def test_reconstruct_detach_reports_timing_and_trace(experiment_api, tiny_cfg, tiny_dataset, tmp_path):
    cfg = tiny_cfg.model_copy(update={"detach": DetachParams(max_outer_iters=1, tol=1e-12)})
    out = tmp_path / "recon" / "detach_t2.oimg"
    result = experiment_api.reconstruct(cfg, str(tiny_dataset.parent / "sample_0000_oled.oimg"), "detach", str(out))
    assert result["status"] == "success", result
    assert result["timing"]["converged"] is False
    assert result["timing"]["median_ms"] > 0
    assert out.exists()
    trace = pd.read_csv(out.with_suffix(".trace.csv"))
    assert len(trace) == 2
    report = json.loads((out.parent / "detach_t2.json").read_text())
    assert report["method"] == "detach"


def test_reconstruct_onto_larger_grid(experiment_api, tiny_cfg, tiny_dataset, tmp_path):
    cfg = tiny_cfg.model_copy(update={"detach": DetachParams(max_outer_iters=2),
                                      "recon_grid": GridSpec(rows=32, cols=32)})
    out = tmp_path / "detach_32.oimg"
    result = experiment_api.reconstruct(cfg, str(tiny_dataset.parent / "sample_0000_oled.oimg"), "detach", str(out))
    assert result["status"] == "success", result
    raster, grid, _ = ContainerAPI().read_raster(out)
    assert raster.shape == (32, 32)
    assert grid.fov_x_cm == tiny_cfg.grid.fov_x_cm


def test_upsample_keeps_image_content(experiment_api, tiny_cfg, tiny_dataset):
    img = ContainerAPI().read_image(tiny_dataset.parent / "sample_0000_oled.oimg")
    assert experiment_api.upsample_to_recon_grid(img, tiny_cfg) is img
    cfg = tiny_cfg.model_copy(update={"recon_grid": GridSpec(rows=32, cols=32)})
    big = experiment_api.upsample_to_recon_grid(img, cfg)
    assert big.grid.shape == (32, 32)
    assert big.metadata["double_echo_removed"] is True
    # unitary transforms: energy is kept, even pixels land back on the source samples scaled by N / M
    assert np.linalg.norm(big.data) == pytest.approx(np.linalg.norm(img.data), rel=1e-6)
    np.testing.assert_allclose(big.data[::2, ::2], 0.5 * img.data, atol=1e-6 * np.abs(img.data).max())


def test_recon_grid_must_not_shrink(tmp_path):
    (tmp_path / "recon.toml").write_text("[grid]\nrows = 64\ncols = 64\n[recon_grid]\nrows = 32\ncols = 32\n")
    with pytest.raises(ConfigurationError):
        load_config(str(tmp_path / "recon.toml"))


def test_reconstruct_network_needs_checkpoint(experiment_api, tiny_cfg, tiny_dataset, tmp_path):
    result = experiment_api.reconstruct(tiny_cfg, str(tiny_dataset.parent / "sample_0000_oled.oimg"), "network",
                                        str(tmp_path / "t2.oimg"))
    assert result["status"] == "error"
    assert result["error_type"] == "CheckpointError"


def test_reconstruct_rejects_unknown_method(experiment_api, tiny_cfg, tiny_dataset, tmp_path):
    result = experiment_api.reconstruct(tiny_cfg, str(tiny_dataset.parent / "sample_0000_oled.oimg"), "fourier",
                                        str(tmp_path / "t2.oimg"))
    assert result["status"] == "error"
    assert result["error_type"] == "ConfigurationError"


def test_train_then_reconstruct_with_network(experiment_api, tiny_cfg, tiny_dataset, tmp_path):
    trained = experiment_api.train(tiny_cfg, str(tiny_dataset), str(tmp_path / "model"))
    assert trained["status"] == "success", trained
    assert Path(trained["checkpoint"]).exists()
    log = pd.read_csv(trained["log"])
    assert log["iteration"].tolist() == [0, 1, 2, 3]

    out = tmp_path / "network_t2.oimg"
    result = experiment_api.reconstruct(tiny_cfg, str(tiny_dataset.parent / "sample_0001_oled.oimg"), "network",
                                        str(out), checkpoint_path=trained["checkpoint"])
    assert result["status"] == "success", result
    raster, grid, metadata = ContainerAPI().read_raster(out)
    assert raster.shape == (16, 16)
    assert metadata["method"] == "network"

    deeper = tiny_cfg.model_copy(update={"network": tiny_cfg.network.model_copy(update={"n_param_layers": 6})})
    mismatch = experiment_api.reconstruct(deeper, str(tiny_dataset.parent / "sample_0001_oled.oimg"), "network",
                                          str(out), checkpoint_path=trained["checkpoint"])
    assert mismatch["status"] == "error"
    assert mismatch["error_type"] == "CheckpointError"


def test_training_is_byte_identical_across_runs(experiment_api, tiny_cfg, tiny_dataset, tmp_path):
    a = experiment_api.train(tiny_cfg, str(tiny_dataset), str(tmp_path / "a"))
    b = experiment_api.train(tiny_cfg, str(tiny_dataset), str(tmp_path / "b"))
    assert Path(a["checkpoint"]).read_bytes() == Path(b["checkpoint"]).read_bytes()


def test_train_reports_missing_manifest(experiment_api, tiny_cfg, tmp_path):
    result = experiment_api.train(tiny_cfg, str(tmp_path / "nowhere.json"), str(tmp_path / "model"))
    assert result["status"] == "error"
    assert result["error_type"] == "ContainerError"


def test_evaluate_identical_rasters(experiment_api, tiny_cfg, tiny_dataset, tmp_path):
    reference = tiny_dataset.parent / "sample_0000_t2.oimg"
    result = experiment_api.evaluate(tiny_cfg, str(reference), str(reference), str(tmp_path / "eval"))
    assert result["status"] == "success", result
    assert result["median_rel_error"] == 0.0
    assert result["rmse_ms"] == 0.0
    assert result["se_median_rel_error"] == pytest.approx(0.0, abs=1e-9)
    assert Path(result["files"]["summary"]).exists()


def test_depth_sweep_reports_every_roi_per_depth(experiment_api, tiny_cfg, tmp_path):
    result = experiment_api.sweep(tiny_cfg, "depth", str(tmp_path / "sweep"))
    assert result["status"] == "success", result
    assert result["failed_cells"] == 0
    table = pd.read_csv(result["table"])
    ids = {depth: sorted(group["id"].tolist()) for depth, group in table.groupby("depth")}
    assert set(ids) == {4, 6}
    assert ids[4] == ids[6] == list(range(1, 16))
    assert {"se_mean_ms", "se_deviation_pct"} <= set(table.columns)


def test_depth_sweep_records_failing_cell(experiment_api, tiny_cfg, tmp_path):
    cfg = tiny_cfg.model_copy(update={"sweep": tiny_cfg.sweep.model_copy(update={"depths": [5, 4]})})
    result = experiment_api.sweep(cfg, "depth", str(tmp_path / "sweep"))
    assert result["status"] == "success"
    assert result["failed_cells"] == 1
    assert any(row["depth"] == 4 and not row["error"] for row in result["rows"])


def test_unknown_sweep_kind(experiment_api, tiny_cfg, tmp_path):
    result = experiment_api.sweep(tiny_cfg, "width", str(tmp_path))
    assert result["status"] == "error"


def test_gradcheck_passes(experiment_api, tmp_path):
    result = experiment_api.gradcheck([0], str(tmp_path))
    assert result["status"] == "success", result
    assert result["worst_rel_error"] <= 1e-4
    table = pd.read_csv(tmp_path / "gradcheck.csv")
    checks = set(table["check"])
    assert {"network.layer1.weight", "network.layer6.beta", "network.layer3.bias"} <= checks
    assert table["passed"].all()


def test_cli_gradcheck_prints_summary(tmp_path, capsys, root_logging):
    code = main(["--log-file", str(tmp_path / "oled.log"), "gradcheck", "--seeds", "1"])
    assert code == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["status"] == "success"
    assert "rows" not in summary


def test_cli_failure_exits_nonzero_with_json_error(tmp_path, capsys, root_logging):
    code = main(["--log-file", str(tmp_path / "oled.log"), "gen-dataset",
                 "--config", str(tmp_path / "absent.toml"), "--out", str(tmp_path / "data")])
    assert code == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["status"] == "error"
    assert error["error_type"] == "ConfigurationError"


def test_cli_usage_error_exits_with_two():
    with pytest.raises(SystemExit) as caught:
        build_parser().parse_args(["reconstruct", "--method", "fourier"])
    assert caught.value.code == 2


@pytest.mark.slow
def test_brain_phantom_detachment_within_five_percent(experiment_api):
    cfg = load_config(str(EXPERIMENTS / "detach_acceptance.toml"))
    tissue = experiment_api._brain_test_case(cfg)
    params = cfg.sequence_params()
    img = experiment_api._test_image(tissue, params, params, None, 0)
    result = experiment_api.detach_api.detach_echoes(img, params, cfg.detach)
    trace = np.asarray(result.objective_trace)
    assert np.all(np.diff(trace) <= 1e-5 * np.abs(trace[:-1]))
    mask = experiment_api.evaluation_api.mask_interior(tissue.t2_ms > 0, cfg.evaluation.erosion_px) & result.mask
    rel = np.abs(result.t2_ms[mask] - tissue.t2_ms[mask]) / tissue.t2_ms[mask]
    assert np.median(rel) <= 0.05


@pytest.mark.slow
def test_desk_training_acceptance(experiment_api, tmp_path):
    cfg = load_config(str(EXPERIMENTS / "desk_training.toml"))
    manifest = experiment_api.gen_dataset(cfg, str(tmp_path / "data"))["manifest"]
    trained = experiment_api.train(cfg, manifest, str(tmp_path / "model"))
    assert trained["status"] == "success", trained
    assert trained["final_val_loss"] <= 0.2 * trained["initial_val_loss"]

    ckpt = ContainerAPI().load_checkpoint(trained["checkpoint"])
    errors = []
    for pair in ContainerAPI().load_training_pairs(manifest, "test"):
        t2 = experiment_api.resnet_api.infer_t2(pair.oled, ckpt)
        mask = experiment_api.evaluation_api.mask_interior(pair.t2_ms > 0, cfg.evaluation.erosion_px)
        errors.append(np.abs(t2[mask] - pair.t2_ms[mask]) / pair.t2_ms[mask])
    assert np.median(np.concatenate(errors)) <= 0.10


@pytest.mark.slow
def test_network_inference_is_faster_than_detachment(experiment_api, tmp_path):
    cfg = load_config(str(EXPERIMENTS / "detach_acceptance.toml"))
    ckpt = experiment_api.resnet_api.init_checkpoint(cfg.network, seed=0)
    experiment_api.resnet_api.resnet_forward(np.random.default_rng(0).standard_normal((2, 2, 16, 16)), ckpt,
                                             mode="train")
    tissue = experiment_api._brain_test_case(cfg)
    params = cfg.sequence_params()
    img = experiment_api._test_image(tissue, params, params, None, 0)
    _, detach_timing, _ = experiment_api.reconstruct_t2(img, params, "detach", cfg)
    _, network_timing, _ = experiment_api.reconstruct_t2(img, params, "network", cfg, ckpt)
    assert network_timing["median_ms"] <= 0.05 * detach_timing["median_ms"]


@pytest.mark.slow
def test_jitter_trained_model_is_more_robust(experiment_api, tmp_path):
    cfg = load_config(str(EXPERIMENTS / "robustness.toml"))
    cfg = cfg.model_copy(update={"sweep": cfg.sweep.model_copy(update={"deviations": [0.10],
                                                                        "directions": ["both"]})})
    result = experiment_api.sweep(cfg, "robustness", str(tmp_path))
    assert result["status"] == "success" and result["failed_cells"] == 0
    worst = {row["mode"]: row["worst_roi_dev_pct"] for row in result["rows"]}
    assert worst["multiple"] < worst["single"]
