import json
import copy
import dataclasses
import pytest
import numpy as np
import pandas as pd
from unittest.mock import patch
from splatvox_pkg.errors import DataError, NumericalError, StageError
from splatvox_pkg.config import GridConfig, SyntheticConfig, PipelineConfig
from splatvox_pkg.eval_metrics import MeshEvalConfig, instance_label_accuracy, zero_shot_segmentation
from splatvox_pkg.gaussian_field import OptimConfig, load_splat_ply, optimize_frame
from splatvox_pkg.splat_render import CameraModel, LossWeights, loss_all, render
from splatvox_pkg.instance_fusion import FusionConfig, InstanceCodebook
from splatvox_pkg.synthetic import NoiseConfig, SyntheticWorld, orbit_poses, gt_voxel_labels, gt_voxel_classes
from splatvox_pkg.voxel_grid import read_mesh_ply, load_grid_snapshot
from splatvox_pkg.pipeline import (
    STAGES, LOSS_COLUMNS, MapState, run_build, run_render, run_eval, export_mesh, export_splat, synth, load_poses,
    synthetic_frames, process_frame, expected_depth, RenderedView,
)

ARTIFACTS = [
    "grid.ovxg", "codebook.ovcb", "gaussians.ply", "loss_trace.csv", "associations.ndjson", "timings.csv",
    "run_report.json", "config.json", "poses.json", "intrinsics.json", "keyframes.json", "world.json",
]

# Fixture for a small and fast synthetic configuration
@pytest.fixture(scope="module")
def small_config():
    return PipelineConfig(
        grid=GridConfig(resolution=0.1),
        optim=OptimConfig(warmup_iters=2, iters_per_frame=1, kf_sample=2),
        synthetic=SyntheticConfig(n_frames=3, width=48, height=36),
        eval=MeshEvalConfig(samples=2000, fuse_resolution=0.05),
        embedding_dim=8,
    )

# Fixture for one synthetic build shared by the artifact tests
@pytest.fixture(scope="module")
def built(small_config, tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("build")
    report = run_build(small_config, source="synthetic", out_dir=out_dir)
    return out_dir, report

def test_build_writes_artifacts(built):
    """Test that a build persists every artifact and a consistent report"""
    out_dir, report = built
    for name in ARTIFACTS:
        assert (out_dir / name).exists(), name
    assert report.n_frames == 3
    assert report.counts["instances"] >= 1
    assert report.counts["gaussians"] == report.counts["new_voxels"] > 0
    assert report.counts["keyframes"] >= 1
    assert report.fps > 0
    assert json.loads((out_dir / "run_report.json").read_text())["n_frames"] == 3

def test_build_loss_trace(built):
    """Test the loss trace of warmup plus one iteration per later frame"""
    out_dir, report = built
    trace = pd.read_csv(out_dir / "loss_trace.csv")
    assert list(trace.columns) == LOSS_COLUMNS
    assert len(trace) == 2 + 1 + 1
    assert list(trace["iter"]) == [0, 1, 2, 3]
    assert list(trace["frame"]) == [0, 0, 1, 2]
    assert report.final_loss == pytest.approx(trace["total"].iloc[-1])
    assert np.isfinite(trace[["rgb", "ssim", "depth", "normal", "total"]].to_numpy()).all()

def test_build_timings(built):
    """Test one timing per stage and frame, in stage order"""
    out_dir, report = built
    assert all(list(t) == list(STAGES) for t in report.timings)
    timings = pd.read_csv(out_dir / "timings.csv")
    assert list(timings.columns) == ["frame", "stage", "ms"]
    assert len(timings) == 3 * len(STAGES)
    assert (timings["ms"] >= 0).all()

def test_build_associations_and_codebook(built, small_config):
    """Test the association log against the stored codebook"""
    out_dir, report = built
    records = [json.loads(line) for line in (out_dir / "associations.ndjson").read_text().splitlines()]
    assert records
    assert set(records[0]) == {"t", "k", "id", "score", "new", "n_voxels"}
    codebook = InstanceCodebook.load(out_dir / "codebook.ovcb")
    assert codebook.dim == small_config.embedding_dim
    assert len(codebook) == report.counts["instances"]
    assert {r["id"] for r in records if r["new"]} == set(codebook.ids)
    grid = load_grid_snapshot(out_dir / "grid.ovxg")
    assert set(grid.label_sizes()) <= set(codebook.ids)

def test_load_poses(built):
    """Test that recorded poses are the orbit cameras"""
    out_dir, _ = built
    poses = load_poses(out_dir)
    expected = orbit_poses(3, radius=1.6, height=1.0)
    assert [t for t, _ in poses] == [0, 1, 2]
    for (_, pose), ref in zip(poses, expected):
        assert np.allclose(pose.matrix(), ref.matrix(), atol=1e-9)

def test_run_render(built, tmp_path):
    """Test rendering the build poses and writing PNGs"""
    out_dir, _ = built
    views = run_render(out_dir, out_dir=tmp_path / "renders")
    assert len(views) == 3
    assert views[0].color.shape == (36, 48, 3)
    assert views[0].depth.shape == (36, 48)
    assert np.all((views[0].alpha >= 0) & (views[0].alpha <= 1))
    assert len(list((tmp_path / "renders").glob("*.png"))) == 9
    assert (tmp_path / "renders" / "000002_normal.png").exists()

def test_run_eval(built, tmp_path):
    """Test the metric report against the stored synthetic world"""
    out_dir, _ = built
    report = run_eval(out_dir, out_dir=tmp_path)
    assert report["rendering"]["n_views"] == 3
    assert 0 < report["rendering"]["psnr"] <= 99
    assert "mesh" in report
    assert set(report["semantic"]) == {"classes", "iou", "acc", "mIoU", "fIoU", "mAcc", "fAcc"}
    assert 0.0 <= report["instances"]["accuracy"] <= 1.0
    assert json.loads((tmp_path / "metrics.json").read_text())["rendering"]["n_views"] == 3
    assert "PSNR [dB]" in (tmp_path / "metrics.md").read_text()

def test_run_eval_without_ground_truth(built, tmp_path):
    """Test that an evaluation without world or manifest raises DataError"""
    with pytest.raises(DataError, match="No ground truth"):
        run_eval(tmp_path)

def test_exports(built, tmp_path):
    """Test mesh and splat export"""
    out_dir, report = built
    mesh = export_mesh(out_dir, tmp_path / "mesh.ply")
    assert len(read_mesh_ply(tmp_path / "mesh.ply").faces) == len(mesh.faces)
    gaussians = export_splat(out_dir, tmp_path / "splat.ply")
    assert len(gaussians) == report.counts["gaussians"]
    assert len(load_splat_ply(tmp_path / "splat.ply")) == len(gaussians)

def test_export_missing_artifact(tmp_path):
    """Test that exports from an empty directory raise DataError"""
    with pytest.raises(DataError, match="Missing artifact"):
        export_mesh(tmp_path, tmp_path / "mesh.ply")
    with pytest.raises(DataError, match="Missing artifact"):
        export_splat(tmp_path, tmp_path / "splat.ply")

def test_mapping_only_build(small_config, tmp_path):
    """Test that a build without optimization still seeds Gaussians and writes an empty loss trace"""
    config = dataclasses.replace(small_config, optimize=False)
    report = run_build(config, out_dir=tmp_path)
    assert report.final_loss is None
    assert report.counts["gaussians"] > 0
    assert len(pd.read_csv(tmp_path / "loss_trace.csv")) == 0

def test_synth_then_replay(small_config, tmp_path):
    """Test that a written synthetic dataset replays into a map with its ground truth"""
    config = dataclasses.replace(small_config, optimize=False)
    manifest = synth(config, out_dir=tmp_path / "data")
    assert manifest.exists()
    assert (tmp_path / "data" / "world.json").exists()
    assert len(manifest.read_text().splitlines()) == 3

    report = run_build(config, source="replay", manifest=manifest, out_dir=tmp_path / "map")
    assert report.n_frames == 3
    assert report.counts["instances"] >= 1
    assert (tmp_path / "map" / "world.json").exists()
    assert InstanceCodebook.load(tmp_path / "map" / "codebook.ovcb").dim == small_config.embedding_dim

def test_build_source_errors(small_config, tmp_path):
    """Test unknown sources and replay builds without a manifest"""
    with pytest.raises(ValueError, match="Unknown source"):
        run_build(small_config, source="camera", out_dir=tmp_path)
    with pytest.raises(ValueError, match="needs a manifest"):
        run_build(small_config, source="replay", out_dir=tmp_path)

def test_replay_missing_manifest(small_config, tmp_path):
    """Test that a missing manifest fails in the obtain stage with the data exit code"""
    with pytest.raises(StageError, match="Frame 0, stage 'obtain'") as info:
        run_build(small_config, source="replay", manifest=tmp_path / "absent.ndjson", out_dir=tmp_path)
    assert info.value.exit_code == 3

@patch('splatvox_pkg.pipeline.seed_gaussians')
def test_stage_failure_names_frame_and_stage(mock_seed, small_config, tmp_path):
    """Test that a failing stage is reported with its frame and the cause's exit code"""
    mock_seed.side_effect = NumericalError("boom")
    with pytest.raises(StageError, match="Frame 0, stage 'seed': boom") as info:
        run_build(small_config, out_dir=tmp_path)
    assert info.value.exit_code == 4
    assert isinstance(info.value.__cause__, NumericalError)

def test_process_frame_records_state(small_config):
    """Test that one frame updates grid, field, buffer and timings"""
    config = dataclasses.replace(small_config, optimize=False)
    state = MapState.create(config)
    frame, obs = next(synthetic_frames(config))
    timings = {}
    process_frame(state, frame, obs, config, np.random.default_rng(0), timings)
    assert set(timings) == set(STAGES) - {"obtain"}
    assert state.grid.n_voxels > 0
    assert len(state.field) == state.new_voxel_total
    assert state.keyframe_ids == [0]
    assert len(state.poses) == 1
    assert state.codebook.dim == config.embedding_dim

def test_expected_depth():
    """Test alpha normalization of rendered depth"""
    view = RenderedView(0, np.zeros((1, 3, 3)), np.array([[0.5, 0.1, 2.0]]), np.zeros((1, 3, 3)), np.array([[0.5, 0.2, 1.0]]))
    assert np.allclose(expected_depth(view), [[1.0, 0.0, 2.0]])

# Fixture for the four-object scene mapped without optimization
@pytest.fixture(scope="module")
def four_object_config():
    return PipelineConfig(
        grid=GridConfig(resolution=0.03),
        synthetic=SyntheticConfig(scene="four_objects", n_frames=20, width=64, height=48),
        optimize=False,
    )

# Fixture for one noise-free build of the four-object scene
@pytest.fixture(scope="module")
def four_object_build(four_object_config, tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("four_objects")
    report = run_build(four_object_config, out_dir=out_dir)
    return out_dir, report

def score_build(out_dir):
    """Instance and semantic scores of a synthetic build against its stored world."""
    world = SyntheticWorld.load(out_dir / "world.json")
    grid = load_grid_snapshot(out_dir / "grid.ovxg")
    codebook = InstanceCodebook.load(out_dir / "codebook.ovcb")
    labels = gt_voxel_labels(world, grid)
    semantic = zero_shot_segmentation(grid, codebook, world.class_embeddings(), gt_voxel_classes(world, labels))
    return instance_label_accuracy(grid, labels), semantic, codebook

def test_noise_free_build_finds_every_object(four_object_build):
    """Test that a noise-free four-object run ends with one instance per object and correct voxel labels"""
    out_dir, report = four_object_build
    instances, _, codebook = score_build(out_dir)
    assert len(codebook) == 4
    assert report.counts["instances"] == 4
    assert instances.n_instances == 4
    assert instances.accuracy >= 0.99
    assert instances.merge_rate == 0.0

def test_noise_free_zero_shot_segmentation(four_object_build):
    """Test that orthogonal class embeddings segment the noise-free map almost perfectly"""
    out_dir, _ = four_object_build
    _, semantic, _ = score_build(out_dir)
    assert set(semantic.iou) == {"ball", "crate", "can", "book"}
    for value in (semantic.miou, semantic.fiou, semantic.macc, semantic.facc):
        assert value >= 0.98

def test_build_is_deterministic(four_object_config, four_object_build, tmp_path):
    """Test that a repeated build writes byte-identical codebook and association log"""
    out_dir, _ = four_object_build
    run_build(four_object_config, out_dir=tmp_path)
    assert (tmp_path / "codebook.ovcb").read_bytes() == (out_dir / "codebook.ovcb").read_bytes()
    assert (tmp_path / "associations.ndjson").read_bytes() == (out_dir / "associations.ndjson").read_bytes()

def test_counting_beats_last_write_under_noise(four_object_config, tmp_path):
    """Test that label counting stays accurate under segmentation noise and beats last-write labels"""
    noise = NoiseConfig(p_drop=0.2, p_split=0.2, embed_sigma=0.1)
    accuracy = {}
    for counting in ["dirichlet", "last_write"]:
        config = dataclasses.replace(four_object_config, noise=noise, fusion=FusionConfig(counting=counting))
        run_build(config, out_dir=tmp_path / counting)
        accuracy[counting] = score_build(tmp_path / counting)[0].accuracy
    assert accuracy["dirichlet"] >= 0.9
    assert accuracy["dirichlet"] > accuracy["last_write"]

def test_revisits_never_seed_a_voxel_twice():
    """Test that a back-and-forth trajectory seeds each voxel once, with the fixed seed scale and opacity"""
    config = PipelineConfig(
        grid=GridConfig(resolution=0.05),
        synthetic=SyntheticConfig(scene="two_objects", n_frames=50, width=32, height=24, loops=3),
        optimize=False,
    )
    state = MapState.create(config)
    rng = np.random.default_rng(0)
    per_frame = []
    for index, (frame, obs) in enumerate(synthetic_frames(config)):
        before = len(state.field)
        process_frame(state, frame, obs, config, rng, {}, frame_index=index)
        per_frame.append(len(state.field) - before)
    assert len(per_frame) == 50
    assert len(state.field) == sum(per_frame) == state.new_voxel_total
    assert len(set(state.field.voxel_keys)) == len(state.field.voxel_keys)
    assert set(state.field.voxel_keys) == set(state.grid.labeled_keys())
    assert np.allclose(state.field.s, 0.2 * 0.05)
    assert np.all(state.field.o == 0.5)

def mean_normal_error(field, clean_frames):
    """Mean 1 - cos between normals of rendered depth and of noise-free depth."""
    weights = LossWeights(w_rgb=0.0, w_ssim=0.0, w_depth=0.0, w_normal=1.0)
    errors = [
        loss_all(render(field, clean.pose, clean.intrinsics), CameraModel.identity(), clean, weights).l_normal
        for clean in clean_frames
    ]
    return float(np.mean(errors))

def test_normal_loss_does_not_hurt_normals_under_depth_noise():
    """Test that the normal term gives rendered normals no worse than training without it"""
    config = PipelineConfig(
        grid=GridConfig(resolution=0.04),
        synthetic=SyntheticConfig(scene="tilted_plane", n_frames=3, width=96, height=72),
        noise=NoiseConfig(depth_sigma=0.01),
        optimize=False,
    )
    state = MapState.create(config)
    for index, (frame, obs) in enumerate(synthetic_frames(config)):
        process_frame(state, frame, obs, config, np.random.default_rng(0), {}, frame_index=index)
    clean_frames = [frame for frame, _ in synthetic_frames(dataclasses.replace(config, noise=NoiseConfig()))]
    assert len(state.field) > 0 and len(state.buffer) > 0

    errors = {}
    for w_normal in [0.1, 0.0]:
        field, buffer = copy.deepcopy(state.field), copy.deepcopy(state.buffer)
        cfg = OptimConfig(lr_opacity=5.0, warmup_iters=100, w_normal=w_normal, use_camera_model=False)
        optimize_frame(field, buffer, cfg, np.random.default_rng(0), warmup=True)
        errors[w_normal] = mean_normal_error(field, clean_frames)
    assert errors[0.1] <= errors[0.0]
