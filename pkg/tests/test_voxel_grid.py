import pytest
import numpy as np
from splatvox_pkg.geometry import Intrinsics, Pose, look_at
from splatvox_pkg.scene_io import FrameBundle
from splatvox_pkg.synthetic import raycast_frame, sphere_world
from splatvox_pkg.eval_metrics import MeshEvalConfig, mesh_metrics
from splatvox_pkg.voxel_grid import (
    VoxelGrid, VoxelKey, TriangleMesh, instance_tuple, argmax_label, load_grid_snapshot, read_mesh_ply,
    BLOCK_SIZE,
)

# Fixture for a small camera
@pytest.fixture
def intrinsics():
    return Intrinsics(fx=40.0, fy=40.0, cx=15.5, cy=11.5, width=32, height=24)

# Fixture for a frame facing a flat wall one meter away
@pytest.fixture
def wall_frame(intrinsics):
    color = np.empty(intrinsics.shape + (3,))
    color[...] = [0.2, 0.4, 0.6]
    return FrameBundle(color, np.ones(intrinsics.shape), Pose.identity(), intrinsics)

# Fixture for a grid with the wall integrated once
@pytest.fixture
def wall_grid(wall_frame):
    grid = VoxelGrid(resolution=0.05, truncation=0.2)
    grid.integrate_tsdf(wall_frame)
    return grid

@pytest.mark.parametrize("resolution, truncation", [(0.0, None), (-0.1, None), (0.05, 0.05)])
def test_grid_invalid_parameters(resolution, truncation):
    """Test resolution and truncation validation"""
    with pytest.raises(ValueError):
        VoxelGrid(resolution=resolution, truncation=truncation)

def test_default_truncation():
    """Test that truncation defaults to four voxels"""
    assert VoxelGrid(resolution=0.02).truncation == pytest.approx(0.08)

def test_world_to_voxel_negative_coordinates():
    """Test floor quantization below zero and the block/local split"""
    grid = VoxelGrid(resolution=0.05)
    key = grid.world_to_voxel([-0.01, 0.0, 0.41])
    assert key.index == (-1, 0, 8)
    assert key.block == (-1, 0, 1)
    assert key.local == BLOCK_SIZE - 1
    assert VoxelKey.from_index(key.index) == key
    assert np.allclose(grid.voxel_center(key), [-0.025, 0.025, 0.425])

def test_world_to_voxel_rejects_bad_points():
    """Test that non-finite or malformed points raise"""
    grid = VoxelGrid(resolution=0.05)
    with pytest.raises(ValueError, match="finite 3D point"):
        grid.world_to_voxel([np.nan, 0.0, 0.0])
    with pytest.raises(ValueError, match="finite 3D point"):
        grid.world_to_voxel([0.0, 0.0])

def test_voxel_centers_match_single_lookup():
    """Test that the vectorized centre lookup matches per-key centres"""
    grid = VoxelGrid(resolution=0.1)
    keys = grid.points_to_keys(np.array([[0.05, -0.33, 1.2], [-2.0, 0.7, 0.01]]))
    assert len(keys) == 2
    assert np.allclose(grid.voxel_centers(keys), [grid.voxel_center(k) for k in keys])
    assert grid.points_to_keys(np.zeros((0, 3))) == []

def test_integrate_wall_tsdf(wall_grid):
    """Test signed distances and colors in front of and behind the wall"""
    front = wall_grid.world_to_voxel([0.01, 0.01, 0.91])
    voxel = wall_grid.voxel(front)
    assert voxel.tsdf == pytest.approx((1.0 - 0.925) / 0.2)
    assert voxel.tsdf_weight == 1.0
    assert np.allclose(voxel.color, [0.2, 0.4, 0.6])

    behind = wall_grid.voxel(wall_grid.world_to_voxel([0.01, 0.01, 1.11]))
    assert behind.tsdf == pytest.approx((1.0 - 1.125) / 0.2)

def test_integrate_respects_truncation(wall_grid):
    """Test that only voxels within the truncation band are observed"""
    assert wall_grid.n_voxels > 0
    assert len(wall_grid.last_touched) == wall_grid.n_voxels
    centers = wall_grid.voxel_centers(wall_grid.last_touched)
    assert np.all(np.abs(centers[:, 2] - 1.0) <= 0.2 + 1e-9)
    far = wall_grid.voxel(wall_grid.world_to_voxel([0.01, 0.01, 0.51]))
    assert far is None or far.tsdf_weight == 0.0

def test_integrate_twice_averages(wall_grid, wall_frame):
    """Test the running mean with weight 1 per update"""
    touched = wall_grid.integrate_tsdf(wall_frame)
    key = wall_grid.world_to_voxel([0.01, 0.01, 0.91])
    assert key in touched
    voxel = wall_grid.voxel(key)
    assert voxel.tsdf_weight == 2.0
    assert voxel.tsdf == pytest.approx(0.375)
    assert wall_grid.frame_counter == 2

def test_integrate_empty_depth(wall_grid, wall_frame):
    """Test that an all-invalid frame advances the counter and touches nothing"""
    empty = FrameBundle(wall_frame.color, np.zeros(wall_frame.depth.shape), wall_frame.pose, wall_frame.intrinsics)
    n_voxels = wall_grid.n_voxels
    assert wall_grid.integrate_tsdf(empty) == set()
    assert wall_grid.frame_counter == 2
    assert wall_grid.n_voxels == n_voxels
    assert wall_grid.last_touched == set()

def test_visible_voxels_match_touched(wall_grid, wall_frame):
    """Test that the integrated frame sees exactly the voxels it touched"""
    assert set(wall_grid.visible_voxels(wall_frame)) == wall_grid.last_touched
    assert VoxelGrid(resolution=0.05).visible_voxels(wall_frame) == []

def test_mask_to_voxels(wall_grid, wall_frame):
    """Test that a mask maps to touched voxels on its side of the image"""
    mask = np.zeros(wall_frame.depth.shape, bool)
    mask[:, :8] = True
    region = wall_grid.mask_to_voxels(mask, wall_frame.depth, wall_frame.pose, wall_frame.intrinsics)
    assert region
    assert region <= wall_grid.last_touched
    centers = wall_grid.voxel_centers(region)
    assert np.all(centers[:, 0] < 0)

    with pytest.raises(ValueError, match="does not match"):
        wall_grid.mask_to_voxels(mask[:5], wall_frame.depth, wall_frame.pose, wall_frame.intrinsics)
    assert wall_grid.mask_to_voxels(np.zeros_like(mask), wall_frame.depth, wall_frame.pose, wall_frame.intrinsics) == set()

def test_instance_counts_and_labels():
    """Test count updates, argmax with smallest-ID ties and normalization"""
    grid = VoxelGrid(resolution=0.05)
    key = grid.world_to_voxel([0.0, 0.0, 0.0])
    assert grid.label_query(key) is None
    grid.add_count(key, 3)
    grid.add_count(key, 2)
    assert grid.label_query(key) == 2
    grid.add_count(key, 3, n=2)
    assert grid.label_query(key) == 3
    assert grid.instance_tuple(key) == {3: 0.75, 2: 0.25}
    assert grid.total_count(key) == 4

    grid.set_label(key, 5)
    assert grid.counts(key) == {5: 1}
    assert grid.labeled_keys() == [key]
    assert grid.label_sizes() == {5: 1}

def test_neighbour_labels():
    """Test label lookup around a region, including the region itself"""
    grid = VoxelGrid(resolution=0.1)
    grid.add_count(VoxelKey.from_index((0, 0, 0)), 1)
    grid.add_count(VoxelKey.from_index((1, 1, 1)), 2)
    grid.add_count(VoxelKey.from_index((3, 0, 0)), 3)
    grid.add_count(VoxelKey.from_index((-1, 0, 0)), 4)
    region = [VoxelKey.from_index((0, 0, 0))]
    assert grid.neighbour_labels(region) == {1, 2, 4}
    assert grid.neighbour_labels(region, radius=0) == {1}
    assert grid.neighbour_labels(region, radius=3) == {1, 2, 3, 4}
    assert grid.neighbour_labels([]) == set()

def test_instance_tuple_helpers():
    """Test the module-level normalization and argmax helpers"""
    assert instance_tuple({}) == {}
    assert instance_tuple({1: 1, 4: 3}) == {1: 0.25, 4: 0.75}
    assert argmax_label({}) is None
    assert argmax_label({7: 2, 4: 2, 9: 1}) == 4

def test_new_voxel_set(wall_grid, wall_frame):
    """Test that voxels are new only in the frame their counts first appear"""
    touched = sorted(wall_grid.last_touched)
    key, other = touched[0], touched[-1]
    wall_grid.add_count(key, 1)
    assert wall_grid.new_voxel_set(wall_grid.last_touched) == {key}

    wall_grid.integrate_tsdf(wall_frame)
    wall_grid.add_count(key, 1)
    wall_grid.add_count(other, 2)
    assert wall_grid.new_voxel_set(wall_grid.last_touched) == {other}

def test_new_voxel_sets_partition_counted_voxels(intrinsics):
    """Test that new-voxel sets of successive frames are disjoint and cover every counted voxel"""
    grid = VoxelGrid(resolution=0.05, truncation=0.2)
    color = np.full(intrinsics.shape + (3,), 0.5)
    mask = np.zeros(intrinsics.shape, bool)
    mask[:, :20] = True
    new_sets = []
    for x in [0.0, 0.1, 0.25, 0.1, 0.4]:
        frame = FrameBundle(color, np.ones(intrinsics.shape), Pose(np.eye(3), [x, 0.0, 0.0]), intrinsics)
        touched = grid.integrate_tsdf(frame)
        for key in grid.mask_to_voxels(mask, frame.depth, frame.pose, frame.intrinsics):
            grid.add_count(key, 1)
        new_sets.append(grid.new_voxel_set(touched))

    assert all(new_sets[0:3])
    for i, a in enumerate(new_sets):
        for b in new_sets[i + 1:]:
            assert not a & b
    assert set().union(*new_sets) == set(grid.labeled_keys())
    assert new_sets[3] == set()

def test_registration(wall_grid):
    """Test keyframe registration flags"""
    key = next(iter(wall_grid.last_touched))
    assert not wall_grid.is_registered(key)
    wall_grid.set_registered([key, VoxelKey((99, 99, 99), 0)])
    assert wall_grid.is_registered(key)
    assert not wall_grid.is_registered(VoxelKey((99, 99, 99), 0))

def test_extract_mesh_wall(wall_grid):
    """Test that the wall mesh lies on the wall and faces the camera"""
    mesh = wall_grid.extract_mesh()
    assert not mesh.is_empty
    assert np.allclose(mesh.vertices[:, 2], 1.0, atol=1e-6)
    assert np.allclose(mesh.colors, [0.2, 0.4, 0.6], atol=1e-4)
    normals = mesh.to_trimesh().face_normals
    assert normals[:, 2].mean() < 0

def test_extract_mesh_edge_cases(wall_grid):
    """Test an empty grid and a mismatched resolution"""
    assert VoxelGrid(resolution=0.05).extract_mesh().is_empty
    with pytest.raises(ValueError, match="grid resolution"):
        wall_grid.extract_mesh(resolution=0.01)

def test_mesh_ply(tmp_path, wall_grid):
    """Test that a written mesh reads back with the same topology"""
    mesh = wall_grid.extract_mesh()
    mesh.write_ply(tmp_path / "mesh.ply")
    loaded = read_mesh_ply(tmp_path / "mesh.ply")
    assert np.array_equal(loaded.faces, mesh.faces)
    assert np.allclose(loaded.vertices, mesh.vertices, atol=1e-5)
    assert np.allclose(loaded.colors, mesh.colors, atol=1 / 255)

    TriangleMesh().write_ply(tmp_path / "empty.ply")
    assert read_mesh_ply(tmp_path / "empty.ply").is_empty

def test_snapshot_restores_grid(tmp_path, wall_grid):
    """Test that a snapshot restores geometry, counts, flags and the frame counter"""
    key = next(iter(wall_grid.last_touched))
    wall_grid.add_count(key, 7, n=3)
    wall_grid.set_registered([key])
    wall_grid.save_snapshot(tmp_path / "grid.ovxg")

    loaded = load_grid_snapshot(tmp_path / "grid.ovxg")
    assert loaded.resolution == wall_grid.resolution
    assert loaded.truncation == wall_grid.truncation
    assert loaded.frame_counter == 1
    assert loaded.n_blocks == wall_grid.n_blocks
    assert loaded.n_voxels == wall_grid.n_voxels
    assert loaded.counts(key) == {7: 3}
    assert loaded.is_registered(key)
    assert loaded.voxel(key).tsdf == pytest.approx(wall_grid.voxel(key).tsdf, abs=1e-6)

def test_snapshot_bad_magic(tmp_path):
    """Test that a foreign file is rejected"""
    path = tmp_path / "grid.ovxg"
    path.write_bytes(b"NOPE" + bytes(32))
    with pytest.raises(ValueError, match="not a voxel grid snapshot"):
        load_grid_snapshot(path)

def test_extract_mesh_sphere():
    """Test that a sphere fused from all around is closed and lies within a voxel of the surface"""
    world = sphere_world(embedding_dim=4)
    center = world.objects[0].shape.center
    intrinsics = Intrinsics.from_fov(96, 96, 60.0)
    directions = [d for d in np.array(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1])).reshape(3, -1).T
                  if np.count_nonzero(d) in (1, 3)]
    assert len(directions) == 14
    grid = VoxelGrid(resolution=0.03)
    for t, d in enumerate(directions):
        eye = center + 1.6 * d / np.linalg.norm(d)
        frame, _, _ = raycast_frame(world, look_at(eye, center), intrinsics, timestamp=t)
        grid.integrate_tsdf(frame)

    mesh = grid.extract_mesh()
    assert not mesh.is_empty
    error = np.abs(np.linalg.norm(mesh.vertices - center, axis=1) - 0.5)
    assert error.mean() <= 0.03

    edges = np.sort(mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, uses = np.unique(edges, axis=0, return_counts=True)
    assert np.all(uses == 2)

    metrics = mesh_metrics(mesh, mesh, MeshEvalConfig(samples=5000))
    assert metrics.acc_cm < 1e-9
    assert metrics.comp_cm < 1e-9
