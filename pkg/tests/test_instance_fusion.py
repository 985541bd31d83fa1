import json
import pytest
import numpy as np
from splatvox_pkg.geometry import Intrinsics, Pose
from splatvox_pkg.scene_io import FrameBundle, SegObservation
from splatvox_pkg.voxel_grid import VoxelGrid, VoxelKey
from splatvox_pkg.instance_fusion import (
    FusionConfig, AssociationResult, InstanceCodebook, geometric_similarity, embedding_similarity,
    visibility_ratio, associate, update_voxels, update_codebook, retrieve_instance, instance_voxels,
    write_association_log,
)

E1 = np.array([1.0, 0.0, 0.0, 0.0])
E2 = np.array([0.0, 1.0, 0.0, 0.0])

# Fixture for a frame facing a flat wall one meter away
@pytest.fixture
def wall_frame():
    intrinsics = Intrinsics(fx=40.0, fy=40.0, cx=15.5, cy=11.5, width=32, height=24)
    color = np.full(intrinsics.shape + (3,), 0.5)
    return FrameBundle(color, np.ones(intrinsics.shape), Pose.identity(), intrinsics, timestamp=0)

# Fixture for left and right halves of the wall with orthogonal embeddings
@pytest.fixture
def halves(wall_frame):
    left = np.zeros(wall_frame.depth.shape, bool)
    left[:, :16] = True
    return SegObservation([left, ~left], [E1, E2])

# Fixture for an empty grid and codebook
@pytest.fixture
def empty_map():
    return VoxelGrid(resolution=0.05, truncation=0.2), InstanceCodebook(4)

def run_frame(frame, obs, grid, codebook, cfg):
    """One integrate-associate-update cycle."""
    grid.integrate_tsdf(frame)
    results = associate(obs, frame, grid, codebook, cfg)
    update_voxels(results, grid, cfg.counting)
    update_codebook(results, obs, codebook)
    return results

@pytest.mark.parametrize("kwargs", [
    dict(xi=1.5), dict(lambda_geo=-0.1), dict(counting="mode"), dict(neighbour_radius=-1), dict(neighbour_radius=1.5),
])
def test_fusion_config_invalid(kwargs):
    """Test that out-of-range parameters are rejected"""
    with pytest.raises(ValueError):
        FusionConfig(**kwargs)

def test_first_frame_creates_instances(wall_frame, halves, empty_map):
    """Test that an empty map gives every mask a new instance"""
    grid, codebook = empty_map
    results = run_frame(wall_frame, halves, grid, codebook, FusionConfig())
    assert [r.instance_id for r in results] == [1, 2]
    assert all(r.is_new and r.score == 1.0 for r in results)
    assert codebook.ids == [1, 2]
    assert np.allclose(codebook.embedding(1), E1)
    assert set(grid.label_sizes()) == {1, 2}
    for key in results[0].voxels:
        assert grid.counts(key) == {1: 1}

def test_second_frame_reuses_instances(wall_frame, halves, empty_map):
    """Test that a repeated observation associates with the existing instances"""
    grid, codebook = empty_map
    cfg = FusionConfig()
    run_frame(wall_frame, halves, grid, codebook, cfg)
    results = run_frame(wall_frame, halves, grid, codebook, cfg)
    assert [r.instance_id for r in results] == [1, 2]
    assert not any(r.is_new for r in results)
    assert all(r.score > 0.75 for r in results)
    assert results[0].visibility == pytest.approx(1.0)
    assert len(codebook) == 2
    assert codebook.weight(1) > 1.0
    key = next(iter(results[0].voxels))
    assert grid.counts(key) == {1: 2}

def test_threshold_one_never_fuses(wall_frame, halves, empty_map):
    """Test that scores can never exceed a threshold of 1 and IDs are not reused"""
    grid, codebook = empty_map
    cfg = FusionConfig(xi=1.0)
    run_frame(wall_frame, halves, grid, codebook, cfg)
    results = run_frame(wall_frame, halves, grid, codebook, cfg)
    assert [r.instance_id for r in results] == [3, 4]
    assert codebook.ids == [1, 2, 3, 4]

def test_opposite_embedding_is_clamped(wall_frame, halves, empty_map):
    """Test that negative cosine similarity contributes nothing to the score"""
    grid, codebook = empty_map
    run_frame(wall_frame, halves, grid, codebook, FusionConfig())
    flipped = SegObservation(halves.masks, [-E1, -E2])
    grid.integrate_tsdf(wall_frame)
    results = associate(flipped, wall_frame, grid, codebook, FusionConfig(xi=0.6))
    assert all(r.is_new for r in results)
    results = associate(flipped, wall_frame, grid, codebook, FusionConfig(xi=0.25))
    assert [r.instance_id for r in results] == [1, 2]
    assert all(r.score <= 0.5 + 1e-12 for r in results)

@pytest.mark.parametrize("embedding, radius, expected_id, is_new", [
    (E1, 1, 1, False),
    (E2, 1, 2, True),
    (E1, 0, 2, True),
])
def test_unlabeled_region_next_to_instance(wall_frame, empty_map, embedding, radius, expected_id, is_new):
    """Test that a region without counts can join the instance labeling its neighbour voxels"""
    grid, codebook = empty_map
    left = np.zeros(wall_frame.depth.shape, bool)
    left[:, :16] = True
    run_frame(wall_frame, SegObservation([left], [E1]), grid, codebook, FusionConfig())
    grid.integrate_tsdf(wall_frame)
    cfg = FusionConfig(neighbour_radius=radius)
    results = associate(SegObservation([~left], [embedding]), wall_frame, grid, codebook, cfg)
    assert not results[0].voxels & set(grid.labeled_keys())
    assert results[0].instance_id == expected_id
    assert results[0].is_new is is_new
    if not is_new:
        assert results[0].score == pytest.approx(0.5)

def test_mask_without_depth_is_skipped(wall_frame, empty_map):
    """Test that a mask over invalid depth is skipped with a warning"""
    grid, codebook = empty_map
    depth = wall_frame.depth.copy()
    depth[:, :4] = 0.0
    frame = FrameBundle(wall_frame.color, depth, wall_frame.pose, wall_frame.intrinsics, timestamp=5)
    mask = np.zeros(depth.shape, bool)
    mask[:, :4] = True
    obs = SegObservation([mask, ~mask], [E1, E2])
    grid.integrate_tsdf(frame)
    with pytest.warns(UserWarning, match="Frame 5, mask 0"):
        results = associate(obs, frame, grid, codebook, FusionConfig())
    assert results[0].skipped and results[0].instance_id is None
    assert results[1].instance_id == 1
    update_voxels(results, grid)
    update_codebook(results, obs, codebook)
    assert codebook.ids == [1]
    assert results[0].to_record(5) == {"t": 5, "k": 0, "id": None, "score": 0.0, "new": False, "n_voxels": 0}

def test_geometric_similarity():
    """Test the mean instance probability over a region"""
    grid = VoxelGrid(resolution=0.1)
    a, b = VoxelKey((0, 0, 0), 0), VoxelKey((0, 0, 0), 1)
    grid.add_count(a, 1, n=3)
    grid.add_count(a, 2)
    grid.add_count(b, 1)
    assert geometric_similarity({a, b}, 1, grid) == pytest.approx(0.875)
    assert geometric_similarity({a, b}, 2, grid) == pytest.approx(0.125)
    assert geometric_similarity({a}, 9, grid) == 0.0
    with pytest.raises(ValueError, match="empty voxel region"):
        geometric_similarity(set(), 1, grid)

def test_embedding_similarity():
    """Test the dot product and the zero-vector error"""
    assert embedding_similarity(E1, E1) == pytest.approx(1.0)
    assert embedding_similarity(E1, -E1) == pytest.approx(-1.0)
    with pytest.raises(ValueError, match="zero vector"):
        embedding_similarity(E1, np.zeros(4))

def test_visibility_ratio():
    """Test coverage of an instance by a mask region, clamped to one"""
    grid = VoxelGrid(resolution=0.1)
    keys = [VoxelKey((0, 0, 0), i) for i in range(6)]
    for key in keys[:4]:
        grid.add_count(key, 1)
    assert visibility_ratio(AssociationResult(0, 1, 0.9, False, set(keys[:2])), grid) == 0.5
    assert visibility_ratio(AssociationResult(0, 1, 0.9, False, set(keys)), grid) == 1.0
    assert visibility_ratio(AssociationResult(0, 7, 0.9, False, set(keys[:1])), grid) == 1.0

def test_update_voxels_last_write():
    """Test that last-write counting replaces earlier labels"""
    grid = VoxelGrid(resolution=0.1)
    key = VoxelKey((0, 0, 0), 0)
    grid.add_count(key, 1, n=5)
    update_voxels([AssociationResult(0, 2, 0.9, False, {key})], grid, counting="last_write")
    assert grid.counts(key) == {2: 1}
    with pytest.raises(ValueError, match="counting mode"):
        update_voxels([], grid, counting="mode")

def test_codebook_fuse_weighted():
    """Test the credibility-weighted embedding update"""
    codebook = InstanceCodebook(2)
    codebook.seed(1, [1.0, 0.0], 1.0)
    obs = SegObservation([np.ones((2, 2), bool)], [np.array([0.0, 1.0])])
    result = AssociationResult(0, 1, 0.5, False, {VoxelKey((0, 0, 0), 0)}, visibility=0.5)
    update_codebook([result], obs, codebook)
    expected = np.array([1.0, 0.25]) / np.linalg.norm([1.0, 0.25])
    assert np.allclose(codebook.embedding(1), expected)
    assert codebook.weight(1) == pytest.approx(1.25)
    assert np.linalg.norm(codebook.embedding(1)) == pytest.approx(1.0)

def test_codebook_validation():
    """Test dimension and weight checks"""
    with pytest.raises(ValueError, match="positive"):
        InstanceCodebook(0)
    codebook = InstanceCodebook(3)
    with pytest.raises(ValueError, match="codebook dimension"):
        codebook.seed(1, [1.0, 0.0], 1.0)
    with pytest.raises(ValueError, match="non-negative"):
        codebook.seed(1, [1.0, 0.0, 0.0], -1.0)

def test_codebook_ids_monotonic():
    """Test that seeding an explicit ID advances the allocator"""
    codebook = InstanceCodebook(2)
    assert codebook.allocate_id() == 1
    codebook.seed(5, [0.0, 1.0], 1.0)
    assert codebook.allocate_id() == 6
    assert 5 in codebook and 1 not in codebook

def test_codebook_save_load(tmp_path):
    """Test that a saved codebook restores IDs, weights and embeddings"""
    codebook = InstanceCodebook(3)
    codebook.seed(2, [0.0, 3.0, 4.0], 0.75)
    codebook.seed(9, [1.0, 0.0, 0.0], 2.0)
    codebook.save(tmp_path / "codebook.ovcb")
    loaded = InstanceCodebook.load(tmp_path / "codebook.ovcb")
    assert loaded.ids == [2, 9]
    assert loaded.dim == 3
    assert loaded.weight(2) == pytest.approx(0.75)
    assert np.allclose(loaded.embedding(2), [0.0, 0.6, 0.8])
    assert loaded.allocate_id() == 10

def test_codebook_bad_magic(tmp_path):
    """Test that a foreign file is rejected"""
    path = tmp_path / "codebook.ovcb"
    path.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(ValueError, match="not an instance codebook"):
        InstanceCodebook.load(path)

def test_retrieve_instance():
    """Test query retrieval with smallest-ID ties"""
    codebook = InstanceCodebook(2)
    with pytest.raises(ValueError, match="empty codebook"):
        retrieve_instance([1.0, 0.0], codebook)
    codebook.seed(3, [1.0, 0.0], 1.0)
    codebook.seed(4, [0.0, 1.0], 1.0)
    codebook.seed(7, [1.0, 0.0], 1.0)
    gamma, sim = retrieve_instance(np.array([0.9, 0.1]), codebook)
    assert gamma == 3
    assert sim == pytest.approx(0.9)

def test_instance_voxels():
    """Test the voxel listing of an instance by argmax label"""
    grid = VoxelGrid(resolution=0.1)
    a, b, c = (VoxelKey((0, 0, 0), i) for i in range(3))
    grid.add_count(a, 1)
    grid.add_count(b, 1)
    grid.add_count(b, 2, n=2)
    grid.add_count(c, 1)
    assert instance_voxels(1, grid) == [a, c]
    assert instance_voxels(2, grid) == [b]
    assert instance_voxels(3, grid) == []

def test_write_association_log(tmp_path, wall_frame, halves, empty_map):
    """Test that association records are appended as JSON lines"""
    grid, codebook = empty_map
    results = run_frame(wall_frame, halves, grid, codebook, FusionConfig())
    path = tmp_path / "associations.ndjson"
    write_association_log(path, [r.to_record(0) for r in results])
    write_association_log(path, [results[0].to_record(1)])
    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(records) == 3
    assert records[0]["id"] == 1 and records[0]["new"] is True
    assert records[2]["t"] == 1
    assert records[0]["n_voxels"] == len(results[0].voxels)

def test_voxel_counts_match_label_frequencies():
    """Test per-voxel probabilities and labels against label frequencies over random observation sequences"""
    rng = np.random.default_rng(7)
    grid = VoxelGrid(resolution=0.1)
    for i in range(1000):
        key = VoxelKey.from_index((i, 0, 0))
        sequence = rng.integers(1, 6, size=rng.integers(1, 25)).tolist()
        for gamma in sequence:
            update_voxels([AssociationResult(0, gamma, 1.0, False, {key})], grid)
        expected = {gamma: sequence.count(gamma) / len(sequence) for gamma in set(sequence)}
        assert grid.instance_tuple(key) == expected
        assert grid.counts(key) == {gamma: sequence.count(gamma) for gamma in set(sequence)}
        assert grid.label_query(key) == min(expected, key=lambda g: (-expected[g], g))
