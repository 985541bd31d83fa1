import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import trimesh
from plyfile import PlyData, PlyElement
from scipy import ndimage
from skimage import measure

from splatvox_pkg.geometry import backproject, pixel_rays, project_points

BLOCK_SIZE = 8
VOXELS_PER_BLOCK = BLOCK_SIZE ** 3
NEAR_PLANE = 1e-3

SNAPSHOT_MAGIC = b"OVXG"
SNAPSHOT_VERSION = 1
_SNAPSHOT_HEADER = struct.Struct("<4sIfQ")
_SNAPSHOT_TRAILER = struct.Struct("<ddI")  # exact resolution, truncation, frame counter
_BLOCK_COORD = struct.Struct("<iii")
_COUNT_ENTRY = np.dtype([("local", "<u2"), ("id", "<u8"), ("count", "<u4")])

# (512, 3) voxel offsets inside a block, ordered by local index = ox + 8·oy + 64·oz
_LOCAL_OFFSETS = np.stack(
    np.unravel_index(np.arange(VOXELS_PER_BLOCK), (BLOCK_SIZE,) * 3, order="F"), axis=1
)

class VoxelKey(NamedTuple):
    """Block coordinate plus local index in [0, 512)."""
    block: tuple
    local: int

    @classmethod
    def from_index(cls, index):
        ix, iy, iz = (int(i) for i in index)
        block = (ix // BLOCK_SIZE, iy // BLOCK_SIZE, iz // BLOCK_SIZE)
        ox, oy, oz = ix - block[0] * BLOCK_SIZE, iy - block[1] * BLOCK_SIZE, iz - block[2] * BLOCK_SIZE
        return cls(block, ox + BLOCK_SIZE * oy + BLOCK_SIZE ** 2 * oz)

    @property
    def offset(self):
        return (self.local % BLOCK_SIZE, (self.local // BLOCK_SIZE) % BLOCK_SIZE, self.local // BLOCK_SIZE ** 2)

    @property
    def index(self):
        """Global integer voxel index."""
        return tuple(b * BLOCK_SIZE + o for b, o in zip(self.block, self.offset))

@dataclass
class Voxel:
    """Read-only view of one voxel."""
    tsdf: float
    tsdf_weight: float
    color: np.ndarray
    alpha: dict
    registered: bool

# Closed-form posterior mean of the per-voxel Dirichlet over instance labels
def instance_tuple(voxel):
    """
    Normalize a voxel's instance counts into probabilities.

    Parameters:
        voxel (Voxel or dict): A voxel, or its instance ID -> count map.

    Returns:
        dict: instance ID -> probability, empty when there are no counts.

    Examples:
        >>> instance_tuple({1: 2, 2: 1})
        {1: 0.6666666666666666, 2: 0.3333333333333333}
    """
    counts = voxel.alpha if isinstance(voxel, Voxel) else voxel
    total = sum(counts.values())
    if total == 0:
        return {}
    return {gamma: count / total for gamma, count in counts.items()}

def argmax_label(counts):
    """Instance ID with the largest count, smallest ID on ties, None when empty."""
    if not counts:
        return None
    return max(counts.items(), key=lambda item: (item[1], -item[0]))[0]

class Block:
    """8³ voxels stored as flat arrays indexed by local index."""
    __slots__ = ("tsdf", "weight", "color", "registered", "first_counted", "alpha")

    def __init__(self):
        self.tsdf = np.ones(VOXELS_PER_BLOCK)
        self.weight = np.zeros(VOXELS_PER_BLOCK)
        self.color = np.zeros((VOXELS_PER_BLOCK, 3))
        self.registered = np.zeros(VOXELS_PER_BLOCK, dtype=bool)
        self.first_counted = np.full(VOXELS_PER_BLOCK, -1, dtype=np.int64)
        self.alpha = {}

@dataclass
class TriangleMesh:
    """Triangle mesh with per-vertex colors in [0, 1]."""
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    @property
    def is_empty(self):
        return len(self.faces) == 0

    def to_trimesh(self):
        return trimesh.Trimesh(vertices=self.vertices, faces=self.faces, process=False)

    def write_ply(self, path):
        """Write an ASCII PLY with x, y, z, red, green, blue vertices and triangle faces."""
        vertex = np.empty(len(self.vertices), dtype=[
            ("x", "f4"), ("y", "f4"), ("z", "f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1"),
        ])
        vertex["x"], vertex["y"], vertex["z"] = self.vertices.T if len(self.vertices) else ([], [], [])
        rgb = np.round(np.clip(self.colors, 0, 1) * 255).astype(np.uint8)
        vertex["red"], vertex["green"], vertex["blue"] = rgb.T if len(rgb) else ([], [], [])
        face = np.empty(len(self.faces), dtype=[("vertex_indices", "i4", (3,))])
        face["vertex_indices"] = self.faces
        PlyData(
            [PlyElement.describe(vertex, "vertex"), PlyElement.describe(face, "face")], text=True
        ).write(str(path))

def read_mesh_ply(path):
    """Read a mesh written by TriangleMesh.write_ply."""
    ply = PlyData.read(str(path))
    v = ply["vertex"]
    vertices = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    colors = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.float64) / 255.0
    faces = np.array([list(f) for f in ply["face"]["vertex_indices"]], dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(vertices, faces, colors)

class VoxelGrid:
    """
    Block-hashed sparse TSDF grid with per-voxel instance counts.

    Blocks of 8³ voxels are allocated only where depth observations fall. Each voxel
    keeps a truncated signed distance, its integration weight, a running color, a sparse
    instance ID -> count map and a keyframe registration flag.

    Parameters:
        resolution (float): Voxel edge length in meters.
        truncation (float, optional): TSDF truncation distance in meters. Defaults to 4 x resolution.

    Raises:
        ValueError: If resolution is not positive or truncation is below 2 x resolution.
    """

    def __init__(self, resolution=0.03, truncation=None):
        if not resolution > 0:
            raise ValueError(f"Voxel resolution must be positive, got {resolution}.")
        truncation = 4.0 * resolution if truncation is None else float(truncation)
        if truncation < 2.0 * resolution - 1e-12:
            raise ValueError(
                f"Truncation {truncation} must be at least twice the resolution {resolution}."
            )
        self.resolution = float(resolution)
        self.truncation = truncation
        self.blocks = {}
        self.frame_counter = 0
        self.last_touched = set()

    def __repr__(self):
        return (
            f"VoxelGrid(resolution={self.resolution}, truncation={self.truncation}, "
            f"blocks={len(self.blocks)}, frame_counter={self.frame_counter})"
        )

    @property
    def n_blocks(self):
        return len(self.blocks)

    @property
    def n_voxels(self):
        """Number of voxels with positive integration weight."""
        return int(sum(np.count_nonzero(b.weight) for b in self.blocks.values()))

    # Quantization
    def world_to_voxel(self, point):
        """
        Key of the voxel containing a world point (floor quantization).

        Raises:
            ValueError: If the point is not a finite 3-vector.
        """
        point = np.asarray(point, dtype=np.float64)
        if point.shape != (3,) or not np.all(np.isfinite(point)):
            raise ValueError(f"Expected a finite 3D point, got {point!r}.")
        return VoxelKey.from_index(np.floor(point / self.resolution).astype(np.int64))

    def voxel_center(self, key):
        return (np.array(key.index, dtype=np.float64) + 0.5) * self.resolution

    def voxel_centers(self, keys):
        keys = list(keys)
        if not keys:
            return np.zeros((0, 3))
        blocks = np.array([k.block for k in keys], dtype=np.int64)
        locals_ = np.array([k.local for k in keys], dtype=np.int64)
        return (blocks * BLOCK_SIZE + _LOCAL_OFFSETS[locals_] + 0.5) * self.resolution

    def points_to_keys(self, points):
        """Unique voxel keys of (N, 3) world points."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            return []
        indices = np.unique(np.floor(points / self.resolution).astype(np.int64), axis=0)
        return _keys_from_indices(indices)

    # Voxel access
    def _block(self, coord, create=False):
        block = self.blocks.get(coord)
        if block is None and create:
            block = self.blocks[coord] = Block()
        return block

    def voxel(self, key):
        """Snapshot of a voxel, None if its block is unallocated."""
        block = self.blocks.get(key.block)
        if block is None:
            return None
        return Voxel(
            tsdf=float(block.tsdf[key.local]),
            tsdf_weight=float(block.weight[key.local]),
            color=block.color[key.local].copy(),
            alpha=dict(block.alpha.get(key.local, {})),
            registered=bool(block.registered[key.local]),
        )

    def counts(self, key):
        block = self.blocks.get(key.block)
        if block is None:
            return {}
        return block.alpha.get(key.local, {})

    def total_count(self, key):
        return sum(self.counts(key).values())

    def add_count(self, key, gamma, n=1):
        """Increment the count of instance `gamma` in a voxel, allocating its block if needed."""
        block = self._block(key.block, create=True)
        counts = block.alpha.setdefault(key.local, {})
        if not counts:
            block.first_counted[key.local] = self.frame_counter
        counts[gamma] = counts.get(gamma, 0) + n

    def set_label(self, key, gamma):
        """Replace a voxel's counts with a single count of `gamma`."""
        block = self._block(key.block, create=True)
        if not block.alpha.get(key.local):
            block.first_counted[key.local] = self.frame_counter
        block.alpha[key.local] = {gamma: 1}

    def instance_tuple(self, key):
        return instance_tuple(self.counts(key))

    def label_query(self, key):
        """Argmax instance of a voxel (smallest ID on ties), None when unlabeled or unallocated."""
        return argmax_label(self.counts(key))

    def labeled_keys(self):
        """Keys of all voxels carrying instance counts."""
        return [
            VoxelKey(coord, local)
            for coord, block in self.blocks.items()
            for local, counts in block.alpha.items()
            if counts
        ]

    def neighbour_labels(self, keys, radius=1):
        """
        Argmax labels found within `radius` voxels (Chebyshev distance) of any of `keys`,
        the keys themselves included.
        """
        keys = list(keys)
        if not keys:
            return set()
        steps = np.arange(-radius, radius + 1)
        shifts = np.stack(np.meshgrid(steps, steps, steps, indexing="ij"), axis=-1).reshape(-1, 3)
        indices = np.array([k.index for k in keys], dtype=np.int64)
        around = np.unique((indices[:, None, :] + shifts[None, :, :]).reshape(-1, 3), axis=0)
        labels = {self.label_query(key) for key in _keys_from_indices(around)}
        labels.discard(None)
        return labels

    def label_sizes(self):
        """Number of voxels whose argmax label is each instance ID."""
        sizes = Counter()
        for block in self.blocks.values():
            for counts in block.alpha.values():
                if counts:
                    sizes[argmax_label(counts)] += 1
        return sizes

    def new_voxel_set(self, touched):
        """Voxels among `touched` whose total count first became positive this frame."""
        new = set()
        for key in touched:
            block = self.blocks.get(key.block)
            if block is not None and block.first_counted[key.local] == self.frame_counter:
                new.add(key)
        return new

    def is_registered(self, key):
        block = self.blocks.get(key.block)
        return bool(block is not None and block.registered[key.local])

    def set_registered(self, keys):
        for key in keys:
            block = self.blocks.get(key.block)
            if block is not None:
                block.registered[key.local] = True

    # Fusion
    def _candidate_blocks(self, frame):
        """Block coordinates crossed by the truncation band around valid depth samples."""
        valid = frame.depth > 0
        rays = pixel_rays(frame.intrinsics)[valid]
        depth = frame.depth[valid]
        block_len = self.resolution * BLOCK_SIZE
        found = []
        for offset in np.arange(-self.truncation, self.truncation + self.resolution / 2, self.resolution):
            z = depth + offset
            keep = z > NEAR_PLANE
            points = frame.pose.camera_to_world(rays[keep] * z[keep, None])
            found.append(np.unique(np.floor(points / block_len).astype(np.int64), axis=0))
        return np.unique(np.concatenate(found), axis=0)

    def _project_blocks(self, coords, frame):
        """Project every voxel centre of the given blocks into a frame."""
        centers = (coords[:, None, :] * BLOCK_SIZE + _LOCAL_OFFSETS[None] + 0.5) * self.resolution
        u, v, z = project_points(frame.pose.world_to_camera(centers), frame.intrinsics)
        h, w = frame.intrinsics.shape
        with np.errstate(invalid="ignore"):
            ui = np.rint(np.where(z > NEAR_PLANE, u, -1)).astype(np.int64)
            vi = np.rint(np.where(z > NEAR_PLANE, v, -1)).astype(np.int64)
        inside = (z > NEAR_PLANE) & (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
        ui, vi = np.where(inside, ui, 0), np.where(inside, vi, 0)
        sampled = np.where(inside, frame.depth[vi, ui], 0.0)
        in_band = inside & (sampled > 0) & (np.abs(sampled - z) <= self.truncation)
        return ui, vi, z, sampled, in_band

    def integrate_tsdf(self, frame):
        """
        Fuse one depth frame with per-update weight 1.

        Every voxel whose centre projects onto a valid depth sample with |depth - z| within
        the truncation distance gets tsdf ← running mean of clamp((depth - z) / truncation)
        and color ← running mean of the sampled pixel color. Blocks are allocated on demand.

        Parameters:
            frame (FrameBundle): Frame to integrate.

        Returns:
            set of VoxelKey: Voxels whose weight increased. Also kept as `last_touched`.
        """
        self.frame_counter += 1
        self.last_touched = set()
        if not np.any(frame.depth > 0):
            return set()

        coords = self._candidate_blocks(frame)
        ui, vi, z, sampled, in_band = self._project_blocks(coords, frame)
        sdf = np.clip((sampled - z) / self.truncation, -1.0, 1.0)
        colors = frame.color[vi, ui]

        touched = set()
        for b in np.flatnonzero(in_band.any(axis=1)):
            coord = tuple(int(c) for c in coords[b])
            block = self._block(coord, create=True)
            sel = np.flatnonzero(in_band[b])
            w = block.weight[sel]
            block.tsdf[sel] = (w * block.tsdf[sel] + sdf[b, sel]) / (w + 1.0)
            block.color[sel] = (w[:, None] * block.color[sel] + colors[b, sel]) / (w[:, None] + 1.0)
            block.weight[sel] = w + 1.0
            touched.update(VoxelKey(coord, local) for local in sel.tolist())
        self.last_touched = touched
        return set(touched)

    def mask_to_voxels(self, mask, depth, pose, intrinsics):
        """
        Voxel region of a mask: back-project its valid-depth pixels, quantize, and keep the
        voxels touched by the last integrate_tsdf call.

        Raises:
            ValueError: If mask and depth sizes differ.
        """
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != np.shape(depth):
            raise ValueError(f"Mask shape {mask.shape} does not match depth shape {np.shape(depth)}.")
        selected = mask & (np.asarray(depth) > 0)
        if not selected.any():
            return set()
        points = pose.camera_to_world(backproject(depth, intrinsics)[selected])
        return {key for key in self.points_to_keys(points) if key in self.last_touched}

    def visible_voxels(self, frame):
        """
        Observed voxels (weight > 0) visible in a frame: centre projects inside the image
        onto valid depth within the truncation distance.
        """
        if not self.blocks:
            return []
        coords_list = list(self.blocks)
        coords = np.array(coords_list, dtype=np.int64)
        _, _, _, _, in_band = self._project_blocks(coords, frame)
        weights = np.stack([self.blocks[c].weight for c in coords_list])
        visible = in_band & (weights > 0)
        return [
            VoxelKey(coords_list[b], int(local))
            for b, local in zip(*np.nonzero(visible))
        ]

    # Mesh extraction
    def _dense_volumes(self):
        coords = np.array(list(self.blocks), dtype=np.int64)
        lo = coords.min(axis=0)
        shape = tuple((coords.max(axis=0) - lo + 1) * BLOCK_SIZE + 2)
        tsdf = np.ones(shape)
        weight = np.zeros(shape)
        color = np.zeros(shape + (3,))
        for coord, block in self.blocks.items():
            o = (np.array(coord) - lo) * BLOCK_SIZE + 1
            sl = tuple(slice(o[i], o[i] + BLOCK_SIZE) for i in range(3))
            tsdf[sl] = block.tsdf.reshape((BLOCK_SIZE,) * 3, order="F")
            weight[sl] = block.weight.reshape((BLOCK_SIZE,) * 3, order="F")
            color[sl] = block.color.reshape((BLOCK_SIZE,) * 3 + (3,), order="F")
        origin_index = lo * BLOCK_SIZE - 1
        return tsdf, weight, color, origin_index

    def extract_mesh(self, resolution=None):
        """
        Marching-cubes mesh of the TSDF zero level set at the grid's native resolution.

        Cells are meshed only when all eight corners have been observed. Vertex colors are
        interpolated from voxel colors and faces are wound so normals follow the TSDF gradient.

        Parameters:
            resolution (float, optional): Must equal the grid resolution when given; finer meshes
                                          come from re-fusing rendered depth into a new grid.

        Returns:
            TriangleMesh: Mesh in world meters, empty when the grid has no zero crossing.

        Raises:
            ValueError: If a resolution different from the grid's is requested.
        """
        if resolution is not None and not np.isclose(resolution, self.resolution):
            raise ValueError(
                f"Mesh extraction runs at the grid resolution {self.resolution}; got {resolution}. "
                "Re-fuse into a grid of the desired resolution instead."
            )
        if not self.blocks:
            return TriangleMesh()
        tsdf, weight, color, origin_index = self._dense_volumes()
        observed = weight > 0
        cells = np.ones(tuple(s - 1 for s in observed.shape), dtype=bool)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    cells &= observed[dx:dx + cells.shape[0], dy:dy + cells.shape[1], dz:dz + cells.shape[2]]
        mask = np.zeros_like(observed)
        mask[:-1, :-1, :-1] = cells
        corner_values = tsdf[observed]
        if not mask.any() or corner_values.min() >= 0 or corner_values.max() <= 0:
            return TriangleMesh()
        try:
            verts, faces, _, _ = measure.marching_cubes(tsdf, level=0.0, mask=mask, allow_degenerate=False)
        except (ValueError, RuntimeError):
            return TriangleMesh()
        if len(faces) == 0:
            return TriangleMesh()

        vertex_colors = np.stack(
            [ndimage.map_coordinates(color[..., c], verts.T, order=1, mode="nearest") for c in range(3)],
            axis=1,
        )
        # Outward means along increasing TSDF
        a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
        face_normals = np.cross(b - a, c - a)
        centroids = (a + b + c) / 3
        gradient = np.stack(
            [ndimage.map_coordinates(g, centroids.T, order=1, mode="nearest") for g in np.gradient(tsdf)],
            axis=1,
        )
        if np.sum(np.einsum("ij,ij->i", face_normals, gradient)) < 0:
            faces = faces[:, ::-1]

        vertices = (origin_index + verts + 0.5) * self.resolution
        return TriangleMesh(vertices, np.ascontiguousarray(faces, dtype=np.int64), np.clip(vertex_colors, 0, 1))

    # Persistence
    def save_snapshot(self, path):
        """
        Write the grid as a binary snapshot: header [b"OVXG", u32 version, f32 resolution,
        u64 block count], one record per block, then [f64 resolution, f64 truncation,
        u32 frame counter].
        """
        with open(path, "wb") as f:
            f.write(_SNAPSHOT_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, self.resolution, len(self.blocks)))
            for coord in sorted(self.blocks):
                block = self.blocks[coord]
                f.write(_BLOCK_COORD.pack(*coord))
                f.write(block.tsdf.astype("<f4").tobytes())
                f.write(block.weight.astype("<f4").tobytes())
                f.write(block.color.astype("<f4").tobytes())
                f.write(block.registered.astype("u1").tobytes())
                f.write(block.first_counted.astype("<i4").tobytes())
                entries = np.array(
                    [
                        (local, gamma, count)
                        for local in sorted(block.alpha)
                        for gamma, count in sorted(block.alpha[local].items())
                    ],
                    dtype=_COUNT_ENTRY,
                )
                f.write(struct.pack("<I", len(entries)))
                f.write(entries.tobytes())
            f.write(_SNAPSHOT_TRAILER.pack(self.resolution, self.truncation, self.frame_counter))

def _keys_from_indices(indices):
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    blocks = np.floor_divide(indices, BLOCK_SIZE)
    offsets = indices - blocks * BLOCK_SIZE
    locals_ = offsets[:, 0] + BLOCK_SIZE * offsets[:, 1] + BLOCK_SIZE ** 2 * offsets[:, 2]
    return [VoxelKey(tuple(b), l) for b, l in zip(blocks.tolist(), locals_.tolist())]

# Used by render/eval/export commands to reopen a persisted map
def load_grid_snapshot(path):
    """
    Read a grid written by VoxelGrid.save_snapshot.

    Raises:
        ValueError: If the file is not an OVXG snapshot of a supported version.
    """
    with open(path, "rb") as f:
        data = f.read()
    magic, version, resolution, n_blocks = _SNAPSHOT_HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"{path} is not a voxel grid snapshot (magic {magic!r}).")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"Unsupported snapshot version {version}.")

    offset = _SNAPSHOT_HEADER.size
    blocks = {}
    for _ in range(n_blocks):
        coord = _BLOCK_COORD.unpack_from(data, offset)
        offset += _BLOCK_COORD.size
        block = Block()
        for name, dtype, count in (
            ("tsdf", "<f4", VOXELS_PER_BLOCK),
            ("weight", "<f4", VOXELS_PER_BLOCK),
            ("color", "<f4", VOXELS_PER_BLOCK * 3),
            ("registered", "u1", VOXELS_PER_BLOCK),
            ("first_counted", "<i4", VOXELS_PER_BLOCK),
        ):
            values = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
            offset += values.nbytes
            current = getattr(block, name)
            setattr(block, name, values.astype(current.dtype).reshape(current.shape))
        (n_entries,) = struct.unpack_from("<I", data, offset)
        offset += 4
        entries = np.frombuffer(data, dtype=_COUNT_ENTRY, count=n_entries, offset=offset)
        offset += entries.nbytes
        for local, gamma, count in entries.tolist():
            block.alpha.setdefault(int(local), {})[int(gamma)] = int(count)
        blocks[tuple(coord)] = block

    resolution, truncation, frame_counter = _SNAPSHOT_TRAILER.unpack_from(data, offset)
    grid = VoxelGrid(resolution=resolution, truncation=truncation)
    grid.blocks = blocks
    grid.frame_counter = frame_counter
    return grid
