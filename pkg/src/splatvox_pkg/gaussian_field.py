from dataclasses import dataclass, field

import numpy as np
from plyfile import PlyData, PlyElement

from splatvox_pkg.errors import NumericalError
from splatvox_pkg.splat_render import (
    CameraModel,
    LossReport,
    LossWeights,
    backward,
    normal_from_depth,
    render,
)
from splatvox_pkg.voxel_grid import VoxelKey

SEED_SCALE_FACTOR = 0.2
SEED_OPACITY = 0.5
SH_C0 = 0.28209479177387814
PARAMS_PER_GAUSSIAN = 14  # mu 3, q 4, s 3, c 3, o 1

@dataclass
class GaussianPrimitive:
    """
    One 3D Gaussian: center mu, unit quaternion q (w, x, y, z), RGB color c, scale s and opacity o.

    Raises:
        ValueError: If q is not unit length, a scale is not positive, or c / o leave [0, 1].
    """
    mu: np.ndarray
    q: np.ndarray
    c: np.ndarray
    s: np.ndarray
    o: float

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        self.s = np.asarray(self.s, dtype=np.float64)
        self.o = float(self.o)
        if abs(np.linalg.norm(self.q) - 1.0) > 1e-6:
            raise ValueError(f"Quaternion must have unit norm, got |q| = {np.linalg.norm(self.q)}.")
        if np.any(self.s <= 0):
            raise ValueError(f"Scales must be positive, got {self.s}.")
        if np.any(self.c < 0) or np.any(self.c > 1) or not 0.0 <= self.o <= 1.0:
            raise ValueError("Color and opacity must lie in [0, 1].")

class GaussianField:
    """
    Growing collection of Gaussians stored as parallel arrays.

    Gaussians are only ever appended; `voxel_keys[i]` is the voxel Gaussian i was seeded from.
    """

    def __init__(self):
        self.mu = np.zeros((0, 3))
        self.q = np.zeros((0, 4))
        self.s = np.zeros((0, 3))
        self.c = np.zeros((0, 3))
        self.o = np.zeros(0)
        self.voxel_keys = []

    def __len__(self):
        return len(self.o)

    def __repr__(self):
        return f"GaussianField(n={len(self)})"

    def extend(self, primitives, voxel_keys=None):
        """Append primitives (and the voxels they were seeded from)."""
        if not primitives:
            return
        self.mu = np.vstack([self.mu, [g.mu for g in primitives]])
        self.q = np.vstack([self.q, [g.q for g in primitives]])
        self.s = np.vstack([self.s, [g.s for g in primitives]])
        self.c = np.vstack([self.c, [g.c for g in primitives]])
        self.o = np.concatenate([self.o, [g.o for g in primitives]])
        self.voxel_keys.extend(voxel_keys if voxel_keys is not None else [None] * len(primitives))

    def primitive(self, i):
        return GaussianPrimitive(self.mu[i], self.q[i], self.c[i], self.s[i], self.o[i])

    @property
    def model_size_mb(self):
        """Parameter memory in megabytes at float32 precision."""
        return len(self) * PARAMS_PER_GAUSSIAN * 4 / 1e6

    def write_ply(self, path):
        """
        Write the field in the common splat PLY layout: x, y, z, nx, ny, nz, f_dc_0..2 (degree-0
        SH coefficients), opacity (logit), scale_0..2 (log), rot_0..3 (w, x, y, z). Seeding voxels
        are kept in the extra properties vb_x, vb_y, vb_z and v_local (-1 when unknown).
        """
        names = (
            ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity"]
            + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)]
        )
        dtype = [(name, "f4") for name in names] + [(name, "i4") for name in ("vb_x", "vb_y", "vb_z", "v_local")]
        vertices = np.empty(len(self), dtype=dtype)
        for i, axis in enumerate("xyz"):
            vertices[axis] = self.mu[:, i]
            vertices[f"n{axis}"] = 0.0
            vertices[f"scale_{i}"] = np.log(self.s[:, i])
        for i in range(3):
            vertices[f"f_dc_{i}"] = (self.c[:, i] - 0.5) / SH_C0
        for i in range(4):
            vertices[f"rot_{i}"] = self.q[:, i]
        o = np.clip(self.o, 1e-6, 1 - 1e-6)
        vertices["opacity"] = np.log(o / (1 - o))
        keys = [(k.block + (k.local,)) if k is not None else (-1, -1, -1, -1) for k in self.voxel_keys]
        keys = np.array(keys, dtype=np.int64).reshape(-1, 4)
        for i, name in enumerate(("vb_x", "vb_y", "vb_z", "v_local")):
            vertices[name] = keys[:, i]
        PlyData([PlyElement.describe(vertices, "vertex")], text=False).write(str(path))

# Read splat PLY written by GaussianField.write_ply
def load_splat_ply(path):
    """
    Read a splat PLY file back into a GaussianField.

    Raises:
        ValueError: If the file has no vertex element with the splat properties.
    """
    data = PlyData.read(str(path))
    if "vertex" not in data:
        raise ValueError(f"{path} has no vertex element.")
    v = data["vertex"].data
    try:
        mu = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
        c = np.stack([v[f"f_dc_{i}"] for i in range(3)], axis=1).astype(np.float64) * SH_C0 + 0.5
        s = np.exp(np.stack([v[f"scale_{i}"] for i in range(3)], axis=1).astype(np.float64))
        q = np.stack([v[f"rot_{i}"] for i in range(4)], axis=1).astype(np.float64)
        o = 1.0 / (1.0 + np.exp(-v["opacity"].astype(np.float64)))
    except ValueError as e:
        raise ValueError(f"{path} is not a splat PLY file: {e}") from e
    gaussians = GaussianField()
    gaussians.mu, gaussians.s, gaussians.o = mu, s, o
    gaussians.c = np.clip(c, 0.0, 1.0)
    gaussians.q = q / np.linalg.norm(q, axis=1, keepdims=True)
    names = v.dtype.names
    if all(name in names for name in ("vb_x", "vb_y", "vb_z", "v_local")):
        gaussians.voxel_keys = [
            None if local < 0 else VoxelKey((int(x), int(y), int(z)), int(local))
            for x, y, z, local in zip(v["vb_x"], v["vb_y"], v["vb_z"], v["v_local"])
        ]
    else:
        gaussians.voxel_keys = [None] * len(o)
    return gaussians

@dataclass
class Keyframe:
    """A buffered frame with its own camera model."""
    frame: object
    camera: CameraModel = field(default_factory=CameraModel)
    _target_normals: tuple = field(default=None, repr=False)

    @property
    def target_normals(self):
        """(normals, valid mask) of the frame's depth, computed once."""
        if self._target_normals is None:
            normals = normal_from_depth(self.frame.depth, self.frame.intrinsics)
            self._target_normals = (normals, np.any(normals != 0, axis=-1))
        return self._target_normals

class KeyframeBuffer:
    """Unbounded list of keyframes; sampled per optimization iteration."""

    def __init__(self):
        self.keyframes = []

    def __len__(self):
        return len(self.keyframes)

    def __iter__(self):
        return iter(self.keyframes)

    def __getitem__(self, i):
        return self.keyframes[i]

    def append(self, frame):
        """Add a frame with a fresh [0.5, 0.5, 0, 0] camera model."""
        keyframe = Keyframe(frame, CameraModel())
        self.keyframes.append(keyframe)
        return keyframe

@dataclass
class KeyframePolicy:
    """
    Parameters:
        tau_threshold (float): Insert a keyframe when the unregistered ratio exceeds this.
        n_key (int): Force a keyframe after this many frames without one.
    """
    tau_threshold: float = 0.15
    n_key: int = 10

    def __post_init__(self):
        if not 0.0 <= self.tau_threshold <= 1.0:
            raise ValueError(f"tau_threshold must lie in [0, 1], got {self.tau_threshold}.")
        if not isinstance(self.n_key, int) or self.n_key <= 0:
            raise ValueError(f"n_key must be a positive integer, got {self.n_key}.")

@dataclass
class OptimConfig:
    """
    Per-frame optimization settings. Plain gradient descent on color, opacity and camera parameters.

    Parameters:
        lr_color, lr_opacity, lr_camera (float): Learning rates (0 freezes the group).
        iters_per_frame (int): Optimization steps per incoming frame.
        warmup_iters (int): Steps run on the first frame.
        kf_sample (int): Prior keyframes sampled per step, in addition to the current frame.
        w_rgb, w_ssim, w_depth, w_normal (float): Loss weights.
        use_camera_model (bool): False renders through the identity camera and leaves cameras untouched.
        use_keyframe_buffer (bool): False optimizes against the current frame only.
    """
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_camera: float = 1e-3
    iters_per_frame: int = 1
    warmup_iters: int = 1000
    kf_sample: int = 19
    w_rgb: float = 0.8
    w_ssim: float = 0.2
    w_depth: float = 0.5
    w_normal: float = 0.1
    use_camera_model: bool = True
    use_keyframe_buffer: bool = True

    def __post_init__(self):
        for name in ("lr_color", "lr_opacity", "lr_camera"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}.")
        for name in ("iters_per_frame", "warmup_iters"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value}.")
        if not isinstance(self.kf_sample, int) or self.kf_sample < 0:
            raise ValueError(f"kf_sample must be a non-negative integer, got {self.kf_sample}.")
        # Validates the loss weights
        LossWeights(self.w_rgb, self.w_ssim, self.w_depth, self.w_normal)

    @property
    def weights(self):
        return LossWeights(self.w_rgb, self.w_ssim, self.w_depth, self.w_normal)

# Gaussian initialization from newly labeled voxels
def seed_gaussians(new_voxels, grid):
    """
    One Gaussian per new voxel, in sorted key order: centered on the voxel, colored with its
    TSDF color, isotropic scale 0.2 x resolution, opacity 0.5 and identity rotation.

    Parameters:
        new_voxels (set of VoxelKey): Voxels from grid.new_voxel_set.
        grid (VoxelGrid): Map holding the voxels.

    Returns:
        tuple: (list of GaussianPrimitive, list of VoxelKey), aligned.

    Examples:
        >>> from splatvox_pkg.voxel_grid import VoxelGrid
        >>> prims, keys = seed_gaussians(set(), VoxelGrid(0.03))
        >>> prims
        []
    """
    keys = sorted(new_voxels)
    if not keys:
        return [], []
    centers = grid.voxel_centers(keys)
    scale = np.full(3, SEED_SCALE_FACTOR * grid.resolution)
    primitives = []
    for key, center in zip(keys, centers):
        block = grid.blocks.get(key.block)
        color = block.color[key.local] if block is not None else np.full(3, 0.5)
        primitives.append(GaussianPrimitive(
            mu=center, q=np.array([1.0, 0.0, 0.0, 0.0]), c=np.clip(color, 0.0, 1.0), s=scale.copy(), o=SEED_OPACITY,
        ))
    return primitives, keys

# Keyframe discrimination
def keyframe_ratio(frame, grid):
    """
    Fraction of the frame's visible observed voxels that no keyframe has registered yet.
    Defined as 1 when no voxel is visible.
    """
    visible = grid.visible_voxels(frame)
    if not visible:
        return 1.0
    unregistered = sum(1 for key in visible if not grid.is_registered(key))
    return unregistered / len(visible)

def select_keyframe(frame, grid, policy, frames_since_last_kf, buffer=None):
    """
    Decide whether a frame becomes a keyframe.

    A frame is a keyframe when its unregistered ratio exceeds policy.tau_threshold or when
    frames_since_last_kf reaches policy.n_key. A keyframe registers every voxel it sees and
    is appended to the buffer with a fresh camera model.

    Returns:
        bool: True if the frame was made a keyframe.
    """
    tau = keyframe_ratio(frame, grid)
    if tau > policy.tau_threshold or frames_since_last_kf >= policy.n_key:
        grid.set_registered(grid.visible_voxels(frame))
        if buffer is not None:
            buffer.append(frame)
        return True
    return False

def _sample_views(buffer, current, cfg, rng):
    if not cfg.use_keyframe_buffer:
        return [current]
    pool = [kf for kf in buffer if kf is not current]
    k = min(cfg.kf_sample, len(pool))
    if k == 0:
        return [current]
    picked = np.sort(rng.choice(len(pool), size=k, replace=False))
    return [current] + [pool[i] for i in picked]

# One gradient step over the current frame and sampled keyframes
def optimize_step(field, buffer, cfg, rng, current=None):
    """
    Render the current frame and up to kf_sample prior keyframes, average the weighted losses
    and take one gradient step on every Gaussian's color and opacity and on each view's camera.

    Parameters:
        field (GaussianField): Gaussians to optimize; positions, rotations and scales stay fixed.
        buffer (KeyframeBuffer): Keyframes.
        cfg (OptimConfig): Optimization settings.
        rng (np.random.Generator): Source of keyframe samples.
        current (Keyframe, optional): The frame being processed. Defaults to the newest keyframe.

    Returns:
        LossReport: Mean report over the optimized views.

    Raises:
        ValueError: If the buffer or the field is empty.
        NumericalError: If a loss is not finite.
    """
    if len(buffer) == 0 and current is None:
        raise ValueError("Keyframe buffer is empty.")
    if len(field) == 0:
        raise ValueError("Gaussian field is empty.")
    current = buffer[-1] if current is None else current
    views = _sample_views(buffer, current, cfg, rng)
    weights = cfg.weights

    g_color = np.zeros_like(field.c)
    g_opacity = np.zeros_like(field.o)
    reports, camera_grads = [], []
    for view in views:
        frame = view.frame
        cam = view.camera if cfg.use_camera_model else CameraModel.identity()
        rendered = render(field, frame.pose, frame.intrinsics, keep_state=True)
        grads = backward(rendered, cam, frame, weights, view.target_normals)
        if not np.isfinite(grads.report.total):
            raise NumericalError(f"Frame {frame.timestamp}: non-finite loss {grads.report.total}.")
        g_color += grads.color
        g_opacity += grads.opacity
        camera_grads.append(grads.camera)
        reports.append(grads.report)

    n_views = len(views)
    field.c = np.clip(field.c - cfg.lr_color * g_color / n_views, 0.0, 1.0)
    field.o = np.clip(field.o - cfg.lr_opacity * g_opacity / n_views, 0.0, 1.0)
    if cfg.use_camera_model:
        for view, g_cam in zip(views, camera_grads):
            view.camera = CameraModel.from_array(view.camera.as_array() - cfg.lr_camera * g_cam / n_views)
    return LossReport.mean(reports)

def optimize_frame(field, buffer, cfg, rng, current=None, warmup=False):
    """Run iters_per_frame steps (warmup_iters when warmup is set); returns the step reports."""
    n_iters = cfg.warmup_iters if warmup else cfg.iters_per_frame
    return [optimize_step(field, buffer, cfg, rng, current) for _ in range(n_iters)]
